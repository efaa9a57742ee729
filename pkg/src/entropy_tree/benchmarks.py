"""Synthetic scripted-model families used by the experiments and tests."""

from __future__ import annotations

import math

import numpy as np

from .eval import ProblemRecord
from .model import ScriptedModel, StepOutput, TokenDistribution, Vocabulary

EOS = "<eos>"


def _dist(V: int, weights: dict[int, float]) -> TokenDistribution:
    p = np.zeros(V)
    for i, w in weights.items():
        p[i] = w
    return TokenDistribution(p)


def _answer_chain(
    vocab: Vocabulary, table: dict, prefix: tuple[int, ...], answer: str, importance: float = 1.0
) -> None:
    """Script ``prefix -> ANSWER: <answer> <eos>`` deterministically."""
    V = len(vocab)
    for tok in ("ANSWER:", answer, EOS):
        table[prefix] = StepOutput(TokenDistribution.one_hot(V, vocab.id(tok)), importance)
        prefix = prefix + (vocab.id(tok),)


def fork_model(q_correct: float = 0.05, *, importance: float = 1.0) -> tuple[ScriptedModel, list[ProblemRecord]]:
    """One problem whose gold answer lies only behind the second-ranked first token.

    The first generated token is ``W`` with probability ``1 - q_correct`` or
    ``C`` with probability ``q_correct``; both continue deterministically to
    ``ANSWER: 0`` and ``ANSWER: 1`` respectively. Gold is ``1``.
    """
    if not 0.0 < q_correct < 0.5:
        raise ValueError("q_correct must lie in (0, 0.5) so C ranks second")
    vocab = Vocabulary.from_tokens(["W", "C", "ANSWER:", "0", "1", EOS], EOS)
    table: dict = {}
    table[()] = StepOutput(_dist(len(vocab), {0: 1.0 - q_correct, 1: q_correct}), importance)
    _answer_chain(vocab, table, (0,), "0")
    _answer_chain(vocab, table, (1,), "1")
    return ScriptedModel(vocab, table), [ProblemRecord("fork", "", "1")]


def fork_entropy(q_correct: float) -> float:
    return -(q_correct * math.log(q_correct) + (1 - q_correct) * math.log(1 - q_correct))


def mixed_model(
    n_problems: int = 60,
    hard_every: int = 3,
    *,
    q_correct: float = 0.05,
    easy_error: float = 0.01,
) -> tuple[ScriptedModel, list[ProblemRecord]]:
    """Forked-hard and easy problems in one vocabulary.

    Every ``hard_every``-th problem is hard: its first token is ``W`` (wrong)
    with probability ``1 - q_correct``. The others are easy: ``C`` with
    probability ``1 - easy_error``. Problem ``i`` has prompt token ``P<i>``.
    """
    prompts = [f"P{i}" for i in range(n_problems)]
    vocab = Vocabulary.from_tokens(["W", "C", "ANSWER:", "0", "1", EOS, *prompts], EOS)
    V = len(vocab)
    table: dict = {}
    problems = []
    for i, name in enumerate(prompts):
        pid = vocab.id(name)
        hard = i % hard_every == 0
        weights = {0: 1.0 - q_correct, 1: q_correct} if hard else {1: 1.0 - easy_error, 0: easy_error}
        table[(pid,)] = StepOutput(_dist(V, weights), 1.0)
        _answer_chain(vocab, table, (pid, 0), "0")
        _answer_chain(vocab, table, (pid, 1), "1")
        problems.append(ProblemRecord(f"{'hard' if hard else 'easy'}-{i}", name, "1"))
    return ScriptedModel(vocab, table), problems


def monotone_entropy_model(length: int = 10) -> tuple[ScriptedModel, list[ProblemRecord]]:
    """Binary choices whose entropy strictly increases with position, then EOS.

    At depth ``t < length`` every prefix scores ``[1 - e_t, e_t]`` over
    ``a``/``b`` with ``e_t`` rising linearly from 0.02 to 0.5; at depth
    ``length`` the model emits EOS.
    """
    vocab = Vocabulary.from_tokens(["a", "b", "ANSWER:", "1", EOS], EOS)
    V = len(vocab)
    table: dict = {}
    level: list[tuple[int, ...]] = [()]
    for t in range(length):
        e = 0.02 + 0.48 * t / max(length - 1, 1)
        out = StepOutput(_dist(V, {0: 1.0 - e, 1: e}), 1.0)
        nxt = []
        for prefix in level:
            table[prefix] = out
            nxt += [prefix + (0,), prefix + (1,)]
        level = nxt
    for prefix in level:
        table[prefix] = StepOutput(TokenDistribution.one_hot(V, vocab.eos_id), 1.0)
    return ScriptedModel(vocab, table), [ProblemRecord("mono", "", "1")]


def random_scripted_model(
    rng: np.random.Generator, *, max_vocab: int = 8, max_depth: int = 32, walks: int = 6
) -> ScriptedModel:
    """A random table model for invariant testing.

    Entries are laid along a few random walks from the root; anything off
    those walks falls back to a random default with some EOS mass.
    Entry shapes mix one-hot, exact ties and Dirichlet draws so that every
    gate and tie-breaking branch is exercised.
    """
    V = int(rng.integers(2, max_vocab + 1))
    vocab = Vocabulary.from_tokens([f"t{i}" for i in range(V - 1)] + [EOS], EOS)
    eos = vocab.eos_id

    def random_dist(eos_weight: float) -> TokenDistribution:
        kind = int(rng.integers(0, 5))
        if kind == 0:
            return TokenDistribution.one_hot(V, int(rng.integers(0, V)))
        if kind == 1:
            support = rng.choice(V, size=int(rng.integers(1, V + 1)), replace=False)
            p = np.zeros(V)
            p[support] = 1.0
            return TokenDistribution.normalized(p)
        p = rng.dirichlet(np.full(V, (0.2, 1.0, 5.0)[kind - 2]))
        p[eos] = p[eos] * eos_weight
        if p.sum() == 0:
            p[eos] = 1.0
        return TokenDistribution.normalized(p)

    def importance() -> float | None:
        r = rng.random()
        return None if r < 0.1 else float(rng.random())

    default = StepOutput(TokenDistribution.normalized(np.r_[rng.random(V - 1), rng.uniform(0.1, 1.5)]), 1.0)
    table: dict[tuple[int, ...], StepOutput] = {}
    depth = int(rng.integers(1, max_depth + 1))
    for _ in range(walks):
        prefix: tuple[int, ...] = ()
        for _t in range(depth):
            if prefix not in table:
                table[prefix] = StepOutput(random_dist(float(rng.uniform(0.0, 0.3))), importance())
            probs = table[prefix].dist.probs
            choices = [i for i in range(V) if probs[i] > 0 and i != eos]
            if not choices:
                break
            prefix = prefix + (int(rng.choice(choices)),)
    return ScriptedModel(vocab, table, default)
