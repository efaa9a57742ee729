"""Entropy-gated tree decoding.

Every active path is advanced one token per round (all active paths share
the same generated length, so a round is one BFS level). At each step the
full next-token distribution is scored; when its entropy reaches ``tau``
and the importance of its argmax token reaches ``delta``, the path forks
into the top tokens instead of sampling one. Forking stops once the tree
holds ``n_tree`` leaves; afterwards every path just samples to EOS or the
length cap.

Scoring within a round may run on a thread pool. Budget decisions are
applied afterwards in FIFO order by a single writer, and every path owns an
RNG derived from ``(master_seed, path_id)``, so the tree does not depend on
the worker count.
"""

from __future__ import annotations

import json
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import DecodeError, EntropyTreeError, InputError, ParseError
from .model import LanguageModel, StepOutput, TokenDistribution, Vocabulary
from .sampling import SamplerConfig, descending_order, make_rng, select_token, token_entropy

DEFAULT_MAX_TOKENS = 256


@dataclass(frozen=True)
class BranchConfig:
    tau: float
    delta: float = 0.0
    b: int = 2
    n_tree: int = 20
    max_tokens: int = DEFAULT_MAX_TOKENS
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self) -> None:
        if not self.tau >= 0:
            raise InputError("tau must be >= 0")
        if not 0.0 <= self.delta <= 1.0:
            raise InputError("delta must lie in [0, 1]")
        if self.b < 2:
            raise InputError("b must be >= 2")
        if self.n_tree < 1:
            raise InputError("n_tree must be >= 1")
        if self.max_tokens < 1:
            raise InputError("max_tokens must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> BranchConfig:
        d = dict(d)
        sampler = d.pop("sampler", None) or {}
        return cls(**d, sampler=SamplerConfig(**sampler))


@dataclass(eq=False)
class TreeNode:
    """One generated token.

    ``entropy``/``importance`` describe the step distribution that produced
    ``token``; ``logprob`` is the token's log-probability under the full
    (untruncated) step distribution. The root carries no token.
    """

    token: int | None
    entropy: float | None
    importance: float | None
    logprob: float
    depth: int
    serial: int
    children: list[TreeNode] = field(default_factory=list)
    branched: bool = False
    finish_reason: str | None = None

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass
class DecodingTree:
    vocab: Vocabulary
    prompt: tuple[int, ...]
    root: TreeNode
    config: BranchConfig
    master_seed: int
    steps: int = 0
    # serial of the first node created after the leaf budget was used up
    budget_serial: int | None = None

    def nodes(self) -> Iterator[TreeNode]:
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    @property
    def leaf_count(self) -> int:
        return sum(1 for n in self.nodes() if n.is_leaf)

    def branched_nodes(self) -> list[TreeNode]:
        return [n for n in self.nodes() if n.branched]


@dataclass(frozen=True)
class LeafSequence:
    tokens: tuple[int, ...]
    text: str
    cum_logprob: float
    length: int
    branch_positions: tuple[int, ...]
    finish_reason: str


@dataclass
class PathState:
    node: TreeNode
    path_id: tuple[int, ...]
    rng: np.random.Generator
    tokens: list[int] = field(default_factory=list)
    cum_logprob: float = 0.0
    finished: bool = False
    finish_reason: str | None = None


def is_branch_candidate(h: float, tau: float) -> bool:
    return h >= tau


def should_branch(h: float, importance: float | None, tau: float, delta: float) -> bool:
    if not is_branch_candidate(h, tau):
        return False
    return importance is None or importance >= delta


def allowed_children(current_leaf_count: int, b: int, n_tree: int) -> int:
    """Children a fork may create without exceeding the leaf budget (1 = no fork)."""
    if not 1 <= current_leaf_count <= n_tree:
        raise InputError(f"leaf count {current_leaf_count} outside [1, {n_tree}]")
    return min(b, n_tree - current_leaf_count + 1)


def branch_tokens(dist: TokenDistribution, c: int) -> list[tuple[int, float]]:
    """The ``c`` most probable tokens with their log-probabilities.

    Fewer are returned when the distribution has fewer than ``c`` non-zero
    entries.
    """
    if c < 1:
        raise InputError("c must be positive")
    probs = dist.probs
    order = descending_order(probs)[:c]
    return [(int(i), math.log(probs[i])) for i in order if probs[i] > 0]


def _score(model: LanguageModel, prompt: tuple[int, ...], path: PathState) -> StepOutput:
    prefix = prompt + tuple(path.tokens)
    try:
        return model.score_next(prefix)
    except Exception as exc:
        raise DecodeError(f"model failed to score: {exc}", path.path_id, prefix) from exc


def decode_tree(
    model: LanguageModel,
    prompt: Sequence[int],
    config: BranchConfig,
    master_seed: int,
    *,
    jobs: int = 1,
    branch_rate: float | None = None,
) -> DecodingTree:
    """Grow an Entropy-Tree from ``prompt``.

    ``branch_rate`` replaces the entropy/importance gate with an independent
    Bernoulli draw per step (drawn from the path's RNG); forks still take
    the top tokens and respect the leaf budget.
    """
    vocab = model.vocab
    prompt = vocab.check(prompt)
    if branch_rate is not None and not 0.0 <= branch_rate <= 1.0:
        raise InputError("branch_rate must lie in [0, 1]")
    eos = vocab.eos_id
    serial = 0
    root = TreeNode(None, None, None, 0.0, 0, serial)
    tree = DecodingTree(vocab, prompt, root, config, master_seed)
    frontier: deque[PathState] = deque([PathState(root, (), make_rng(master_seed))])
    leaves = 1
    if leaves >= config.n_tree:
        tree.budget_serial = 1

    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        while frontier:
            batch = list(frontier)
            frontier.clear()
            if pool is not None:
                outputs = list(pool.map(lambda p: _score(model, prompt, p), batch))
            else:
                outputs = [_score(model, prompt, p) for p in batch]

            for path, out in zip(batch, outputs):
                tree.steps += 1
                dist = out.dist
                if len(dist) != len(vocab):
                    raise DecodeError("distribution size does not match vocabulary", path.path_id, prompt + tuple(path.tokens))
                h = token_entropy(dist)
                if leaves >= config.n_tree:
                    want = False
                elif branch_rate is None:
                    want = should_branch(h, out.importance, config.tau, config.delta)
                else:
                    want = bool(path.rng.random() < branch_rate)
                c = allowed_children(leaves, config.b, config.n_tree) if want else 1
                forks = branch_tokens(dist, c) if c >= 2 else []

                if len(forks) >= 2:
                    path.node.branched = True
                    leaves += len(forks) - 1
                    children = []
                    for i, (tok, lp) in enumerate(forks):
                        serial += 1
                        node = TreeNode(tok, h, out.importance, lp, path.node.depth + 1, serial)
                        path.node.children.append(node)
                        child_id = path.path_id + (i,)
                        children.append(
                            PathState(node, child_id, make_rng(master_seed, *child_id), path.tokens + [tok], path.cum_logprob + lp)
                        )
                    if leaves >= config.n_tree and tree.budget_serial is None:
                        tree.budget_serial = serial + 1
                else:
                    tok = select_token(dist, config.sampler, path.rng)
                    lp = math.log(dist.probs[tok])
                    serial += 1
                    node = TreeNode(tok, h, out.importance, lp, path.node.depth + 1, serial)
                    path.node.children.append(node)
                    path.node, path.tokens, path.cum_logprob = node, path.tokens + [tok], path.cum_logprob + lp
                    children = [path]

                for child in children:
                    if child.tokens[-1] == eos:
                        child.finished, child.finish_reason = True, "eos"
                    elif len(child.tokens) >= config.max_tokens:
                        child.finished, child.finish_reason = True, "max_tokens"
                    if child.finished:
                        child.node.finish_reason = child.finish_reason
                    else:
                        frontier.append(child)
    finally:
        if pool is not None:
            pool.shutdown()
    return tree


def collect_leaves(tree: DecodingTree) -> list[LeafSequence]:
    """Root-to-leaf sequences in depth-first order (children in fork order)."""
    vocab = tree.vocab
    leaves = []
    stack: list[tuple[TreeNode, tuple[int, ...], float, tuple[int, ...]]] = [(tree.root, (), 0.0, ())]
    while stack:
        node, toks, lp, forks = stack.pop()
        if node.is_leaf:
            if node is tree.root:
                continue
            leaves.append(
                LeafSequence(toks, vocab.decode(toks), lp, len(toks), forks, node.finish_reason or "max_tokens")
            )
            continue
        fork_here = forks + (node.depth,) if node.branched else forks
        for child in reversed(node.children):
            stack.append((child, toks + (child.token,), lp + child.logprob, fork_here))
    return leaves


def decode_chain(
    model: LanguageModel,
    prompt: Sequence[int],
    sampler: SamplerConfig,
    max_tokens: int,
    seed: int,
) -> LeafSequence:
    """A single sampled generation; the same as a tree with a one-leaf budget."""
    return collect_leaves(decode_chain_tree(model, prompt, sampler, max_tokens, seed))[0]


def decode_chain_tree(
    model: LanguageModel, prompt: Sequence[int], sampler: SamplerConfig, max_tokens: int, seed: int
) -> DecodingTree:
    config = BranchConfig(tau=0.0, delta=0.0, b=2, n_tree=1, max_tokens=max_tokens, sampler=sampler)
    return decode_tree(model, prompt, config, seed)


# ---------------------------------------------------------------------------
# serialization


def tree_to_json(tree: DecodingTree) -> str:
    """Flat JSON dump: nodes in serial order, each naming its parent's serial."""
    nodes = []
    parent_of: dict[int, int | None] = {tree.root.serial: None}
    for node in tree.nodes():
        for child in node.children:
            parent_of[child.serial] = node.serial
    for node in sorted(tree.nodes(), key=lambda n: n.serial):
        nodes.append(
            {
                "serial": node.serial,
                "parent": parent_of[node.serial],
                "token": node.token,
                "text": None if node.token is None else tree.vocab.tokens[node.token],
                "depth": node.depth,
                "entropy": node.entropy,
                "importance": node.importance,
                "logprob": node.logprob,
                "branched": node.branched,
                "finish_reason": node.finish_reason,
            }
        )
    doc = {
        "tokens": list(tree.vocab.tokens),
        "eos": tree.vocab.eos,
        "prompt": list(tree.prompt),
        "config": tree.config.to_dict(),
        "master_seed": tree.master_seed,
        "steps": tree.steps,
        "budget_serial": tree.budget_serial,
        "nodes": nodes,
    }
    return json.dumps(doc, indent=1) + "\n"


def tree_from_json(text: str) -> DecodingTree:
    try:
        doc = json.loads(text)
        vocab = Vocabulary.from_tokens(doc["tokens"], doc["eos"])
        by_serial: dict[int, TreeNode] = {}
        root = None
        for rec in doc["nodes"]:
            node = TreeNode(
                rec["token"], rec["entropy"], rec["importance"], rec["logprob"],
                rec["depth"], rec["serial"], [], rec["branched"], rec["finish_reason"],
            )
            by_serial[node.serial] = node
            if rec["parent"] is None:
                root = node
            else:
                by_serial[rec["parent"]].children.append(node)
        if root is None:
            raise ParseError("tree dump has no root node")
        return DecodingTree(
            vocab, tuple(doc["prompt"]), root, BranchConfig.from_dict(doc["config"]),
            doc["master_seed"], doc["steps"], doc["budget_serial"],
        )
    except EntropyTreeError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed tree dump ({exc})") from None
