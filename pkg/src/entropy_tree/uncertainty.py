"""Answer extraction and uncertainty scores over a set of generations."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from itertools import combinations
from typing import Literal, Sequence

from .errors import InputError
from .tree import LeafSequence

NO_ANSWER = "<no-answer>"

_NUMBER = re.compile(r"-?\d+(?:\.\d+)?")


@dataclass(frozen=True)
class ExtractionRule:
    pattern: str = r"ANSWER:\s*(\S+)"
    policy: Literal["last_match", "first_match"] = "last_match"
    fallback: Literal["last_number", "none"] = "last_number"

    def __post_init__(self) -> None:
        try:
            groups = re.compile(self.pattern).groups
        except re.error as exc:
            raise InputError(f"bad extraction pattern: {exc}") from None
        if groups != 1:
            raise InputError(f"extraction pattern must have exactly one capture group, has {groups}")
        if self.policy not in ("last_match", "first_match"):
            raise InputError(f"unknown policy {self.policy!r}")
        if self.fallback not in ("last_number", "none"):
            raise InputError(f"unknown fallback {self.fallback!r}")


def extract_answer(text: str, rule: ExtractionRule = ExtractionRule()) -> str:
    matches = re.findall(rule.pattern, text)
    if matches:
        answer = matches[-1] if rule.policy == "last_match" else matches[0]
    elif rule.fallback == "last_number":
        numbers = _NUMBER.findall(text)
        if not numbers:
            return NO_ANSWER
        answer = numbers[-1]
    else:
        return NO_ANSWER
    answer = answer.strip()
    return answer if answer else NO_ANSWER


@dataclass(frozen=True)
class AnswerDistribution:
    counts: dict[str, int]
    total: int

    def __post_init__(self) -> None:
        if self.total < 1 or sum(self.counts.values()) != self.total:
            raise InputError("total must equal the sum of counts and be positive")

    def probabilities(self) -> dict[str, float]:
        return {a: n / self.total for a, n in self.counts.items()}


def answer_distribution(answers: Sequence[str]) -> AnswerDistribution:
    if not answers:
        raise InputError("no answers")
    return AnswerDistribution(dict(Counter(answers)), len(answers))


def predictive_entropy(d: AnswerDistribution) -> float:
    """Entropy (nats) of the empirical answer distribution, NO_ANSWER included."""
    h = 0.0
    for n in d.counts.values():
        if n:
            p = n / d.total
            h -= p * math.log(p)
    return max(h, 0.0)


def majority_vote(answers: Sequence[str]) -> str:
    """Most frequent extracted answer; ties go to the earliest occurrence.

    NO_ANSWER never wins unless nothing else was extracted.
    """
    if not answers:
        raise InputError("no answers")
    counts = Counter(a for a in answers if a != NO_ANSWER)
    if not counts:
        return NO_ANSWER
    # Counter preserves first-insertion order and max() returns the first maximum
    return max(counts, key=counts.__getitem__)


def ln_predictive_entropy(leaves: Sequence[LeafSequence]) -> float:
    """Mean length-normalized negative log-likelihood of the sequences."""
    if not leaves:
        raise InputError("no sequences")
    total = 0.0
    for leaf in leaves:
        if leaf.length < 1:
            raise InputError("sequence of length 0")
        total += leaf.cum_logprob / leaf.length
    return max(-total / len(leaves), 0.0)


def lcs_length(a: Sequence[int], b: Sequence[int]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def lexical_similarity(u: Sequence[int], v: Sequence[int]) -> float:
    longest = max(len(u), len(v))
    if longest == 0:
        return 1.0
    return lcs_length(u, v) / longest


def lexical_similarity_uncertainty(leaves: Sequence[LeafSequence]) -> float:
    """One minus the mean pairwise normalized-LCS similarity of the token sequences."""
    if len(leaves) < 2:
        raise InputError("lexical similarity needs at least 2 sequences")
    sims = [lexical_similarity(u.tokens, v.tokens) for u, v in combinations(leaves, 2)]
    return 1.0 - sum(sims) / len(sims)
