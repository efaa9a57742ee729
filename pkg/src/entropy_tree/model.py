"""Autoregressive model abstraction and the reference backends.

A backend maps a token prefix (prompt followed by generated tokens, as
vocabulary ids) to a :class:`StepOutput`: the next-token distribution plus
an optional importance score for the distribution's argmax token.

Backends:

* :class:`ScriptedModel` -- a lookup table keyed by exact prefix, with a
  fallback distribution. Used for hand-traced fixtures.
* :class:`NGramModel` -- add-alpha smoothed n-gram counts trained on a
  whitespace-tokenized corpus. Importance is always 1.0.
* :class:`AttentionImportanceModel` -- wraps another backend and replaces
  its importance with the max causal attention weight computed by a
  :class:`ToyAttentionLayer`.

All backends are immutable after construction and safe for concurrent use.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .errors import InputError, ParseError, UndefinedImportanceError, ValidationError

BOS = "<bos>"
BOS_ID = -1

DIST_TOL = 1e-9
FILE_TOL = 1e-6


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    eos_id: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(self.tokens) < 2:
            raise InputError("vocabulary needs at least 2 tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise InputError("vocabulary tokens must be unique")
        if not 0 <= self.eos_id < len(self.tokens):
            raise InputError(f"eos_id {self.eos_id} out of range")
        if BOS in self.tokens:
            raise InputError(f"{BOS!r} is reserved and cannot be a vocabulary token")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def from_tokens(cls, tokens: Iterable[str], eos: str) -> Vocabulary:
        tokens = tuple(tokens)
        if eos not in tokens:
            raise InputError(f"eos token {eos!r} not in vocabulary")
        return cls(tokens, tokens.index(eos))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def eos(self) -> str:
        return self.tokens[self.eos_id]

    def id(self, token: str) -> int:
        try:
            return self._index[token]  # type: ignore[attr-defined]
        except KeyError:
            raise InputError(f"unknown token {token!r}") from None

    def encode(self, text: str) -> tuple[int, ...]:
        return tuple(self.id(t) for t in text.split())

    def decode(self, ids: Sequence[int], *, skip_eos: bool = True) -> str:
        return " ".join(self.tokens[i] for i in ids if not (skip_eos and i == self.eos_id))

    def check(self, prefix: Sequence[int]) -> tuple[int, ...]:
        """Return ``prefix`` as a tuple, raising on out-of-range ids."""
        prefix = tuple(int(t) for t in prefix)
        V = len(self.tokens)
        for t in prefix:
            if not 0 <= t < V:
                raise InputError(f"token index {t} outside vocabulary of size {V}")
        return prefix


@dataclass(frozen=True, eq=False)
class TokenDistribution:
    """Probability vector over the vocabulary at one decoding step."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.array(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValidationError("probs must be a non-empty vector")
        if not np.all(np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
            raise ValidationError("probs must lie in [0, 1]")
        if abs(p.sum() - 1.0) > DIST_TOL:
            raise ValidationError(f"probs sum to {p.sum()!r}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def normalized(cls, weights: Sequence[float] | np.ndarray) -> TokenDistribution:
        w = np.asarray(weights, dtype=np.float64)
        total = w.sum()
        if not total > 0:
            raise ValidationError("weights must have positive mass")
        return cls(w / total)

    @classmethod
    def one_hot(cls, size: int, index: int) -> TokenDistribution:
        p = np.zeros(size)
        p[index] = 1.0
        return cls(p)

    def __len__(self) -> int:
        return self.probs.size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TokenDistribution):
            return NotImplemented
        return np.array_equal(self.probs, other.probs)

    def __hash__(self) -> int:
        return hash(self.probs.tobytes())


@dataclass(frozen=True)
class StepOutput:
    dist: TokenDistribution
    importance: float | None = None

    def __post_init__(self) -> None:
        if self.importance is not None:
            imp = float(self.importance)
            if not 0.0 <= imp <= 1.0:
                raise ValidationError(f"importance {imp} outside [0, 1]")
            object.__setattr__(self, "importance", imp)


class LanguageModel(Protocol):
    vocab: Vocabulary

    def score_next(self, prefix: Sequence[int]) -> StepOutput: ...


def score_next(model: LanguageModel, prefix: Sequence[int]) -> StepOutput:
    return model.score_next(prefix)


# ---------------------------------------------------------------------------
# Scripted table model


@dataclass(frozen=True)
class ScriptedModel:
    vocab: Vocabulary
    table: dict[tuple[int, ...], StepOutput] = field(default_factory=dict)
    default: StepOutput | None = None

    def __post_init__(self) -> None:
        V = len(self.vocab)
        table = {}
        for prefix, out in self.table.items():
            prefix = self.vocab.check(prefix)
            if not isinstance(out, StepOutput):
                out = StepOutput(out)
            if len(out.dist) != V:
                raise ValidationError(f"distribution for prefix {list(prefix)} has size {len(out.dist)}, expected {V}")
            table[prefix] = out
        object.__setattr__(self, "table", table)
        default = self.default
        if default is None:
            default = StepOutput(TokenDistribution.one_hot(V, self.vocab.eos_id), 1.0)
        elif len(default.dist) != V:
            raise ValidationError("default distribution has the wrong size")
        object.__setattr__(self, "default", default)

    def score_next(self, prefix: Sequence[int]) -> StepOutput:
        prefix = self.vocab.check(prefix)
        return self.table.get(prefix, self.default)


def _parse_probs(value: object, V: int, where: str) -> TokenDistribution:
    if not isinstance(value, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in value):
        raise ParseError(f"{where}: field 'probs' must be a list of numbers")
    if len(value) != V:
        raise ParseError(f"{where}: field 'probs' has {len(value)} entries, expected {V}")
    p = np.asarray(value, dtype=np.float64)
    if np.any(p < 0) or np.any(p > 1):
        raise ValidationError(f"{where}: field 'probs' has entries outside [0, 1]")
    if abs(p.sum() - 1.0) > FILE_TOL:
        raise ValidationError(f"{where}: field 'probs' sums to {p.sum():.12g}, not 1")
    return TokenDistribution(p / p.sum())


def _parse_importance(value: object, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"{where}: field 'importance' must be a number")
    if not 0.0 <= value <= 1.0:
        raise ValidationError(f"{where}: field 'importance' {value} outside [0, 1]")
    return float(value)


def parse_scripted(lines: Iterable[str], source: str = "<string>") -> ScriptedModel:
    """Parse the JSON-lines scripted-model format.

    The first non-blank line is a header object with ``tokens`` and ``eos``
    (and optionally ``default`` probs / ``default_importance``). Every later
    line is one record ``{"prefix": "...", "probs": [...], "importance": x}``.
    """
    header = None
    vocab: Vocabulary | None = None
    table: dict[tuple[int, ...], StepOutput] = {}
    default = None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        where = f"{source}:{lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{where}: invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise ParseError(f"{where}: record must be a JSON object")
        if header is None:
            header = obj
            tokens, eos = obj.get("tokens"), obj.get("eos")
            if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
                raise ParseError(f"{where}: header field 'tokens' must be a list of strings")
            if not isinstance(eos, str):
                raise ParseError(f"{where}: header field 'eos' must be a string")
            try:
                vocab = Vocabulary.from_tokens(tokens, eos)
            except InputError as exc:
                raise ParseError(f"{where}: {exc}") from None
            if "default" in obj:
                default = StepOutput(
                    _parse_probs(obj["default"], len(vocab), where),
                    _parse_importance(obj.get("default_importance", 1.0), where),
                )
            continue
        assert vocab is not None
        unknown = set(obj) - {"prefix", "probs", "importance"}
        if unknown:
            raise ParseError(f"{where}: unknown field(s) {sorted(unknown)}")
        if not isinstance(obj.get("prefix"), str):
            raise ParseError(f"{where}: field 'prefix' must be a string")
        try:
            prefix = vocab.encode(obj["prefix"])
        except InputError as exc:
            raise ParseError(f"{where}: field 'prefix': {exc}") from None
        if prefix in table:
            raise ParseError(f"{where}: duplicate prefix {obj['prefix']!r}")
        if "probs" not in obj:
            raise ParseError(f"{where}: missing field 'probs'")
        dist = _parse_probs(obj["probs"], len(vocab), where)
        table[prefix] = StepOutput(dist, _parse_importance(obj.get("importance", 1.0), where))
    if vocab is None:
        raise ParseError(f"{source}: missing header line")
    return ScriptedModel(vocab, table, default)


def load_scripted(path: str | Path) -> ScriptedModel:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        return parse_scripted(fh, str(path))


def dump_scripted(model: ScriptedModel) -> str:
    vocab = model.vocab
    header: dict[str, object] = {"tokens": list(vocab.tokens), "eos": vocab.eos}
    assert model.default is not None
    header["default"] = model.default.dist.probs.tolist()
    if model.default.importance is not None:
        header["default_importance"] = model.default.importance
    lines = [json.dumps(header)]
    for prefix, out in model.table.items():
        rec: dict[str, object] = {
            "prefix": " ".join(vocab.tokens[t] for t in prefix),
            "probs": out.dist.probs.tolist(),
        }
        if out.importance is not None:
            rec["importance"] = out.importance
        lines.append(json.dumps(rec))
    return "\n".join(lines) + "\n"


def save_scripted(model: ScriptedModel, path: str | Path) -> None:
    Path(path).write_text(dump_scripted(model), encoding="utf-8")


# ---------------------------------------------------------------------------
# n-gram model


@dataclass(frozen=True)
class NGramModel:
    """Add-alpha smoothed n-gram model.

    ``counts`` maps an ``order - 1`` context (ids, ``BOS_ID`` for padding) to
    a ``{token_id: count}`` mapping. Unseen contexts score uniform.
    """

    vocab: Vocabulary
    order: int
    alpha: float
    counts: dict[tuple[int, ...], dict[int, int]]

    def __post_init__(self) -> None:
        if self.order < 1:
            raise InputError("order must be >= 1")
        if not self.alpha > 0:
            raise InputError("alpha must be > 0")
        V = len(self.vocab)
        totals = {}
        for ctx, row in self.counts.items():
            if len(ctx) != self.order - 1:
                raise ValidationError(f"context {ctx} has wrong length for order {self.order}")
            for tok, n in row.items():
                if not 0 <= tok < V or n < 0 or int(n) != n:
                    raise ValidationError(f"bad count entry {tok}:{n} in context {ctx}")
            totals[ctx] = sum(row.values())
        object.__setattr__(self, "_totals", totals)

    def context_of(self, prefix: Sequence[int]) -> tuple[int, ...]:
        n = self.order - 1
        if n == 0:
            return ()
        ctx = tuple(prefix[-n:])
        return (BOS_ID,) * (n - len(ctx)) + ctx

    def score_next(self, prefix: Sequence[int]) -> StepOutput:
        prefix = self.vocab.check(prefix)
        ctx = self.context_of(prefix)
        V = len(self.vocab)
        counts = np.zeros(V)
        for tok, n in self.counts.get(ctx, {}).items():
            counts[tok] = n
        total = self._totals.get(ctx, 0)  # type: ignore[attr-defined]
        probs = (counts + self.alpha) / (total + self.alpha * V)
        return StepOutput(TokenDistribution(probs), 1.0)

    def to_json(self) -> str:
        toks = self.vocab.tokens

        def name(i: int) -> str:
            return BOS if i == BOS_ID else toks[i]

        rows = [
            [[name(i) for i in ctx], {toks[t]: n for t, n in sorted(row.items())}]
            for ctx, row in sorted(self.counts.items())
        ]
        doc = {
            "kind": "ngram",
            "order": self.order,
            "alpha": self.alpha,
            "tokens": list(toks),
            "eos": self.vocab.eos,
            "counts": rows,
        }
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str, source: str = "<string>") -> NGramModel:
        try:
            doc = json.loads(text)
            vocab = Vocabulary.from_tokens(doc["tokens"], doc["eos"])
            counts: dict[tuple[int, ...], dict[int, int]] = {}
            for ctx_names, row in doc["counts"]:
                ctx = tuple(BOS_ID if t == BOS else vocab.id(t) for t in ctx_names)
                counts[ctx] = {vocab.id(t): int(n) for t, n in row.items()}
            return cls(vocab, int(doc["order"]), float(doc["alpha"]), counts)
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise ParseError(f"{source}: malformed n-gram model ({exc})") from None


def train_ngram(
    corpus: Sequence[Sequence[str] | str],
    order: int,
    alpha: float,
    *,
    eos: str = "<eos>",
    append_eos: bool = False,
) -> NGramModel:
    """Count sliding-window n-grams over ``corpus``.

    Each corpus entry is a token list or a whitespace-separated string.
    Contexts near the start of a sentence are left-padded with the reserved
    BOS marker. The vocabulary is the tokens in first-appearance order, with
    ``eos`` appended if it never appears. With ``append_eos`` every sentence
    is terminated by ``eos`` before counting.
    """
    if order < 1:
        raise InputError("order must be >= 1")
    if not alpha > 0:
        raise InputError("alpha must be > 0")
    sentences = [s.split() if isinstance(s, str) else list(s) for s in corpus]
    sentences = [s for s in sentences if s]
    if not sentences:
        raise InputError("corpus is empty")
    if append_eos:
        sentences = [s + [eos] for s in sentences]
    tokens: dict[str, None] = {}
    for s in sentences:
        for t in s:
            tokens.setdefault(t, None)
    tokens.setdefault(eos, None)
    vocab = Vocabulary.from_tokens(tokens, eos)
    counts: dict[tuple[int, ...], dict[int, int]] = {}
    n = order - 1
    for s in sentences:
        ids = [BOS_ID] * n + [vocab.id(t) for t in s]
        for i in range(n, len(ids)):
            row = counts.setdefault(tuple(ids[i - n : i]), {})
            row[ids[i]] = row.get(ids[i], 0) + 1
    return NGramModel(vocab, order, float(alpha), counts)


def load_ngram(path: str | Path) -> NGramModel:
    path = Path(path)
    return NGramModel.from_json(path.read_text(encoding="utf-8"), str(path))


# ---------------------------------------------------------------------------
# attention importance


@dataclass(frozen=True, eq=False)
class ToyAttentionLayer:
    """One causal self-attention head: token embeddings, query and key maps."""

    embed: np.ndarray  # (V, d_model)
    w_q: np.ndarray  # (d_model, d_k)
    w_k: np.ndarray  # (d_model, d_k)

    def __post_init__(self) -> None:
        embed, w_q, w_k = (np.array(a, dtype=np.float64) for a in (self.embed, self.w_q, self.w_k))
        if embed.ndim != 2 or w_q.ndim != 2 or w_k.ndim != 2:
            raise InputError("embed, w_q and w_k must be matrices")
        if w_q.shape != w_k.shape or w_q.shape[0] != embed.shape[1] or w_q.shape[1] < 1:
            raise InputError(f"inconsistent shapes embed={embed.shape} w_q={w_q.shape} w_k={w_k.shape}")
        for name, a in (("embed", embed), ("w_q", w_q), ("w_k", w_k)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def d_k(self) -> int:
        return self.w_k.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]


def attention_matrix(layer: ToyAttentionLayer, prefix: Sequence[int]) -> np.ndarray:
    """Causal attention weights ``softmax(mask(Q K^T / sqrt(d_k)))``."""
    if len(prefix) == 0:
        raise InputError("attention needs a non-empty prefix")
    ids = np.asarray(prefix, dtype=np.int64)
    if ids.min() < 0 or ids.max() >= layer.vocab_size:
        raise InputError("token index outside the layer's embedding table")
    x = layer.embed[ids]
    scores = (x @ layer.w_q) @ (x @ layer.w_k).T / math.sqrt(layer.d_k)
    T = len(ids)
    future = np.triu(np.ones((T, T), dtype=bool), k=1)
    scores[future] = -np.inf
    scores -= scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    return w / w.sum(axis=1, keepdims=True)


def importance_score(attention_row: Sequence[float] | np.ndarray) -> float:
    """Largest attention weight from the last position of ``attention_row`` to an earlier one.

    ``attention_row`` holds the weights of position ``t`` over positions
    ``0..t``; the self weight (last entry) is excluded.
    """
    row = np.asarray(attention_row, dtype=np.float64)
    if row.size < 2:
        raise UndefinedImportanceError("first position has no predecessor")
    return float(row[:-1].max())


@dataclass(frozen=True)
class AttentionImportanceModel:
    """Distribution from ``base``; importance from ``layer``.

    Importance is evaluated for the argmax token of the step distribution:
    that token is appended to the prefix and the last attention row is read.
    With an empty prefix there is no predecessor and importance is absent.
    """

    base: LanguageModel
    layer: ToyAttentionLayer

    def __post_init__(self) -> None:
        if self.layer.vocab_size != len(self.base.vocab):
            raise InputError("attention layer and base model disagree on vocabulary size")

    @property
    def vocab(self) -> Vocabulary:
        return self.base.vocab

    def score_next(self, prefix: Sequence[int]) -> StepOutput:
        dist = self.base.score_next(prefix).dist
        if len(prefix) == 0:
            return StepOutput(dist, None)
        top = int(np.argmax(dist.probs))
        A = attention_matrix(self.layer, [*prefix, top])
        return StepOutput(dist, importance_score(A[-1]))


def load_model(kind: str, path: str | Path) -> LanguageModel:
    if kind == "scripted":
        return load_scripted(path)
    if kind == "ngram":
        return load_ngram(path)
    raise InputError(f"unknown model kind {kind!r} (expected 'scripted' or 'ngram')")
