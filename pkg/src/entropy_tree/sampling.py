"""Token selection primitives: entropy, greedy, top-k, top-p, temperature, sampling.

Ties in probability are always broken toward the lower token id. Combined
truncation is applied in the fixed order top-k, top-p, temperature.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import InputError
from .model import TokenDistribution

Strategy = Literal["greedy", "top_k", "top_p", "top_k_then_top_p"]
STRATEGIES = ("greedy", "top_k", "top_p", "top_k_then_top_p")


@dataclass(frozen=True)
class SamplerConfig:
    strategy: Strategy = "top_k_then_top_p"
    k: int | None = None  # None means the full vocabulary
    p: float = 1.0
    temperature: float = 1.0

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise InputError(f"unknown sampling strategy {self.strategy!r}")
        if self.k is not None and self.k < 1:
            raise InputError("k must be positive")
        if not 0.0 < self.p <= 1.0:
            raise InputError("p must lie in (0, 1]")
        if not self.temperature > 0:
            raise InputError("temperature must be > 0")


def token_entropy(dist: TokenDistribution) -> float:
    """Shannon entropy in nats, with 0 ln 0 = 0."""
    p = dist.probs[dist.probs > 0]
    return float(max(0.0, -np.dot(p, np.log(p))))


def descending_order(probs: np.ndarray) -> np.ndarray:
    """Token ids sorted by decreasing probability, ties by increasing id."""
    return np.lexsort((np.arange(probs.size), -probs))


def greedy_select(dist: TokenDistribution) -> int:
    return int(np.argmax(dist.probs))


def _keep(probs: np.ndarray, keep: np.ndarray) -> TokenDistribution:
    out = np.zeros_like(probs)
    out[keep] = probs[keep]
    return TokenDistribution(out / out.sum())


def truncate_top_k(dist: TokenDistribution, k: int) -> TokenDistribution:
    V = len(dist)
    if not 1 <= k <= V:
        raise InputError(f"k={k} outside [1, {V}]")
    if k == V:
        return dist
    return _keep(dist.probs, descending_order(dist.probs)[:k])


def truncate_top_p(dist: TokenDistribution, p: float) -> TokenDistribution:
    """Keep the smallest descending-probability prefix whose mass reaches ``p``."""
    if not 0.0 < p <= 1.0:
        raise InputError(f"p={p} outside (0, 1]")
    if p == 1.0:
        return dist
    order = descending_order(dist.probs)
    cum = np.cumsum(dist.probs[order])
    # slack absorbs cumsum rounding when the mass hits p exactly
    m = int(np.searchsorted(cum, p - 1e-12, side="left")) + 1
    return _keep(dist.probs, order[: min(m, order.size)])


def apply_temperature(dist: TokenDistribution, temperature: float) -> TokenDistribution:
    if not temperature > 0:
        raise InputError("temperature must be > 0")
    if temperature == 1.0:
        return dist
    probs = dist.probs
    out = np.zeros_like(probs)
    nz = probs > 0
    # log-space keeps p ** (1/T) from underflowing for small T
    logits = np.log(probs[nz]) / temperature
    w = np.exp(logits - logits.max())
    out[nz] = w / w.sum()
    return TokenDistribution(out)


def sampling_distribution(dist: TokenDistribution, config: SamplerConfig) -> TokenDistribution:
    """The distribution actually sampled from under ``config`` (non-greedy strategies)."""
    if config.strategy in ("top_k", "top_k_then_top_p") and config.k is not None:
        dist = truncate_top_k(dist, min(config.k, len(dist)))
    if config.strategy in ("top_p", "top_k_then_top_p"):
        dist = truncate_top_p(dist, config.p)
    return apply_temperature(dist, config.temperature)


def sample(dist: TokenDistribution, rng: np.random.Generator) -> int:
    """Inverse-CDF draw; consumes exactly one uniform from ``rng``."""
    u = rng.random()
    cum = np.cumsum(dist.probs)
    i = int(np.searchsorted(cum, u * cum[-1], side="right"))
    i = min(i, cum.size - 1)
    # never return a zero-probability token because of rounding at the top end
    while dist.probs[i] == 0.0:
        i -= 1
    return i


def select_token(dist: TokenDistribution, config: SamplerConfig, rng: np.random.Generator) -> int:
    if config.strategy == "greedy":
        return greedy_select(dist)
    return sample(sampling_distribution(dist, config), rng)


def derive_seed(*parts: object) -> int:
    """Stable 64-bit seed from an arbitrary tuple of ints/strings."""
    norm = tuple(int(x) if isinstance(x, (int, np.integer)) else str(x) for x in parts)
    h = hashlib.blake2b(repr(norm).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def make_rng(*parts: object) -> np.random.Generator:
    """PCG64 generator seeded by :func:`derive_seed` of ``parts``."""
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))
