"""Shared value types: token distributions and per-position layer outputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TokenId = int

PROB_SUM_TOL = 1e-9


class InvariantViolation(AssertionError):
    """A runtime contract was broken (losslessness, replay mismatch, ...)."""


def sample_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Draw an index from a probability vector via inverse CDF."""
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return min(idx, len(probs) - 1)


@dataclass(frozen=True, eq=False)
class Distribution:
    """A next-token distribution over a vocabulary of size V.

    Entries must be non-negative and sum to 1 within ``PROB_SUM_TOL``.
    """

    probs: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.probs, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 2:
            raise ValueError("probs must be a 1-d vector with at least 2 entries")
        if np.any(arr < 0):
            raise ValueError("probs must be non-negative")
        if abs(float(arr.sum()) - 1.0) > PROB_SUM_TOL:
            raise ValueError(f"probs must sum to 1 within {PROB_SUM_TOL}, got {arr.sum()!r}")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "probs", arr)

    @property
    def vocab_size(self) -> int:
        return int(self.probs.size)

    @property
    def argmax(self) -> TokenId:
        # np.argmax returns the first maximum, i.e. the lowest TokenId on ties
        return int(np.argmax(self.probs))

    @property
    def top1(self) -> float:
        return float(self.probs.max())

    def sample(self, rng: np.random.Generator) -> TokenId:
        return sample_index(self.probs, rng)


@dataclass(frozen=True, eq=False)
class LayerStep:
    """LM-head outputs of every layer at one decoding position.

    ``probs[ell - 1]`` is the next-token distribution obtained by reading the
    LM-head after layer ``ell``; the last row is the full model's (target)
    distribution.
    """

    probs: np.ndarray  # shape (L, V)

    def __post_init__(self) -> None:
        arr = self.probs
        if not (
            isinstance(arr, np.ndarray)
            and arr.dtype == np.float64
            and not arr.flags.writeable
        ):
            arr = np.asarray(arr, dtype=np.float64).copy()
            arr.flags.writeable = False
        if arr.ndim != 2:
            raise ValueError("LayerStep.probs must have shape (L, V)")
        object.__setattr__(self, "probs", arr)

    @property
    def layer_count(self) -> int:
        return int(self.probs.shape[0])

    @property
    def vocab_size(self) -> int:
        return int(self.probs.shape[1])

    @property
    def per_layer(self) -> tuple[Distribution, ...]:
        return tuple(Distribution(row) for row in self.probs)

    def layer(self, ell: int) -> Distribution:
        if not 1 <= ell <= self.layer_count:
            raise ValueError(f"layer index {ell} out of [1, {self.layer_count}]")
        return Distribution(self.probs[ell - 1])
