"""Bit-group messages, belief matrices, and threshold-decoding primitives.

A length-K message is split into Q groups of m = K/Q bits; each group is one
of 2^m patterns. The receiver tracks one probability vector ("belief") per
group and freezes a group once its largest belief crosses a threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigurationError

__all__ = [
    "BitGroupBlock",
    "BeliefMatrix",
    "DecodeMask",
    "partition_bits",
    "group_to_index",
    "index_to_group",
    "uniform_beliefs",
    "hard_decision",
    "initial_mask",
    "update_mask",
]

BELIEF_SUM_TOL = 1e-6


def group_to_index(group: NDArray[np.integer]) -> int:
    """Map an m-bit group to its pattern index, first bit most significant.

    [1, 0, 1] -> 5.
    """
    g = np.asarray(group)
    if g.ndim != 1 or g.size == 0:
        raise ConfigurationError(f"group must be a non-empty 1-D bit vector, got shape {g.shape}")
    if not np.isin(g, (0, 1)).all():
        raise ConfigurationError(f"group bits must be 0/1, got {g.tolist()}")
    idx = 0
    for b in g:
        idx = (idx << 1) | int(b)
    return idx


def index_to_group(index: int, m: int) -> NDArray[np.uint8]:
    """Inverse of :func:`group_to_index`: pattern index -> m-bit vector."""
    if m < 1:
        raise ConfigurationError(f"m must be >= 1, got {m}")
    if not 0 <= index < 2**m:
        raise ConfigurationError(f"pattern index {index} out of range for m={m}")
    return np.array([(index >> (m - 1 - k)) & 1 for k in range(m)], dtype=np.uint8)


@dataclass(frozen=True)
class BitGroupBlock:
    """A K-bit message partitioned into Q groups of m bits.

    bits
        Flat message, shape (K,), values in {0, 1}.
    groups
        Row q holds group q's bits, shape (Q, m).
    pattern_indices
        Integer pattern per group, shape (Q,), big-endian within the group.
    """

    bits: NDArray[np.uint8]
    Q: int
    m: int
    groups: NDArray[np.uint8]
    pattern_indices: NDArray[np.int64]

    @property
    def K(self) -> int:
        return self.Q * self.m

    @property
    def n_patterns(self) -> int:
        return 2**self.m


def partition_bits(bits: NDArray[np.integer], Q: int) -> BitGroupBlock:
    """Split a K-bit vector into Q equal groups (K must be divisible by Q)."""
    b = np.asarray(bits)
    if b.ndim != 1:
        raise ConfigurationError(f"bits must be 1-D, got shape {b.shape}")
    if Q < 1:
        raise ConfigurationError(f"Q must be >= 1, got {Q}")
    if b.size == 0 or b.size % Q != 0:
        raise ConfigurationError(f"cannot split K={b.size} bits into Q={Q} equal groups")
    if not np.isin(b, (0, 1)).all():
        raise ConfigurationError("bits must be 0/1")
    b = b.astype(np.uint8)
    m = b.size // Q
    groups = b.reshape(Q, m)
    # Big-endian within each group, vectorized dot with [2^(m-1), ..., 1].
    weights = (1 << np.arange(m - 1, -1, -1)).astype(np.int64)
    idx = groups.astype(np.int64) @ weights
    return BitGroupBlock(bits=b, Q=Q, m=m, groups=groups, pattern_indices=idx)


@dataclass(frozen=True)
class BeliefMatrix:
    """Receiver beliefs: one probability vector of length 2^m per group.

    ``columns[q]`` is group q's belief vector. Vectors must be non-negative
    and sum to 1 within ``BELIEF_SUM_TOL``; offending inputs are rejected
    rather than renormalized so decoder bugs surface instead of hiding.
    """

    columns: NDArray[np.floating]

    def __post_init__(self) -> None:
        cols = np.asarray(self.columns, dtype=np.float64)
        if cols.ndim != 2 or cols.shape[1] < 2:
            raise ConfigurationError(f"belief matrix must be (Q, 2^m) with 2^m >= 2, got {cols.shape}")
        n_pat = cols.shape[1]
        if n_pat & (n_pat - 1):
            raise ConfigurationError(f"belief row length {n_pat} is not a power of two")
        if not np.isfinite(cols).all():
            raise ConfigurationError("belief matrix contains non-finite entries")
        if (cols < 0).any():
            raise ConfigurationError("belief matrix contains negative entries")
        sums = cols.sum(axis=1)
        bad = np.abs(sums - 1.0) > BELIEF_SUM_TOL
        if bad.any():
            q = int(np.argmax(bad))
            raise ConfigurationError(
                f"belief column {q} sums to {sums[q]:.12g}, outside 1 +/- {BELIEF_SUM_TOL}"
            )
        object.__setattr__(self, "columns", cols)

    @property
    def Q(self) -> int:
        return self.columns.shape[0]

    @property
    def m(self) -> int:
        return int(self.columns.shape[1]).bit_length() - 1

    def peak(self) -> NDArray[np.float64]:
        """Per-group max-norm ||p_q||_inf, shape (Q,)."""
        return self.columns.max(axis=1)


def uniform_beliefs(Q: int, m: int) -> BeliefMatrix:
    """The all-uniform prior: every pattern at 1/2^m."""
    return BeliefMatrix(np.full((Q, 2**m), 1.0 / 2**m))


def hard_decision(beliefs: BeliefMatrix) -> NDArray[np.uint8]:
    """Most-likely pattern per group, concatenated back into K bits.

    Ties break toward the lowest pattern index (np.argmax convention).
    """
    m = beliefs.m
    idx = np.argmax(beliefs.columns, axis=1)
    return np.concatenate([index_to_group(int(i), m) for i in idx])


@dataclass(frozen=True)
class DecodeMask:
    """Which groups are still undecoded (True) entering round ``round``."""

    flags: NDArray[np.bool_]
    round: int

    def __post_init__(self) -> None:
        flags = np.asarray(self.flags, dtype=bool)
        if flags.ndim != 1:
            raise ConfigurationError(f"mask flags must be 1-D, got shape {flags.shape}")
        if self.round < 1:
            raise ConfigurationError(f"round must be >= 1, got {self.round}")
        object.__setattr__(self, "flags", flags)

    @property
    def n_active(self) -> int:
        return int(self.flags.sum())


def initial_mask(Q: int) -> DecodeMask:
    """All groups undecoded, entering round 1."""
    return DecodeMask(flags=np.ones(Q, dtype=bool), round=1)


def validate_threshold(gamma: float, m: int) -> float:
    """Check a freeze threshold lies in (2^-m, 1)."""
    lo = 1.0 / 2**m
    if not lo < gamma < 1.0:
        raise ConfigurationError(f"threshold {gamma} outside ({lo}, 1) for m={m}")
    return float(gamma)


def update_mask(prev: DecodeMask, beliefs: BeliefMatrix, gamma: float) -> DecodeMask:
    """Freeze every active group whose peak belief reached ``gamma``.

    Frozen groups stay frozen (monotone): the returned flags are the AND of
    the previous flags with the below-threshold condition. The round counter
    advances by one.
    """
    if beliefs.Q != prev.flags.size:
        raise ConfigurationError(
            f"mask has {prev.flags.size} groups but beliefs have {beliefs.Q}"
        )
    validate_threshold(gamma, beliefs.m)
    still_open = beliefs.peak() < gamma
    return DecodeMask(flags=prev.flags & still_open, round=prev.round + 1)
