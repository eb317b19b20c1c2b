"""Overlapping ordinal groups, group distance and the dynamic ranking margin."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError

STRATEGIES = ("overlap-3", "overlap-5", "overlap-7", "strict-5")

# reference five-group layout over [-3, 3]
_OVERLAP5 = ((-3.0, -1.5), (-2.0, 0.0), (-0.5, 0.5), (0.0, 2.0), (1.5, 3.0))
_STRICT5 = ((-3.0, -1.8), (-1.8, -0.6), (-0.6, 0.6), (0.6, 1.8), (1.8, 3.0))


@dataclass(frozen=True)
class GroupSpec:
    strategy: str
    intervals: tuple[tuple[float, float], ...]
    S: float = 3.0

    def __post_init__(self):
        if not self.intervals:
            raise ConfigError("GroupSpec needs at least one interval")
        los = [lo for lo, _ in self.intervals]
        if los != sorted(los):
            raise ConfigError("GroupSpec intervals must be sorted by lower bound")
        if any(lo > hi for lo, hi in self.intervals):
            raise ConfigError("GroupSpec interval with lo > hi")

    @property
    def K(self) -> int:
        return len(self.intervals)

    @classmethod
    def build(cls, strategy: str = "overlap-5", S: float = 3.0,
              intervals: Sequence[Sequence[float]] | None = None) -> "GroupSpec":
        if intervals is not None:
            return cls(strategy, tuple((float(lo), float(hi)) for lo, hi in intervals), S)
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown group strategy {strategy!r}; expected one of {STRATEGIES}")
        scale = S / 3.0
        if strategy == "overlap-5":
            ivs = tuple((lo * scale, hi * scale) for lo, hi in _OVERLAP5)
        elif strategy == "strict-5":
            ivs = tuple((lo * scale, hi * scale) for lo, hi in _STRICT5)
        else:
            ivs = _widened_bins(int(strategy.split("-")[1]), S)
        return cls(strategy, ivs, S)

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "intervals": [list(iv) for iv in self.intervals]}


def _widened_bins(k: int, S: float) -> tuple[tuple[float, float], ...]:
    """K equal bins over [-S, S]; interior bins widened by a quarter width per side."""
    width = 2.0 * S / k
    pad = 0.25 * width
    out = []
    for g in range(k):
        lo = -S + g * width
        hi = S if g == k - 1 else -S + (g + 1) * width
        if 0 < g < k - 1:
            lo, hi = lo - pad, hi + pad
        out.append((lo, hi))
    return tuple(out)


@dataclass(frozen=True)
class MarginParams:
    m_intra: float = 0.1
    m_base: float = 0.5
    m_step: float = 0.1

    def __post_init__(self):
        if min(self.m_intra, self.m_base, self.m_step) < 0:
            raise ConfigError("margins must be non-negative")
        if self.m_base < self.m_intra:
            raise ConfigError("m_base must be >= m_intra")


_TOL = 1e-12


def assign_groups(s: float, spec: GroupSpec) -> frozenset[int]:
    """Ids of every closed interval containing ``s``."""
    if not (-spec.S - _TOL <= s <= spec.S + _TOL):
        raise DataError(f"score {s} outside [-{spec.S}, {spec.S}]")
    found = frozenset(g for g, (lo, hi) in enumerate(spec.intervals) if lo <= s <= hi)
    if not found:
        raise DataError(f"score {s} is not covered by any group of {spec.strategy}")
    return found


def group_distance(s_i: float, s_j: float, spec: GroupSpec) -> int:
    gi, gj = assign_groups(s_i, spec), assign_groups(s_j, spec)
    # sharing any group overrides the max-distance rule
    if gi & gj:
        return 0
    return max(abs(a - b) for a in gi for b in gj)


def dynamic_margin(delta_g: int, mp: MarginParams) -> float:
    if delta_g < 0:
        raise ValueError("group distance must be non-negative")
    if delta_g == 0:
        return mp.m_intra
    return mp.m_base + delta_g * mp.m_step


def membership(scores, spec: GroupSpec):
    """Boolean [N, K] matrix of closed-interval membership."""
    s = np.asarray(scores, dtype=np.float64)
    if np.any(np.abs(s) > spec.S + _TOL):
        raise DataError(f"score outside [-{spec.S}, {spec.S}]")
    lo = np.array([iv[0] for iv in spec.intervals])
    hi = np.array([iv[1] for iv in spec.intervals])
    m = (s[:, None] >= lo[None, :]) & (s[:, None] <= hi[None, :])
    if not m.any(axis=1).all():
        raise DataError(f"a score is not covered by any group of {spec.strategy}")
    return m


def pair_distances(s_i, s_j, spec: GroupSpec):
    """Vectorised :func:`group_distance` over aligned score arrays."""
    mi, mj = membership(s_i, spec), membership(s_j, spec)
    ids = np.arange(spec.K)
    big = spec.K + 1
    max_i = np.where(mi, ids, -1).max(axis=1)
    min_i = np.where(mi, ids, big).min(axis=1)
    max_j = np.where(mj, ids, -1).max(axis=1)
    min_j = np.where(mj, ids, big).min(axis=1)
    far = np.maximum(max_i - min_j, max_j - min_i)
    return np.where((mi & mj).any(axis=1), 0, far).astype(np.int64)


def pair_margins(s_i, s_j, spec: GroupSpec, mp: MarginParams):
    dg = pair_distances(s_i, s_j, spec)
    return np.where(dg == 0, mp.m_intra, mp.m_base + dg * mp.m_step), dg
