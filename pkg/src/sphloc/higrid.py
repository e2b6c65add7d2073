"""Entropy-guided hierarchical grid refinement of SRPD maps.

The map starts from the 12 base HEALPix pixels.  Level by level, every leaf
on the current frontier is visited in a seeded random order; its four
children are evaluated and the split is kept only when it lowers the spatial
entropy.  By default the entropy is taken over the frontier nodes still
waiting to be visited (the visited node included), so the decision for a
node compares it against the remaining candidates of its own level.  Leaves
that are not split stay in the map at their coarser level and are not
visited again.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import healpix as hp
from .healpix import HealpixNode
from .sph import ShdFrame
from .srpd import CrossDensityCache, steering_vector


class DegenerateMapError(ValueError):
    """All SRPD values are zero, so the entropy is undefined."""


@dataclass(frozen=True)
class RefinementPolicy:
    max_level: int = 3
    seed: int = 0
    start_level: int = 0
    # "frontier": entropy over the unvisited nodes of the current level;
    # "partition": entropy over every leaf of the map
    entropy_scope: str = "frontier"

    def __post_init__(self):
        if self.entropy_scope not in ("frontier", "partition"):
            raise ValueError(f"unknown entropy scope {self.entropy_scope!r}")
        if self.max_level < 1:
            raise ValueError("max_level must be at least 1")
        if not 0 <= self.start_level < self.max_level:
            raise ValueError("start_level must lie below max_level")


@dataclass
class SrpdMap:
    """Leaves of a refined quadtree with their SRPD values."""

    levels: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    max_level: int
    evaluations: int = 0
    bin: tuple | None = None
    silent: bool = False
    # leaf count after each refinement level, starting with the initial grid
    history: list = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.values.size)

    @property
    def areas(self) -> np.ndarray:
        return 4 * np.pi / (12.0 * 4.0 ** self.levels)

    def nodes(self) -> list:
        return [HealpixNode(int(l), int(i)) for l, i in zip(self.levels, self.indices)]

    def to_records(self) -> list:
        return [{"level": int(l), "index": int(i), "value": float(v)}
                for l, i, v in zip(self.levels, self.indices, self.values)]

    @classmethod
    def from_records(cls, records, max_level: int | None = None, **kw) -> "SrpdMap":
        lv = np.array([r["level"] for r in records], dtype=np.int64)
        ix = np.array([r["index"] for r in records], dtype=np.int64)
        va = np.array([r["value"] for r in records], dtype=float)
        return cls(lv, ix, va, int(lv.max()) if max_level is None else max_level, **kw)

    @classmethod
    def uniform(cls, level: int, values) -> "SrpdMap":
        n = hp.npix(level)
        values = np.broadcast_to(np.asarray(values, dtype=float), (n,)).copy()
        return cls(np.full(n, level, dtype=np.int64), np.arange(n, dtype=np.int64), values, level)


def _plogp(p, area):
    """p * log(p / area) with the 0 log 0 = 0 convention."""
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(p > 0, p * np.log(p / area), 0.0)
    return out


def spatial_entropy(values, areas) -> float:
    """H = -sum gamma_i log(gamma_i / A_i), gamma_i = P_i / sum_j P_j.

    This is a differential entropy and can be negative.
    """
    v = np.clip(np.asarray(values, dtype=float), 0.0, None)
    z = v.sum()
    if not z > 0:
        raise DegenerateMapError("spatial entropy of an all-zero map is undefined")
    g = v / z
    return float(-np.sum(_plogp(g, np.asarray(areas, dtype=float))))


class _EntropyState:
    """Running sums Z = sum P and F = sum P log(P/A); H = log Z - F / Z."""

    __slots__ = ("z", "f")

    def __init__(self, values, areas):
        v = np.clip(np.asarray(values, dtype=float), 0.0, None)
        self.z = float(v.sum())
        self.f = float(np.sum(_plogp(v, np.asarray(areas, dtype=float))))

    @staticmethod
    def entropy(z: float, f: float) -> float:
        if not z > 0:
            raise DegenerateMapError("spatial entropy of an all-zero map is undefined")
        return math.log(z) - f / z

    @property
    def h(self) -> float:
        return self.entropy(self.z, self.f)

    def after_split(self, value: float, area: float, child_values) -> tuple:
        cv = np.clip(np.asarray(child_values, dtype=float), 0.0, None)
        value = max(value, 0.0)
        z = self.z - value + float(cv.sum())
        f = self.f - float(_plogp(value, area)) + float(np.sum(_plogp(cv, area / 4)))
        return z, f


def info_gain(values, areas, leaf: int, child_values) -> float:
    """Entropy drop from replacing leaf `leaf` by four children (full recomputation)."""
    values = np.asarray(values, dtype=float)
    areas = np.asarray(areas, dtype=float)
    before = spatial_entropy(values, areas)
    v2 = np.r_[np.delete(values, leaf), np.asarray(child_values, dtype=float)]
    a2 = np.r_[np.delete(areas, leaf), np.full(4, areas[leaf] / 4)]
    return before - spatial_entropy(v2, a2)


def info_gain_incremental(values, areas, leaf: int, child_values) -> float:
    """Same as :func:`info_gain` via the running-sum identity (O(1) per candidate)."""
    st = _EntropyState(values, areas)
    z, f = st.after_split(float(values[leaf]), float(areas[leaf]), child_values)
    return st.h - _EntropyState.entropy(z, f)


def higrid_run(frame: ShdFrame, cache: CrossDensityCache, policy: RefinementPolicy = RefinementPolicy(),
               r_a: float = 0.042, bin_id: tuple | None = None) -> SrpdMap:
    """Build a multiresolution SRPD map for one time-frequency bin."""
    if policy.max_level > cache.max_level:
        raise ValueError(f"cache covers levels up to {cache.max_level}, policy needs {policy.max_level}")
    sv = steering_vector(frame, r_a)
    return refine(sv, cache, policy, bin_id=bin_id)


def refine(sv: np.ndarray, cache: CrossDensityCache, policy: RefinementPolicy,
           bin_id: tuple | None = None) -> SrpdMap:
    """Run the refinement on an already equalized steering vector."""
    rng = np.random.default_rng(policy.seed)
    l0 = policy.start_level
    n0 = hp.npix(l0)
    init = np.clip(cache.evaluate(sv, l0, np.arange(n0)), 0.0, None)
    evaluations = n0
    # leaves keyed by (level, index)
    leaves = {(l0, i): float(v) for i, v in enumerate(init)}
    if not init.sum() > 0:
        return SrpdMap(np.full(n0, l0, dtype=np.int64), np.arange(n0, dtype=np.int64), init,
                       policy.max_level, evaluations, bin_id, silent=True, history=[n0])

    partition = policy.entropy_scope == "partition"
    if partition:
        state = _EntropyState(init, hp.pix_area(l0))
    history = [len(leaves)]
    for level in range(l0, policy.max_level):
        frontier = [key for key in leaves if key[0] == level]
        area = hp.pix_area(level)
        if not partition:
            # entropy of the not-yet-visited frontier set
            state = _EntropyState([leaves[k] for k in frontier], area)
        for j in rng.permutation(len(frontier)):
            key = frontier[j]
            idx = key[1]
            value = leaves[key]
            kids = np.clip(cache.evaluate(sv, level + 1, np.arange(4 * idx, 4 * idx + 4)), 0.0, None)
            evaluations += 4
            z, f = state.after_split(value, area, kids)
            accept = state.z > 0 and z > 0 and _EntropyState.entropy(z, f) < state.h
            if accept:
                del leaves[key]
                for c in range(4):
                    leaves[(level + 1, 4 * idx + c)] = float(kids[c])
            if partition:
                if accept:
                    state.z, state.f = z, f
            else:
                state.z -= value
                state.f -= float(_plogp(value, area))
        history.append(len(leaves))

    keys = sorted(leaves)
    return SrpdMap(np.array([k[0] for k in keys], dtype=np.int64),
                   np.array([k[1] for k in keys], dtype=np.int64),
                   np.array([leaves[k] for k in keys]),
                   policy.max_level, evaluations, bin_id, history=history)


def full_grid(frame: ShdFrame, cache: CrossDensityCache, level: int, r_a: float = 0.042) -> SrpdMap:
    """SRPD at every pixel of one level (the non-adaptive reference)."""
    sv = steering_vector(frame, r_a)
    n = hp.npix(level)
    vals = np.clip(cache.evaluate(sv, level, np.arange(n)), 0.0, None)
    return SrpdMap(np.full(n, level, dtype=np.int64), np.arange(n, dtype=np.int64), vals,
                   level, evaluations=n, history=[n])
