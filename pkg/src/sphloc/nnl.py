"""Neighbouring-nodes labelling of SRPD maps.

Leaves below the map mean are discarded, and the surviving leaves at the
finest level are grouped into clusters of pixels connected through the
HEALPix neighbour relation (which wraps in azimuth and across the poles).
Each cluster yields one local DOA estimate, its centroid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import healpix as hp
from .healpix import HealpixNode
from .higrid import SrpdMap


@dataclass(frozen=True)
class Cluster:
    members: tuple  # HealpixNode, all at one level
    centroid: np.ndarray
    mass: float

    @property
    def size(self) -> int:
        return len(self.members)


def threshold(srpd_map: SrpdMap) -> float:
    """Mean SRPD over all leaves, whatever their level."""
    if len(srpd_map) == 0:
        raise ValueError("threshold of an empty map")
    return float(np.mean(srpd_map.values))


def surviving_leaves(srpd_map: SrpdMap) -> tuple:
    """Indices and values of finest-level leaves with value >= threshold."""
    thr = threshold(srpd_map)
    keep = (srpd_map.values >= thr) & (srpd_map.levels == srpd_map.max_level)
    return srpd_map.indices[keep], srpd_map.values[keep]


def label_components(level: int, indices) -> list:
    """Connected components of a pixel set under the neighbour relation.

    Grown breadth-first from the lowest unlabelled index, so the result is
    deterministic; components are returned as sorted index arrays.
    """
    indices = np.asarray(indices, dtype=np.int64)
    table = hp.neighbor_table(level)
    remaining = set(indices.tolist())
    out = []
    for start in sorted(remaining):
        if start not in remaining:
            continue
        remaining.discard(start)
        comp, frontier = [start], [start]
        while frontier:
            nb = table[frontier].ravel()
            new = [j for j in set(nb[nb >= 0].tolist()) if j in remaining]
            remaining.difference_update(new)
            comp.extend(new)
            frontier = new
        out.append(np.array(sorted(comp), dtype=np.int64))
    return out


def centroid(level: int, indices, weights=None) -> np.ndarray:
    """Normalized (optionally weighted) mean of pixel-centre unit vectors."""
    vecs = hp.pix_center_vec(level, np.asarray(indices, dtype=np.int64))
    if weights is None:
        s = vecs.sum(axis=0)
    else:
        w = np.asarray(weights, dtype=float)
        if not np.any(w > 0):
            raise ValueError("cluster has zero total weight")
        s = w @ vecs
    norm = np.linalg.norm(s)
    if norm == 0:
        raise ValueError("centroid of an antipodally balanced cluster is undefined")
    return s / norm


def nnl_label(srpd_map: SrpdMap, weighted: bool = True, min_size: int = 1) -> list:
    """Threshold the map and label the surviving finest-level leaves.

    Clusters smaller than `min_size` pixels are dropped.  The result is ordered
    by decreasing mass.
    """
    level = srpd_map.max_level
    idx, vals = surviving_leaves(srpd_map)
    if idx.size == 0:
        return []
    lookup = dict(zip(idx.tolist(), vals.tolist()))
    clusters = []
    for comp in label_components(level, idx):
        if comp.size < min_size:
            continue
        w = np.array([lookup[i] for i in comp.tolist()])
        c = centroid(level, comp, w if weighted else None)
        clusters.append(Cluster(tuple(HealpixNode(level, int(i)) for i in comp), c, float(w.sum())))
    clusters.sort(key=lambda c: (-c.mass, c.members[0].index))
    return clusters
