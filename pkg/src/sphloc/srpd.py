"""Steered response power density over HEALPix pixels.

For a pixel S_i of area A_i the cross spatial density matrix is

    Q_i[a, b] = 1 / ((4 pi)^2 A_i) * integral_{S_i} Y_a conj(Y_b) dS

and the SRPD of a bin with equalized coefficients p (see
:func:`steering_vector`) is the pixel average of |y_N|^2:

    P_i = (4 pi)^2 * p^H Q_i^T p = (4 pi)^2 * sum_m lambda_m |v_m^H p|^2

with (lambda_m, v_m) the eigenpairs of Q_i^T.  Only the leading eigenpairs
whose squared-eigenvalue energy reaches ``threshold`` are kept.

The surface integral is evaluated by equal-weight summation over the centres
of the descendant pixels ``sub_depth`` levels below.  Because HEALPix is equal
area and nested, the quadrature of a parent is exactly the mean of the
quadratures of its four children when both use the same absolute level.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import healpix as hp
from .healpix import HealpixNode
from .sph import ShdFrame, n_coeffs, pwd_weights, sh_matrix

ENERGY_THRESHOLD = 0.99
DEFAULT_SUB_DEPTH = 4
_FOUR_PI_SQ = (4 * math.pi) ** 2


@dataclass(frozen=True)
class CrossDensity:
    node: HealpixNode
    Q: np.ndarray
    eigvals: np.ndarray  # descending
    eigvecs: np.ndarray  # columns, eigenvectors of Q^T
    n_keep: int
    threshold: float = ENERGY_THRESHOLD

    @property
    def order(self) -> int:
        return int(round(math.sqrt(self.Q.shape[0]))) - 1

    def energy_ratio(self, m: int | None = None) -> float:
        lam2 = self.eigvals ** 2
        m = self.n_keep if m is None else m
        return float(lam2[:m].sum() / lam2.sum())


def _n_keep(eigvals: np.ndarray, threshold: float) -> np.ndarray:
    """Smallest M with sum_{m<M} lambda^2 / sum lambda^2 >= threshold (row-wise)."""
    lam2 = np.atleast_2d(eigvals) ** 2
    ratio = np.cumsum(lam2, axis=-1) / lam2.sum(axis=-1, keepdims=True)
    # guard against round-off leaving the last ratio a hair under 1
    ratio[:, -1] = 1.0
    return np.argmax(ratio >= threshold - 1e-15, axis=-1) + 1


def _eig_desc(Q: np.ndarray):
    lam, V = np.linalg.eigh(np.swapaxes(Q, -1, -2))
    return lam[..., ::-1], V[..., ::-1]


def _gram(order: int, theta: np.ndarray, phi: np.ndarray, n_pix: int) -> np.ndarray:
    """Q matrices of n_pix pixels whose quadrature points are given contiguously."""
    Y = sh_matrix(order, theta, phi).reshape(n_pix, -1, n_coeffs(order))
    k = Y.shape[1]
    return np.einsum("pka,pkb->pab", Y, Y.conj()) / (k * _FOUR_PI_SQ)


def quadrature_points(node: HealpixNode, sub_depth: int):
    idx = hp.descendants(node.level, node.index, sub_depth)
    return hp.pix_center(node.level + sub_depth, idx)


def cross_density(node: HealpixNode, order: int, sub_depth: int = DEFAULT_SUB_DEPTH,
                  threshold: float = ENERGY_THRESHOLD) -> CrossDensity:
    """Cross spatial density matrix of one pixel and its truncated eigenbasis."""
    if order > 6:
        raise ValueError("orders above 6 are not supported")
    if sub_depth < 2:
        raise ValueError("sub_depth must be at least 2")
    th, ph = quadrature_points(node, sub_depth)
    Q = _gram(order, th, ph, 1)[0]
    lam, V = _eig_desc(Q)
    return CrossDensity(HealpixNode(*node), Q, lam, V, int(_n_keep(lam, threshold)[0]), threshold)


def steering_vector(frame: ShdFrame, r_a: float) -> np.ndarray:
    """Equalized coefficients p_nm / (4 pi i^n b_n(k r_a))."""
    return pwd_weights(frame, r_a)


def srpd_eval(sv: np.ndarray, cd: CrossDensity, full: bool = False) -> float:
    """SRPD of one pixel, using the retained eigenpairs unless `full`."""
    sv = np.asarray(sv)
    if sv.shape != (cd.Q.shape[0],):
        raise ValueError(f"steering vector of length {sv.shape} does not match Q {cd.Q.shape}")
    m = cd.Q.shape[0] if full else cd.n_keep
    proj = cd.eigvecs[:, :m].conj().T @ sv
    return float(_FOUR_PI_SQ * np.sum(cd.eigvals[:m] * np.abs(proj) ** 2))


class CrossDensityCache:
    """Cross densities of every pixel at levels 0..max_level.

    All levels share one quadrature grid at ``max_level + sub_depth`` so that
    each parent matrix is exactly the mean of its children.  For fast
    evaluation every pixel also stores ``W = sqrt(lambda_m) v_m^H`` for the
    retained pairs, zero-padded to a common row count per level, so that
    ``P = (4 pi)^2 ||W p||^2``.
    """

    MAGIC = b"SRPDQC01"

    def __init__(self, order: int, max_level: int, sub_depth: int, threshold: float,
                 Q: list, eigvals: list, eigvecs: list, n_keep: list):
        self.order = order
        self.max_level = max_level
        self.sub_depth = sub_depth
        self.threshold = threshold
        self.Q = Q
        self.eigvals = eigvals
        self.eigvecs = eigvecs
        self.n_keep = n_keep
        self._proj = [self._projector(l) for l in range(max_level + 1)]

    def _projector(self, level: int) -> np.ndarray:
        m_max = int(self.n_keep[level].max())
        lam = np.clip(self.eigvals[level][:, :m_max], 0.0, None)
        keep = np.arange(m_max)[None, :] < self.n_keep[level][:, None]
        scale = np.sqrt(lam) * keep
        W = np.swapaxes(self.eigvecs[level][:, :, :m_max].conj(), 1, 2) * scale[:, :, None]
        return np.ascontiguousarray(W)

    @classmethod
    def build(cls, max_level: int, order: int = 4, sub_depth: int = DEFAULT_SUB_DEPTH,
              threshold: float = ENERGY_THRESHOLD, chunk: int = 64) -> "CrossDensityCache":
        if max_level > 6:
            raise ValueError("max_level above 6 is not supported")
        if order > 6:
            raise ValueError("orders above 6 are not supported")
        if sub_depth < 2:
            raise ValueError("sub_depth must be at least 2")
        qlevel = max_level + sub_depth
        per = 1 << (2 * sub_depth)
        n_top = hp.npix(max_level)
        D = n_coeffs(order)
        Qtop = np.empty((n_top, D, D), dtype=complex)
        for start in range(0, n_top, chunk):
            stop = min(n_top, start + chunk)
            th, ph = hp.pix_center(qlevel, np.arange(start * per, stop * per))
            Qtop[start:stop] = _gram(order, th, ph, stop - start)
        Qs = [Qtop]
        for _ in range(max_level):
            q = Qs[-1]
            Qs.append(q.reshape(-1, 4, D, D).mean(axis=1))
        Qs = Qs[::-1]
        lams, vecs, keeps = [], [], []
        for q in Qs:
            lam, V = _eig_desc(q)
            lams.append(lam)
            vecs.append(V)
            keeps.append(_n_keep(lam, threshold))
        return cls(order, max_level, sub_depth, threshold, Qs, lams, vecs, keeps)

    def __len__(self) -> int:
        return sum(hp.npix(l) for l in range(self.max_level + 1))

    def __getitem__(self, node) -> CrossDensity:
        level, index = node
        return CrossDensity(HealpixNode(level, index), self.Q[level][index],
                            self.eigvals[level][index], self.eigvecs[level][index],
                            int(self.n_keep[level][index]), self.threshold)

    def evaluate(self, sv: np.ndarray, level: int, indices) -> np.ndarray:
        """SRPD of several pixels at one level for steering vector `sv`."""
        W = self._proj[level][np.asarray(indices)]
        return _FOUR_PI_SQ * np.sum(np.abs(W @ sv) ** 2, axis=-1)

    def evaluate_full(self, sv: np.ndarray, level: int, indices=None) -> np.ndarray:
        """Untruncated SRPD, (4 pi)^2 p^H Q^T p, for every listed pixel."""
        Q = self.Q[level] if indices is None else self.Q[level][np.asarray(indices)]
        return _FOUR_PI_SQ * np.real(np.einsum("a,pab,b->p", sv, Q, sv.conj()))

    # -- persistence ------------------------------------------------------- #
    # Layout: MAGIC | uint32 LE header length | UTF-8 JSON header | raw arrays.
    # Arrays are little-endian, C order, written level by level in the order
    # Q, eigvals, eigvecs, n_keep; the header lists dtype and shape of each.

    def save(self, path) -> None:
        arrays, meta = [], []
        for l in range(self.max_level + 1):
            for name, arr, dt in (("Q", self.Q[l], "<c16"), ("eigvals", self.eigvals[l], "<f8"),
                                  ("eigvecs", self.eigvecs[l], "<c16"), ("n_keep", self.n_keep[l], "<i8")):
                a = np.ascontiguousarray(arr, dtype=dt)
                arrays.append(a)
                meta.append({"level": l, "name": name, "dtype": dt, "shape": list(a.shape)})
        header = json.dumps({"version": 1, "order": self.order, "max_level": self.max_level,
                             "sub_depth": self.sub_depth, "threshold": self.threshold,
                             "arrays": meta}, sort_keys=True).encode()
        tmp = Path(str(path) + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(self.MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            for a in arrays:
                fh.write(a.tobytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "CrossDensityCache":
        with open(path, "rb") as fh:
            if fh.read(8) != cls.MAGIC:
                raise ValueError(f"{path} is not a cross-density cache file")
            (hlen,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(hlen))
            if header.get("version") != 1:
                raise ValueError(f"unsupported cache version {header.get('version')}")
            L = header["max_level"]
            store = {name: [None] * (L + 1) for name in ("Q", "eigvals", "eigvecs", "n_keep")}
            for m in header["arrays"]:
                dt = np.dtype(m["dtype"])
                count = int(np.prod(m["shape"]))
                buf = fh.read(count * dt.itemsize)
                store[m["name"]][m["level"]] = np.frombuffer(buf, dtype=dt).reshape(m["shape"]).copy()
        return cls(header["order"], L, header["sub_depth"], header["threshold"],
                   store["Q"], store["eigvals"], store["eigvecs"], store["n_keep"])


def cd_cache(max_level: int, order: int = 4, sub_depth: int = DEFAULT_SUB_DEPTH,
             threshold: float = ENERGY_THRESHOLD, path=None) -> CrossDensityCache:
    """Build the cache, or load it from `path` when that file already exists."""
    if path is not None and Path(path).exists():
        cache = CrossDensityCache.load(path)
        if (cache.order, cache.sub_depth, cache.threshold) == (order, sub_depth, threshold) \
                and cache.max_level >= max_level:
            return cache
    cache = CrossDensityCache.build(max_level, order, sub_depth, threshold)
    if path is not None:
        cache.save(path)
    return cache
