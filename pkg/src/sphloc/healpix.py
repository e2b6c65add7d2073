"""HEALPix pixelization in the nested scheme.

Only the geometry needed by the localizer is implemented: pixel centres,
point-to-pixel lookup, parent/children arithmetic, same-level neighbours and
the area/resolution formulas.  A pixel is addressed by ``(level, index)`` with
``nside = 2**level`` and ``0 <= index < 12 * 4**level``.

All routines accept numpy arrays for the index/angle arguments.

Boundary points: :func:`pix_containing` uses the floor convention of the
reference HEALPix construction.  A point on a shared edge goes to the pixel
whose face coordinates are obtained by truncation, which is deterministic
but not necessarily the lowest index.
"""
from __future__ import annotations

import math
from functools import lru_cache
from typing import NamedTuple

import numpy as np

# per-face ring offset (in units of nside) and azimuth offset (in units of pi/4)
_JRLL = np.array([2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4])
_JPLL = np.array([1, 3, 5, 7, 0, 2, 4, 6, 1, 3, 5, 7])


class HealpixNode(NamedTuple):
    level: int
    index: int


def nside(level: int) -> int:
    return 1 << level


def npix(level: int) -> int:
    return 12 << (2 * level)


def pix_area(level: int) -> float:
    """Steradians per pixel on the unit sphere."""
    return 4 * math.pi / npix(level)


def angular_resolution(level: int) -> float:
    """Typical pixel spacing in radians, sqrt(3/pi) * pi / (3 * 2**level)."""
    return math.sqrt(3 / math.pi) * math.pi / (3 * (1 << level))


def _check(level, index):
    index = np.asarray(index, dtype=np.int64)
    if level < 0:
        raise ValueError("level must be non-negative")
    if np.any((index < 0) | (index >= npix(level))):
        raise IndexError(f"pixel index out of range for level {level}")
    return index


def _spread_bits(v: np.ndarray, level: int) -> np.ndarray:
    out = np.zeros_like(v)
    for b in range(level):
        out |= ((v >> b) & 1) << (2 * b)
    return out


def _compress_bits(v: np.ndarray, level: int) -> np.ndarray:
    out = np.zeros_like(v)
    for b in range(level):
        out |= ((v >> (2 * b)) & 1) << b
    return out


def nest2xyf(level: int, index):
    index = np.asarray(index, dtype=np.int64)
    npface = 1 << (2 * level)
    face = index // npface
    ipf = index % npface
    return _compress_bits(ipf, level), _compress_bits(ipf >> 1, level), face


def xyf2nest(level: int, ix, iy, face):
    ix = np.asarray(ix, dtype=np.int64)
    iy = np.asarray(iy, dtype=np.int64)
    face = np.asarray(face, dtype=np.int64)
    return (face << (2 * level)) + _spread_bits(ix, level) + (_spread_bits(iy, level) << 1)


def face_to_zphi(x, y, face):
    """Map continuous face coordinates (x, y in [0, 1]) to (z, phi)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    face = np.asarray(face)
    jr = _JRLL[face] - x - y
    nr = np.where(jr < 1, jr, np.where(jr > 3, 4 - jr, 1.0))
    z = np.where(jr < 1, 1 - nr * nr / 3, np.where(jr > 3, nr * nr / 3 - 1, (2 - jr) * 2 / 3))
    tmp = np.mod(_JPLL[face] * nr + x - y, 8.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        phi = np.where(nr < 1e-15, 0.0, (math.pi / 4) * tmp / nr)
    return z, phi


def pix_center(level: int, index):
    """Centre (theta, phi) of nested pixel(s)."""
    index = _check(level, index)
    ix, iy, face = nest2xyf(level, index)
    ns = nside(level)
    z, phi = face_to_zphi((ix + 0.5) / ns, (iy + 0.5) / ns, face)
    theta = np.arccos(np.clip(z, -1, 1))
    if theta.ndim == 0:
        return float(theta), float(phi)
    return theta, phi


def pix_center_vec(level: int, index) -> np.ndarray:
    theta, phi = pix_center(level, index)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def _zphi2pix(level: int, z, phi):
    ns = nside(level)
    z = np.asarray(z, dtype=float)
    phi = np.asarray(phi, dtype=float)
    za = np.abs(z)
    tt = np.mod(phi, 2 * math.pi) * (2 / math.pi)  # in [0, 4)
    tt = np.where(tt >= 4.0, 0.0, tt)

    # equatorial belt
    temp1 = ns * (0.5 + tt)
    temp2 = ns * z * 0.75
    jp = (temp1 - temp2).astype(np.int64)
    jm = (temp1 + temp2).astype(np.int64)
    ifp = jp >> level
    ifm = jm >> level
    face_eq = np.where(ifp == ifm, ifp | 4, np.where(ifp < ifm, ifp, ifm + 8))
    ix_eq = jm & (ns - 1)
    iy_eq = ns - (jp & (ns - 1)) - 1

    # polar caps
    ntt = np.minimum(3, tt.astype(np.int64))
    tp = tt - ntt
    tmp = ns * np.sqrt(3 * (1 - za))
    jp2 = np.minimum((tp * tmp).astype(np.int64), ns - 1)
    jm2 = np.minimum(((1.0 - tp) * tmp).astype(np.int64), ns - 1)
    north = z >= 0
    face_pol = np.where(north, ntt, ntt + 8)
    ix_pol = np.where(north, ns - jm2 - 1, jp2)
    iy_pol = np.where(north, ns - jp2 - 1, jm2)

    eq = za <= 2.0 / 3.0
    face = np.where(eq, face_eq, face_pol)
    ix = np.where(eq, ix_eq, ix_pol)
    iy = np.where(eq, iy_eq, iy_pol)
    return xyf2nest(level, ix, iy, face)


def pix_containing(level: int, theta, phi):
    """Nested index of the level-`level` pixel containing the direction(s)."""
    theta = np.clip(np.asarray(theta, dtype=float), 0.0, math.pi)
    out = _zphi2pix(level, np.cos(theta), phi)
    return int(out) if out.ndim == 0 else out


def vec2pix(level: int, v):
    v = np.asarray(v, dtype=float)
    v = v / np.linalg.norm(v, axis=-1, keepdims=True)
    out = _zphi2pix(level, np.clip(v[..., 2], -1, 1), np.arctan2(v[..., 1], v[..., 0]))
    return int(out) if out.ndim == 0 else out


def children(node: HealpixNode) -> list:
    level, index = node
    _check(level, index)
    return [HealpixNode(level + 1, 4 * index + k) for k in range(4)]


def parent(node: HealpixNode) -> HealpixNode:
    level, index = node
    _check(level, index)
    if level == 0:
        raise ValueError("level-0 pixels have no parent")
    return HealpixNode(level - 1, index // 4)


def descendants(level: int, index: int, depth: int) -> np.ndarray:
    """Nested indices at ``level + depth`` covering pixel (level, index)."""
    n = 1 << (2 * depth)
    return np.arange(index * n, (index + 1) * n, dtype=np.int64)


def pix_corners(level: int, index) -> np.ndarray:
    """Unit vectors of the 4 pixel vertices, shape (..., 4, 3)."""
    index = _check(level, index)
    ix, iy, face = nest2xyf(level, index)
    ns = nside(level)
    xs = np.stack([ix + 1, ix, ix, ix + 1], axis=-1) / ns
    ys = np.stack([iy + 1, iy + 1, iy, iy], axis=-1) / ns
    z, phi = face_to_zphi(xs, ys, np.asarray(face)[..., None])
    st = np.sqrt(np.clip(1 - z * z, 0, None))
    return np.stack([st * np.cos(phi), st * np.sin(phi), z], axis=-1)


_N_PROBE = 36


@lru_cache(maxsize=None)
def neighbor_table(level: int) -> np.ndarray:
    """Same-level neighbours of every pixel, shape (npix, 8), padded with -1.

    Two pixels are neighbours when their closed regions share a vertex (this
    includes edge neighbours).  The table is built geometrically: a small
    circle of probe points is laid around every vertex of every pixel and
    looked up with :func:`vec2pix`.  The probe radius is a hundredth of the
    pixel spacing, well below the smallest pixel width at that level.
    """
    n = npix(level)
    idx = np.arange(n, dtype=np.int64)
    corners = pix_corners(level, idx)  # (n, 4, 3)
    c = corners.reshape(-1, 3)
    # tangent frame at each vertex; fall back to x/y axes at the poles
    ref = np.where(np.abs(c[:, 2:3]) > 0.999, [[1.0, 0.0, 0.0]], [[0.0, 0.0, 1.0]])
    e1 = np.cross(ref, c)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(c, e1)
    delta = 0.01 * angular_resolution(level)
    ang = 2 * math.pi * (np.arange(_N_PROBE) + 0.37) / _N_PROBE
    probes = (math.cos(delta) * c[:, None, :]
              + math.sin(delta) * (np.cos(ang)[None, :, None] * e1[:, None, :]
                                   + np.sin(ang)[None, :, None] * e2[:, None, :]))
    hit = vec2pix(level, probes).reshape(n, 4 * _N_PROBE)
    table = np.full((n, 8), -1, dtype=np.int64)
    for i in range(n):
        nb = np.unique(hit[i])
        nb = nb[nb != i]
        if nb.size > 8:
            raise RuntimeError(f"pixel ({level}, {i}) has {nb.size} neighbours")
        table[i, :nb.size] = nb
    table.setflags(write=False)
    return table


def neighbors(node: HealpixNode) -> set:
    """Same-level pixels sharing an edge or a vertex with `node`."""
    level, index = node
    _check(level, index)
    row = neighbor_table(level)[index]
    return {HealpixNode(level, int(j)) for j in row if j >= 0}
