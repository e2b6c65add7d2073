"""Spherical harmonics, rigid-sphere mode strength and plane-wave decomposition.

Coefficients are always laid out in (n, m) lexicographic order with m running
from -n to n::

    (0, 0), (1, -1), (1, 0), (1, 1), (2, -2), ..., (N, N)

so that the coefficient of (n, m) sits at index ``n**2 + n + m``.

Angles follow the physics convention: inclination ``theta`` in [0, pi] measured
from +z, azimuth ``phi`` in [0, 2 pi) measured from +x.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special

SPEED_OF_SOUND = 343.0
MODE_STRENGTH_FLOOR = 1e-8


class IllConditionedError(ArithmeticError):
    """Raised when a mode strength is too small to be divided out safely."""


def n_coeffs(order: int) -> int:
    return (order + 1) ** 2


def acn(n: int, m: int) -> int:
    """Index of the (n, m) coefficient in the wire order."""
    return n * n + n + m


def order_of_index(order: int) -> np.ndarray:
    """Degree n for every coefficient slot up to `order`."""
    return np.concatenate([np.full(2 * n + 1, n) for n in range(order + 1)])


# --------------------------------------------------------------------------- #
# Legendre functions and harmonics
# --------------------------------------------------------------------------- #

def assoc_legendre(n: int, m: int, x):
    """Associated Legendre function P_n^m(x) with the Condon-Shortley phase.

    Evaluated with the standard upward recurrence in n, which is stable for
    the low orders used here.  `x` may be a scalar or an array.
    """
    if n < 0 or m < 0 or m > n:
        raise ValueError(f"invalid degree/order pair (n={n}, m={m})")
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) > 1.0):
        raise ValueError("assoc_legendre is defined on [-1, 1] only")
    # P_m^m = (-1)^m (2m-1)!! (1-x^2)^(m/2)
    pmm = np.ones_like(x)
    if m > 0:
        somx2 = np.sqrt((1.0 - x) * (1.0 + x))
        fact = 1.0
        for _ in range(m):
            pmm = -pmm * fact * somx2
            fact += 2.0
    if n == m:
        return pmm if pmm.ndim else float(pmm)
    pmmp1 = x * (2 * m + 1) * pmm
    if n == m + 1:
        return pmmp1 if pmmp1.ndim else float(pmmp1)
    for ll in range(m + 2, n + 1):
        pll = ((2 * ll - 1) * x * pmmp1 - (ll + m - 1) * pmm) / (ll - m)
        pmm, pmmp1 = pmmp1, pll
    return pmmp1 if pmmp1.ndim else float(pmmp1)


def _norm(n: int, m: int) -> float:
    return math.sqrt((2 * n + 1) / (4 * math.pi) * math.factorial(n - m) / math.factorial(n + m))


def sph_harmonic(n: int, m: int, theta, phi):
    """Orthonormal complex spherical harmonic Y_n^m(theta, phi)."""
    if n < 0 or abs(m) > n:
        raise ValueError(f"invalid degree/order pair (n={n}, m={m})")
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    am = abs(m)
    y = _norm(n, am) * assoc_legendre(n, am, np.cos(theta)) * np.exp(1j * am * phi)
    if m < 0:
        y = (-1) ** am * np.conj(y)
    return y if np.ndim(y) else complex(y)


def sh_matrix(order: int, theta, phi) -> np.ndarray:
    """Harmonics up to `order` at K directions, shape (K, (order+1)**2).

    Angle arrays of any shape are broadcast and flattened to K directions.
    Uses the m-wise recurrence on cos(theta) for all degrees at once, which is
    much cheaper than calling :func:`sph_harmonic` per coefficient.
    """
    theta, phi = np.broadcast_arrays(np.asarray(theta, dtype=float), np.asarray(phi, dtype=float))
    theta, phi = theta.ravel(), phi.ravel()
    x = np.cos(theta)
    somx2 = np.sin(theta)
    out = np.empty((x.size, n_coeffs(order)), dtype=complex)
    pmm = np.ones_like(x)
    for m in range(order + 1):
        if m > 0:
            pmm = -pmm * (2 * m - 1) * somx2
        eimp = np.exp(1j * m * phi)
        # walk up in n for this m
        p_prev, p_cur = None, pmm
        for n in range(m, order + 1):
            if n == m + 1:
                p_prev, p_cur = p_cur, x * (2 * m + 1) * pmm
            elif n > m + 1:
                p_prev, p_cur = p_cur, ((2 * n - 1) * x * p_cur - (n + m - 1) * p_prev) / (n - m)
            y = _norm(n, m) * p_cur * eimp
            out[:, acn(n, m)] = y
            if m > 0:
                out[:, acn(n, -m)] = (-1) ** m * np.conj(y)
    return out


# --------------------------------------------------------------------------- #
# Radial functions
# --------------------------------------------------------------------------- #

def sph_hankel2(n: int, x, derivative: bool = False):
    """Spherical Hankel function of the second kind, h_n^(2) = j_n - i y_n."""
    return (special.spherical_jn(n, x, derivative=derivative)
            - 1j * special.spherical_yn(n, x, derivative=derivative))


def mode_strength(n: int, k: float, r: float, r_a: float) -> complex:
    """Rigid-sphere mode strength b_n(kr) for a sensor at radius r >= r_a.

    On the sphere surface the Wronskian j_n y_n' - j_n' y_n = 1/x^2 collapses
    the scattered term to ``-i / (x^2 h_n'(x))``; that form is used when
    ``r == r_a`` because it stays finite where y_n overflows.
    """
    x_a = k * r_a
    if not x_a > 0:
        raise ValueError("k * r_a must be positive")
    if r < r_a:
        raise ValueError("sensor radius must not be inside the sphere")
    dh = sph_hankel2(n, x_a, derivative=True)
    if not np.isfinite(dh) and r == r_a:
        return 0j
    if dh == 0 or not np.isfinite(dh):
        raise IllConditionedError(f"h_{n}^(2)'({x_a:g}) is not usable")
    if r == r_a:
        return complex(-1j / (x_a * x_a * dh))
    x = k * r
    dj = special.spherical_jn(n, x_a, derivative=True)
    return complex(special.spherical_jn(n, x) - dj / dh * sph_hankel2(n, x))


def mode_strengths(order: int, kr_a: float) -> np.ndarray:
    """b_n(k r_a) on the sphere surface for n = 0..order."""
    return np.array([mode_strength(n, kr_a, 1.0, 1.0) for n in range(order + 1)])


def surface_mode_strength(n: int, x) -> np.ndarray:
    """Vectorized b_n(x) on the sphere surface, continued to x = 0.

    Where h_n' overflows (high n, small x) the mode is returned as 0.
    """
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape, dtype=complex)
    pos = x > 0
    if np.any(pos):
        xp = x[pos]
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            dh = sph_hankel2(n, xp, derivative=True)
            b = -1j / (xp * xp * dh)
        out[pos] = np.where(np.isfinite(b), b, 0.0)
    if n == 0:
        out[~pos] = 1.0
    return out


# --------------------------------------------------------------------------- #
# Data types
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class ArrayGeometry:
    """Rigid spherical array: radius, sensor directions and quadrature weights."""

    radius_m: float
    theta: np.ndarray
    phi: np.ndarray
    weights: np.ndarray
    max_order: int

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=float)
        ph = np.asarray(self.phi, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if not (th.shape == ph.shape == w.shape) or th.ndim != 1:
            raise ValueError("theta, phi and weights must be 1-D arrays of equal length")
        if self.max_order < 0:
            raise ValueError("max_order must be non-negative")
        if th.size < n_coeffs(self.max_order):
            raise ValueError(f"{th.size} microphones cannot support order {self.max_order}")
        if np.any(w <= 0):
            raise ValueError("quadrature weights must be positive")
        if np.any((th < 0) | (th > np.pi)):
            raise ValueError("inclinations must lie in [0, pi]")
        if np.any((ph < 0) | (ph >= 2 * np.pi)):
            raise ValueError("azimuths must lie in [0, 2 pi)")
        if self.radius_m <= 0:
            raise ValueError("radius must be positive")
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "phi", ph)
        object.__setattr__(self, "weights", w)

    @property
    def n_mics(self) -> int:
        return self.theta.size

    def to_dict(self) -> dict:
        return {
            "radius_m": self.radius_m,
            "max_order": self.max_order,
            "mics": [{"theta": float(t), "phi": float(p), "weight": float(w)}
                     for t, p, w in zip(self.theta, self.phi, self.weights)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArrayGeometry":
        mics = d["mics"]
        n = len(mics)
        weights = [m.get("weight", 4 * np.pi / n) for m in mics]
        return cls(radius_m=float(d["radius_m"]),
                   theta=np.array([m["theta"] for m in mics], dtype=float),
                   phi=np.array([m["phi"] for m in mics], dtype=float),
                   weights=np.array(weights, dtype=float),
                   max_order=int(d["max_order"]))


def load_geometry(path) -> ArrayGeometry:
    with open(path) as fh:
        return ArrayGeometry.from_dict(json.load(fh))


def save_geometry(geom: ArrayGeometry, path) -> None:
    Path(path).write_text(json.dumps(geom.to_dict(), indent=2) + "\n")


def truncated_icosahedron_layout(radius_m: float = 0.042, max_order: int = 4) -> ArrayGeometry:
    """32 sensors at the face centres of a truncated icosahedron.

    The face centres are the 12 vertices of an icosahedron plus the 20
    vertices of its dual dodecahedron.  With weights 4 pi * 5/168 on the
    first group and 4 pi * 9/280 on the second the point set integrates all
    harmonics up to degree 9 exactly, i.e. the order-4 decomposition is
    alias-free for order-4 fields.
    """
    g = (1 + 5 ** 0.5) / 2
    ico, dod = [], [(a, b, c) for a in (-1, 1) for b in (-1, 1) for c in (-1, 1)]
    for a in (-1, 1):
        for b in (-1, 1):
            ico += [(0, a, b * g), (a, b * g, 0), (b * g, 0, a)]
            dod += [(0, a * g, b / g), (b / g, 0, a * g), (a * g, b / g, 0)]
    pts = np.vstack([np.array(ico, float), np.array(dod, float)])
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    theta = np.arccos(np.clip(pts[:, 2], -1, 1))
    phi = np.mod(np.arctan2(pts[:, 1], pts[:, 0]), 2 * np.pi)
    w = np.r_[np.full(12, 4 * np.pi * 5 / 168), np.full(20, 4 * np.pi * 9 / 280)]
    return ArrayGeometry(radius_m, theta, phi, w, max_order)


def default_geometry() -> ArrayGeometry:
    """The bundled 32-microphone layout (radius 4.2 cm, order 4)."""
    ref = resources.files("sphloc") / "data" / "em32_like.json"
    return ArrayGeometry.from_dict(json.loads(ref.read_text()))


@dataclass(frozen=True)
class ShdFrame:
    """Spherical harmonic coefficients of one time-frequency bin."""

    coeffs: np.ndarray
    k: float
    order: int

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.shape != (n_coeffs(self.order),):
            raise ValueError(f"expected {n_coeffs(self.order)} coefficients, got {c.shape}")
        if not self.k > 0:
            raise ValueError("wavenumber must be positive")
        object.__setattr__(self, "coeffs", c)


@dataclass(frozen=True)
class PlaneWaveSource:
    amplitude: complex
    theta: float
    phi: float

    def __post_init__(self):
        if not 0 <= self.theta <= np.pi:
            raise ValueError("inclination must lie in [0, pi]")


def unit_vector(theta, phi) -> np.ndarray:
    theta, phi = np.broadcast_arrays(np.asarray(theta, dtype=float), np.asarray(phi, dtype=float))
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def to_angles(v) -> tuple:
    v = np.asarray(v, dtype=float)
    v = v / np.linalg.norm(v, axis=-1, keepdims=True)
    theta = np.arccos(np.clip(v[..., 2], -1.0, 1.0))
    phi = np.mod(np.arctan2(v[..., 1], v[..., 0]), 2 * np.pi)
    return theta, phi


# --------------------------------------------------------------------------- #
# Decomposition and beamforming
# --------------------------------------------------------------------------- #

def shd_from_mics(pressures, geom: ArrayGeometry, k: float) -> ShdFrame:
    """Discrete spherical harmonic transform of one bin of sensor pressures."""
    p = np.asarray(pressures, dtype=complex)
    if p.shape != (geom.n_mics,):
        raise ValueError(f"expected {geom.n_mics} pressures, got shape {p.shape}")
    Y = sh_matrix(geom.max_order, geom.theta, geom.phi)
    return ShdFrame(Y.conj().T @ (geom.weights * p), k, geom.max_order)


def shd_matrix(geom: ArrayGeometry) -> np.ndarray:
    """Matrix mapping sensor pressures to coefficients, shape ((N+1)^2, Q)."""
    Y = sh_matrix(geom.max_order, geom.theta, geom.phi)
    return (Y.conj() * geom.weights[:, None]).T


def plane_wave_shd(sources: Sequence[PlaneWaveSource], k: float, order: int, r_a: float) -> ShdFrame:
    """Coefficients of a superposition of plane waves on a rigid sphere."""
    if not k * r_a > 0:
        raise ValueError("k * r_a must be positive")
    coeffs = np.zeros(n_coeffs(order), dtype=complex)
    if sources:
        th = np.array([s.theta for s in sources])
        ph = np.array([s.phi for s in sources])
        amp = np.array([s.amplitude for s in sources], dtype=complex)
        coeffs = amp @ sh_matrix(order, th, ph).conj()
    nidx = order_of_index(order)
    radial = 4 * np.pi * (1j ** nidx) * mode_strengths(order, k * r_a)[nidx]
    return ShdFrame(radial * coeffs, k, order)


def equalizer(order: int, kr_a: float) -> np.ndarray:
    """Per-coefficient divisor 4 pi i^n b_n(k r_a), checked against the floor."""
    b = mode_strengths(order, kr_a)
    mag = np.abs(b)
    if np.any(mag < MODE_STRENGTH_FLOOR * mag.max()):
        bad = int(np.argmin(mag))
        raise IllConditionedError(
            f"|b_{bad}(k r_a = {kr_a:.3g})| is below {MODE_STRENGTH_FLOOR:g} of the largest mode")
    nidx = order_of_index(order)
    return 4 * np.pi * (1j ** nidx) * b[nidx]


def pwd_weights(frame: ShdFrame, r_a: float) -> np.ndarray:
    """Mode-strength-equalized coefficients p_nm / (4 pi i^n b_n)."""
    return frame.coeffs / equalizer(frame.order, frame.k * r_a)


def srp_pwd(frame: ShdFrame, theta, phi, r_a: float):
    """Steered response power |y_N|^2 of the regular (PWD) beam.

    `theta` and `phi` may be arrays of steering directions.
    """
    w = pwd_weights(frame, r_a)
    shape = np.broadcast_shapes(np.shape(theta), np.shape(phi))
    y = sh_matrix(frame.order, theta, phi) @ w
    out = (np.abs(y) ** 2).reshape(shape)
    return out if shape else float(out)


def regular_beampattern(order: int, cos_angle):
    """Closed-form order-limited PWD response to a unit plane wave.

    ``(N+1)/(4 pi) * (P_{N+1}(x) - P_N(x)) / (x - 1)``, continued to
    ``(N+1)^2 / (4 pi)`` at x = 1.
    """
    x = np.asarray(cos_angle, dtype=float)
    num = special.eval_legendre(order + 1, x) - special.eval_legendre(order, x)
    with np.errstate(invalid="ignore", divide="ignore"):
        val = (order + 1) / (4 * np.pi) * num / (x - 1.0)
    val = np.where(np.isclose(x, 1.0, atol=1e-12, rtol=0), (order + 1) ** 2 / (4 * np.pi), val)
    return val if val.ndim else float(val)
