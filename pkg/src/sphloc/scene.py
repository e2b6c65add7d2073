"""Synthetic rigid-sphere scenes: plane-wave pressures, time signals and noise."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import fft as sfft

from .sph import (SPEED_OF_SOUND, ArrayGeometry, PlaneWaveSource, surface_mode_strength, to_angles,
                  unit_vector)


class InfeasibleSceneError(ValueError):
    """Raised when directions with the requested separation cannot be drawn."""


def synthesis_order(kr_a: float) -> int:
    return int(math.ceil(kr_a)) + 8


def _legendre_series(cos_angle: np.ndarray, kr_a, n_max: int) -> np.ndarray:
    """sum_{n<=n_max} i^n (2n+1) b_n(k r_a) P_n(cos angle).

    By the addition theorem this equals
    sum_n sum_m 4 pi i^n b_n conj(Y_n^m(source)) Y_n^m(sensor).
    """
    kr_a = np.asarray(kr_a, dtype=float)
    out = np.zeros(np.broadcast_shapes(kr_a.shape + (1,) * cos_angle.ndim, cos_angle.shape)
                   if kr_a.ndim else cos_angle.shape, dtype=complex)
    p_prev, p_cur = np.ones_like(cos_angle), cos_angle.copy()
    for n in range(n_max + 1):
        if n == 0:
            pn = p_prev
        elif n == 1:
            pn = p_cur
        else:
            p_prev, p_cur = p_cur, ((2 * n - 1) * cos_angle * p_cur - (n - 1) * p_prev) / n
            pn = p_cur
        b = surface_mode_strength(n, kr_a)
        if kr_a.ndim:
            b = b.reshape(b.shape + (1,) * cos_angle.ndim)
        out = out + (1j ** n) * (2 * n + 1) * b * pn
    return out


def synth_pressures(sources, geom: ArrayGeometry, k: float, n_synth: int | None = None) -> np.ndarray:
    """Sensor pressures for plane waves on the rigid sphere at one wavenumber."""
    kr_a = k * geom.radius_m
    if n_synth is None:
        n_synth = synthesis_order(kr_a)
    elif n_synth < math.ceil(kr_a) + 4:
        raise ValueError(f"n_synth={n_synth} is too small for k r_a = {kr_a:.3g}")
    mics = unit_vector(geom.theta, geom.phi)
    p = np.zeros(geom.n_mics, dtype=complex)
    for s in sources:
        cosang = np.clip(mics @ unit_vector(s.theta, s.phi), -1.0, 1.0)
        p += s.amplitude * _legendre_series(cosang, kr_a, n_synth)
    return p


def transfer_functions(theta: float, phi: float, geom: ArrayGeometry, freqs, c: float = SPEED_OF_SOUND):
    """Plane-wave-to-sensor transfer per frequency, shape (n_freqs, Q)."""
    freqs = np.asarray(freqs, dtype=float)
    kr_a = 2 * np.pi * freqs / c * geom.radius_m
    n_max = synthesis_order(float(kr_a.max()) if kr_a.size else 0.0)
    cosang = np.clip(unit_vector(geom.theta, geom.phi) @ unit_vector(theta, phi), -1.0, 1.0)
    return _legendre_series(cosang, kr_a, n_max)


# --------------------------------------------------------------------------- #
# Scene description
# --------------------------------------------------------------------------- #

@dataclass
class SourceSpec:
    """One directional source.

    `signal` selects a generator: ``{"type": "tone", "freq": Hz}``,
    ``{"type": "burst", "onset": s, "duration": s, "f_lo": Hz, "f_hi": Hz}``,
    ``{"type": "click", "times": [s, ...]}`` or ``{"type": "wav", "path": ...}``.
    """

    theta: float
    phi: float
    signal: dict = field(default_factory=lambda: {"type": "tone", "freq": 3000.0})
    gain: float = 1.0


@dataclass
class SceneSpec:
    sources: list
    # copies of a source from other directions: {"source": i, "theta", "phi", "gain", "delay": s}
    extra_components: list = field(default_factory=list)
    snr_db: float | None = None
    seed: int = 0
    fs: float = 48000.0
    duration: float = 1.0

    def __post_init__(self):
        self.sources = [s if isinstance(s, SourceSpec) else SourceSpec(**s) for s in self.sources]
        for s in self.sources:
            if not 0 <= s.theta <= np.pi:
                raise ValueError(f"source inclination {s.theta} outside [0, pi]")
        if self.snr_db is not None and not np.isfinite(self.snr_db):
            self.snr_db = None

    def directions(self) -> np.ndarray:
        """True DOAs: every audible source plus every extra component."""
        th = [s.theta for s in self.sources if s.gain != 0] + [float(c["theta"]) for c in self.extra_components]
        ph = [s.phi for s in self.sources if s.gain != 0] + [float(c["phi"]) for c in self.extra_components]
        return unit_vector(np.array(th), np.array(ph)).reshape(-1, 3)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)


def load_scene(path) -> SceneSpec:
    with open(path) as fh:
        return SceneSpec.from_dict(json.load(fh))


def save_scene(scene: SceneSpec, path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=2, sort_keys=True) + "\n")


def _bandlimited_noise(n: int, fs: float, f_lo: float, f_hi: float, rng) -> np.ndarray:
    x = rng.standard_normal(n)
    X = np.fft.rfft(x)
    f = np.fft.rfftfreq(n, 1 / fs)
    X[(f < f_lo) | (f > f_hi)] = 0
    y = np.fft.irfft(X, n)
    return y / (np.std(y) + 1e-300)


def source_signal(src: SourceSpec, fs: float, n: int, rng) -> np.ndarray:
    sig = src.signal
    kind = sig.get("type", "tone")
    t = np.arange(n) / fs
    if kind == "tone":
        out = np.cos(2 * np.pi * float(sig["freq"]) * t + float(sig.get("phase", 0.0)))
    elif kind == "burst":
        on, dur = float(sig.get("onset", 0.0)), float(sig.get("duration", 0.2))
        out = _bandlimited_noise(n, fs, float(sig.get("f_lo", 500.0)), float(sig.get("f_hi", 8000.0)), rng)
        ramp = float(sig.get("ramp", 0.001))
        env = np.clip((t - on) / ramp, 0, 1) * np.clip((on + dur - t) / ramp, 0, 1)
        out = out * env
    elif kind == "syllables":
        # a train of band-limited noise bursts at given (onset, duration) pairs
        base = _bandlimited_noise(n, fs, float(sig.get("f_lo", 500.0)), float(sig.get("f_hi", 8000.0)), rng)
        ramp = float(sig.get("ramp", 0.002))
        env = np.zeros(n)
        for on, dur in sig["segments"]:
            env = np.maximum(env, np.clip((t - on) / ramp, 0, 1) * np.clip((on + dur - t) / ramp, 0, 1))
        out = base * env
    elif kind == "click":
        out = np.zeros(n)
        for tc in sig["times"]:
            i = int(round(float(tc) * fs))
            if 0 <= i < n:
                out[i] = 1.0
    elif kind == "wav":
        from scipy.io import wavfile
        sr, data = wavfile.read(sig["path"])
        if sr != fs:
            raise ValueError(f"{sig['path']} has rate {sr}, scene needs {fs}")
        data = np.asarray(data, dtype=float)
        data = data if data.ndim == 1 else data[:, 0]
        out = np.zeros(n)
        out[:min(n, data.size)] = data[:n]
    else:
        raise ValueError(f"unknown signal type {kind!r}")
    return src.gain * out


def _apply_plane_wave(x: np.ndarray, theta: float, phi: float, geom: ArrayGeometry, fs: float,
                      c: float, delay: float = 0.0) -> np.ndarray:
    n = x.size
    nfft = sfft.next_fast_len(n + 512, real=True)
    X = np.fft.rfft(x, nfft)
    f = np.fft.rfftfreq(nfft, 1 / fs)
    H = transfer_functions(theta, phi, geom, f, c)  # (F, Q)
    if delay:
        H = H * np.exp(-2j * np.pi * f * delay)[:, None]
    return np.fft.irfft(X[:, None] * H, nfft, axis=0)[:n].T


def synth_time_signals(scene: SceneSpec, geom: ArrayGeometry, fs: float | None = None,
                       c: float = SPEED_OF_SOUND, add_sensor_noise: bool = True) -> np.ndarray:
    """Microphone signals of shape (Q, T) for a scene.

    Each source signal is filtered by its rigid-sphere transfer functions in
    the frequency domain (zero-padded, so the convolution is linear).
    """
    fs = scene.fs if fs is None else fs
    n = int(round(scene.duration * fs))
    out = np.zeros((geom.n_mics, n))
    signals = []
    for i, src in enumerate(scene.sources):
        rng = np.random.default_rng([scene.seed, 1, i])
        x = source_signal(src, fs, n, rng)
        signals.append(x)
        out += _apply_plane_wave(x, src.theta, src.phi, geom, fs, c)
    for comp in scene.extra_components:
        x = signals[int(comp["source"])] * float(comp.get("gain", 1.0))
        out += _apply_plane_wave(x, float(comp["theta"]), float(comp["phi"]), geom, fs, c,
                                 float(comp.get("delay", 0.0)))
    if add_sensor_noise and scene.snr_db is not None:
        out = add_noise(out, scene.snr_db, scene.seed)
    return out


def add_noise(signals: np.ndarray, snr_db: float | None, seed: int) -> np.ndarray:
    """Add independent white Gaussian noise to every channel.

    The per-channel noise energy is set to E_omni / 10^(snr/10), with E_omni
    the energy of the channel average.  Each channel's realization is
    rescaled to exactly that energy.
    """
    if snr_db is None or not np.isfinite(snr_db):
        return signals
    signals = np.asarray(signals, dtype=float)
    e_omni = float(np.sum(signals.mean(axis=0) ** 2))
    target = e_omni / 10 ** (snr_db / 10)
    rng = np.random.default_rng([seed, 2])
    noise = rng.standard_normal(signals.shape)
    noise *= np.sqrt(target / np.sum(noise ** 2, axis=-1, keepdims=True))
    return signals + noise


def measured_snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    noise = noisy - clean
    e_omni = np.sum(clean.mean(axis=0) ** 2)
    return float(10 * np.log10(e_omni / np.mean(np.sum(noise ** 2, axis=-1))))


# --------------------------------------------------------------------------- #
# Random scenarios
# --------------------------------------------------------------------------- #

def random_directions(n: int, min_sep: float, rng, max_tries: int = 1000,
                      max_restarts: int = 50) -> np.ndarray:
    """`n` uniform unit vectors with pairwise angles above `min_sep`.

    Points are drawn one at a time by rejection against those already
    accepted; a point that cannot be placed within `max_tries` draws restarts
    the whole set.
    """
    cos_sep = math.cos(min_sep)
    pts = np.empty((n, 3))
    for _ in range(max_restarts):
        count = 0
        while count < n:
            for _ in range(max_tries):
                v = rng.standard_normal(3)
                v /= np.linalg.norm(v)
                if count == 0 or np.max(pts[:count] @ v) < cos_sep:
                    pts[count] = v
                    count += 1
                    break
            else:
                break
        if count == n:
            return pts
    raise InfeasibleSceneError(
        f"could not place {n} sources with min_sep={math.degrees(min_sep):.1f} deg "
        f"after {max_restarts} restarts")


def random_scenario(n_sources: int, min_sep: float = math.pi / 4, seed: int = 0, **kw) -> SceneSpec:
    """Scene with uniformly random, well separated source directions.

    Keyword arguments are passed to :class:`SceneSpec`; sources get a 3 kHz
    tone unless `signal_factory(i, rng)` is given.
    """
    rng = np.random.default_rng([seed, 0])
    factory = kw.pop("signal_factory", None)
    v = random_directions(n_sources, min_sep, rng)
    theta = np.arccos(np.clip(v[:, 2], -1, 1))
    phi = np.mod(np.arctan2(v[:, 1], v[:, 0]), 2 * np.pi)
    sources = []
    for i in range(n_sources):
        sig = factory(i, rng) if factory else {"type": "tone", "freq": 3000.0}
        sources.append(SourceSpec(float(theta[i]), float(phi[i]), sig))
    return SceneSpec(sources, seed=seed, **kw)


def syllable_segments(rng, duration: float, first: float, syl=(0.04, 0.12), gap=(0.03, 0.15)) -> list:
    """Random (onset, duration) pairs filling [first, duration)."""
    segs, t = [], first
    while True:
        d = float(rng.uniform(*syl))
        if t + d > duration - 0.01:
            break
        segs.append([round(t, 4), round(d, 4)])
        t += d + float(rng.uniform(*gap))
    return segs


def burst_scene(n_sources: int, min_sep: float = math.pi / 4, seed: int = 0, snr_db=None,
                duration: float = 2.0, stagger: float = 0.05, f_lo: float = 500.0,
                f_hi: float = 8000.0, coherent: bool = False) -> SceneSpec:
    """Speech-like test scene.

    Every source plays its own train of short band-limited noise bursts with
    random lengths and gaps, the first one starting `stagger` seconds after
    the previous source.  With `coherent` all sources play one and the same
    signal, as if they were reflections of a single talker.
    """
    first = 0.02

    def factory(i, rng):
        start = first if coherent else first + i * stagger
        return {"type": "syllables", "segments": syllable_segments(rng, duration, start),
                "f_lo": f_lo, "f_hi": f_hi}

    scene = random_scenario(n_sources, min_sep, seed, signal_factory=factory, snr_db=snr_db,
                            duration=duration)
    if coherent and n_sources > 1:
        extra = [{"source": 0, "theta": s.theta, "phi": s.phi, "gain": 1.0, "delay": 0.0}
                 for s in scene.sources[1:]]
        for s in scene.sources[1:]:
            s.gain = 0.0
        scene.extra_components = extra
    return scene


def monochromatic_sources(n: int, seed: int, min_sep: float = math.pi / 4, n_diffuse: int = 0,
                          diffuse_max: float = 0.5) -> list:
    """Unit-amplitude plane waves plus optional random weak components.

    The weak components have random phase and magnitude uniform in
    [0, diffuse_max] and random, unconstrained directions.
    """
    rng = np.random.default_rng([seed, 3])
    v = random_directions(n, min_sep, rng)
    th = np.arccos(np.clip(v[:, 2], -1, 1))
    ph = np.mod(np.arctan2(v[:, 1], v[:, 0]), 2 * np.pi)
    out = [PlaneWaveSource(1.0, float(t), float(p)) for t, p in zip(th, ph)]
    for _ in range(n_diffuse):
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        amp = rng.uniform(0, diffuse_max) * np.exp(2j * np.pi * rng.uniform())
        out.append(PlaneWaveSource(complex(amp), float(np.arccos(np.clip(d[2], -1, 1))),
                                   float(np.mod(np.arctan2(d[1], d[0]), 2 * np.pi))))
    return out


def coherent_pair_scene(separation: float = math.pi / 2, seed: int = 0, snr_db=None,
                        duration: float = 2.0, f_lo: float = 500.0, f_hi: float = 8000.0) -> SceneSpec:
    """One syllable-train signal arriving from two directions `separation` apart.

    The first direction is uniform on the sphere and the second is rotated
    away from it about a random perpendicular axis.
    """
    rng = np.random.default_rng([seed, 4])
    a = random_directions(1, 0.0, rng)[0]
    ortho = rng.standard_normal(3)
    ortho -= (ortho @ a) * a
    ortho /= np.linalg.norm(ortho)
    b = math.cos(separation) * a + math.sin(separation) * ortho
    (t1, t2), (p1, p2) = to_angles(np.vstack([a, b]))
    sig = {"type": "syllables", "segments": syllable_segments(rng, duration, 0.02), "f_lo": f_lo, "f_hi": f_hi}
    src = SourceSpec(float(t1), float(p1), sig)
    extra = [{"source": 0, "theta": float(t2), "phi": float(p2), "gain": 1.0, "delay": 0.0}]
    return SceneSpec([src], extra, snr_db, seed, duration=duration)

