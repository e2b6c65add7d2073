"""End-to-end localization from multichannel recordings.

Steps: STFT of every channel, onset-driven selection of time-frequency
bins on the channel average, a refined SRPD map and its clusters for every
selected bin, and a histogram vote over all cluster centroids that yields
the final directions and the source count.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import ndimage, signal as sps

from . import healpix as hp
from .higrid import RefinementPolicy, SrpdMap, refine
from .nnl import nnl_label
from .sph import SPEED_OF_SOUND, ArrayGeometry, equalizer, shd_matrix, to_angles
from .srpd import CrossDensityCache, cd_cache


@dataclass
class LocalizerConfig:
    win: int = 1024
    hop: int = 64
    f_lo: float = 2608.0
    f_hi: float = 5216.0
    max_level: int = 3
    order: int = 4
    c: float = SPEED_OF_SOUND
    seed: int = 0
    # onset detector
    onset_lag: int | None = None   # reference frame distance; None -> win // (2 hop)
    onset_max_bins: int = 3        # frequency maximum-filter width
    onset_delta: float = 0.03      # peak threshold as a fraction of the flux maximum
    onset_pre_max: float = 0.03    # seconds
    onset_post_max: float = 0.03
    onset_pre_avg: float = 0.1
    onset_post_avg: float = 0.07
    onset_combine: float = 0.03
    log_gain: float = 1000.0
    # bin selection: None keeps bins above the frame mean, a number in (0, 1)
    # keeps bins above that quantile of the frame's in-band energies
    energy_quantile: float | None = None
    # post-processing
    hist_sigma: float = 1.0
    cast_level: int = 3
    min_cluster_size: int = 1
    entropy_scope: str = "frontier"
    sub_depth: int = 4
    cache_path: str | None = None

    def __post_init__(self):
        if self.win <= 0 or self.win & (self.win - 1):
            raise ValueError(f"window length {self.win} is not a power of two")
        if not 0 < self.hop <= self.win:
            raise ValueError("hop must satisfy 0 < hop <= win")
        if not 0 <= self.f_lo < self.f_hi:
            raise ValueError("band limits must satisfy 0 <= f_lo < f_hi")
        if self.energy_quantile is not None and not 0 < self.energy_quantile < 1:
            raise ValueError("energy_quantile must lie in (0, 1)")
        RefinementPolicy(self.max_level, self.seed, 0, self.entropy_scope)

    @classmethod
    def from_dict(cls, d: dict) -> "LocalizerConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TfSelection:
    bins: list                # (frame, bin) pairs sorted by frame then bin
    onset_frames: list
    f_lo: float
    f_hi: float
    energy_quantile: float | None = None
    onset_delta: float = 0.03

    @property
    def empty(self) -> bool:
        return not self.bins


@dataclass(frozen=True)
class DoaEstimate:
    direction: np.ndarray
    support: int

    @property
    def theta(self) -> float:
        return float(np.arccos(np.clip(self.direction[2], -1.0, 1.0)))

    @property
    def phi(self) -> float:
        return float(np.mod(np.arctan2(self.direction[1], self.direction[0]), 2 * np.pi))

    def to_dict(self) -> dict:
        return {"theta_deg": math.degrees(self.theta), "phi_deg": math.degrees(self.phi),
                "support": int(self.support)}


@dataclass
class LocalizationResult:
    doas: list
    selection: TfSelection
    centroids: np.ndarray               # (n, 3), ordered by (frame, bin)
    bins_processed: int = 0
    evaluations: int = 0
    maps: list = field(default_factory=list)

    @property
    def n_sources(self) -> int:
        return len(self.doas)

    def to_dict(self) -> dict:
        return {"doas": [d.to_dict() for d in self.doas], "n_sources": self.n_sources,
                "bins_processed": self.bins_processed, "evaluations": self.evaluations,
                "empty_selection": self.selection.empty}


# --------------------------------------------------------------------------- #
# Time-frequency analysis
# --------------------------------------------------------------------------- #

def stft(signals, win: int = 1024, hop: int = 64) -> np.ndarray:
    """One-sided STFT with a periodic Hann window.

    Frame t covers samples [t*hop, t*hop + win).  Returns an array of shape
    (Q, frames, win // 2 + 1).
    """
    x = np.atleast_2d(np.asarray(signals, dtype=float))
    if win <= 0 or win & (win - 1):
        raise ValueError(f"window length {win} is not a power of two")
    if not 0 < hop <= win:
        raise ValueError("hop must satisfy 0 < hop <= win")
    if x.shape[-1] < win:
        raise ValueError(f"signal of {x.shape[-1]} samples is shorter than one window ({win})")
    w = sps.get_window("hann", win)
    frames = np.lib.stride_tricks.sliding_window_view(x, win, axis=-1)[:, ::hop]
    return np.fft.rfft(frames * w, axis=-1)


def frame_times(n_frames: int, win: int, hop: int, fs: float) -> np.ndarray:
    """Centre time in seconds of each STFT frame."""
    return (np.arange(n_frames) * hop + win / 2) / fs


def omni_component(spectra) -> np.ndarray:
    """Channel average of the STFT, shape (frames, bins)."""
    spectra = np.asarray(spectra)
    if spectra.ndim != 3 or spectra.shape[0] < 1:
        raise ValueError("expected spectra of shape (Q >= 1, frames, bins)")
    return spectra.mean(axis=0)


def spectral_flux(omni, lag: int, max_bins: int = 3, log_gain: float = 1000.0) -> np.ndarray:
    """Positive log-magnitude flux against a frequency-max-filtered earlier frame.

    Magnitudes are normalized by the global maximum first, so the result does
    not depend on the overall gain.
    """
    mag = np.abs(omni)
    peak = mag.max() if mag.size else 0.0
    if not peak > 0:
        return np.zeros(mag.shape[0])
    s = np.log10(1.0 + log_gain * mag / peak)
    ref = ndimage.maximum_filter1d(s, size=max_bins, axis=1, mode="nearest")
    d = np.zeros(mag.shape[0])
    if lag < mag.shape[0]:
        d[lag:] = np.clip(s[lag:] - ref[:-lag], 0.0, None).sum(axis=1)
    return d


def pick_peaks(flux, pre_max: int, post_max: int, pre_avg: int, post_avg: int, combine: int,
               delta: float) -> list:
    """Frames that are local flux maxima above a moving-average threshold.

    `delta` is an absolute offset over the local mean.  Successive onsets
    closer than `combine` frames are merged into the first.
    """
    flux = np.asarray(flux, dtype=float)
    n = flux.size
    out, last = [], -np.inf
    for t in range(n):
        if not flux[t] > 0:
            continue
        lo, hi = max(0, t - pre_max), min(n, t + post_max + 1)
        if flux[t] < flux[lo:hi].max():
            continue
        lo, hi = max(0, t - pre_avg), min(n, t + post_avg + 1)
        if flux[t] < flux[lo:hi].mean() + delta:
            continue
        if t - last <= combine:
            continue
        out.append(t)
        last = t
    return out


def bin_frequencies(win: int, fs: float) -> np.ndarray:
    return np.fft.rfftfreq(win, 1.0 / fs)


def select_bins(omni, fs: float, config: LocalizerConfig = LocalizerConfig()) -> TfSelection:
    """Onset frames of the channel average and their high-energy in-band bins."""
    omni = np.asarray(omni)
    cfg = config
    frames_per_s = fs / cfg.hop
    lag = cfg.onset_lag if cfg.onset_lag is not None else max(1, cfg.win // (2 * cfg.hop))
    flux = spectral_flux(omni, lag, cfg.onset_max_bins, cfg.log_gain)
    sel = TfSelection([], [], cfg.f_lo, cfg.f_hi, cfg.energy_quantile, cfg.onset_delta)
    if not flux.max(initial=0.0) > 0:
        return sel

    def nfr(sec):
        return max(0, int(round(sec * frames_per_s)))

    onsets = pick_peaks(flux, nfr(cfg.onset_pre_max), nfr(cfg.onset_post_max), nfr(cfg.onset_pre_avg),
                        nfr(cfg.onset_post_avg), nfr(cfg.onset_combine), cfg.onset_delta * flux.max())
    freqs = bin_frequencies(cfg.win, fs)
    band = np.flatnonzero((freqs >= cfg.f_lo) & (freqs <= cfg.f_hi))
    bins = []
    for t in onsets:
        e = np.abs(omni[t, band]) ** 2
        total = e.sum()
        if not total > 0:
            continue
        e = e / total
        thr = e.mean() if cfg.energy_quantile is None else np.quantile(e, cfg.energy_quantile)
        bins.extend((int(t), int(k)) for k in band[e > thr])
    sel.onset_frames = [int(t) for t in onsets]
    sel.bins = sorted(bins)
    return sel


# --------------------------------------------------------------------------- #
# Localization
# --------------------------------------------------------------------------- #

def bin_seed(seed: int, frame: int, k: int) -> int:
    """Refinement seed of one bin, independent of processing order."""
    return int(np.random.SeedSequence([seed, frame, k]).generate_state(1)[0])


def _load_cache(config: LocalizerConfig, cache: CrossDensityCache | None) -> CrossDensityCache:
    if cache is not None:
        if cache.order != config.order or cache.max_level < config.max_level:
            raise ValueError("cross-density cache does not cover the configured order and level")
        return cache
    return cd_cache(max(config.max_level, config.cast_level), config.order, config.sub_depth,
                    path=config.cache_path)


def bin_maps(spectra, selection: TfSelection, geometry: ArrayGeometry, fs: float,
             config: LocalizerConfig, cache: CrossDensityCache):
    """Refined SRPD map of every selected bin, in selection order."""
    order = config.order
    if geometry.max_order < order:
        raise ValueError(f"geometry supports order {geometry.max_order}, config asks for {order}")
    T = shd_matrix(geometry)[: (order + 1) ** 2]
    freqs = bin_frequencies(config.win, fs)
    out = []
    for t, kb in selection.bins:
        k = 2 * np.pi * freqs[kb] / config.c
        coeffs = T @ spectra[:, t, kb]
        sv = coeffs / equalizer(order, k * geometry.radius_m)
        policy = RefinementPolicy(config.max_level, bin_seed(config.seed, t, kb), 0, config.entropy_scope)
        out.append(refine(sv, cache, policy, bin_id=(t, kb)))
    return out


def localize(signals, geometry: ArrayGeometry, config: LocalizerConfig = LocalizerConfig(),
             fs: float = 48000.0, cache: CrossDensityCache | None = None,
             keep_maps: bool = False) -> LocalizationResult:
    """Directions and count of the sources in a multichannel recording."""
    signals = np.atleast_2d(np.asarray(signals, dtype=float))
    if signals.shape[0] != geometry.n_mics:
        raise ValueError(f"{signals.shape[0]} channels but the geometry has {geometry.n_mics} sensors")
    spectra = stft(signals, config.win, config.hop)
    selection = select_bins(omni_component(spectra), fs, config)
    if selection.empty:
        return LocalizationResult([], selection, np.zeros((0, 3)))
    cache = _load_cache(config, cache)
    maps = bin_maps(spectra, selection, geometry, fs, config, cache)
    cents = []
    for m in maps:
        if m.silent:
            continue
        cents.extend(c.centroid for c in nnl_label(m, min_size=config.min_cluster_size))
    cents = np.array(cents).reshape(-1, 3)
    doas = post_process(cents, config) if len(cents) else []
    return LocalizationResult(doas, selection, cents, len(maps), sum(m.evaluations for m in maps),
                              maps if keep_maps else [])


# --------------------------------------------------------------------------- #
# Histogram vote
# --------------------------------------------------------------------------- #

def centroid_histogram(centroids) -> np.ndarray:
    """180 x 360 counts of centroids on a 1-degree (inclination, azimuth) grid."""
    v = np.asarray(centroids, dtype=float).reshape(-1, 3)
    th, ph = to_angles(v)
    i = np.clip(np.floor(np.degrees(th)).astype(int), 0, 179)
    j = np.mod(np.floor(np.degrees(ph)).astype(int), 360)
    h = np.zeros((180, 360))
    np.add.at(h, (i, j), 1.0)
    return h


def smooth_histogram(hist, sigma: float = 1.0) -> np.ndarray:
    """Drop single counts, then 3x3 median and 3x3 Gaussian filtering.

    Azimuth wraps around; inclination is padded by edge replication.
    """
    h = np.where(np.asarray(hist) <= 1, 0.0, hist)
    pad = np.pad(h, ((1, 1), (0, 0)), mode="edge")
    pad = np.pad(pad, ((0, 0), (1, 1)), mode="wrap")
    h = ndimage.median_filter(pad, size=3, mode="nearest")[1:-1, 1:-1]
    # truncate keeps the Gaussian kernel at 3 x 3
    return ndimage.gaussian_filter(h, sigma, mode=("nearest", "wrap"), truncate=1.0 / sigma)


def cast_to_healpix(hist, level: int) -> SrpdMap:
    """Accumulate histogram mass into the pixels containing each cell centre."""
    th = np.radians(np.arange(180) + 0.5)
    ph = np.radians(np.arange(360) + 0.5)
    T, P = np.meshgrid(th, ph, indexing="ij")
    pix = hp.pix_containing(level, T.ravel(), P.ravel())
    vals = np.bincount(pix, weights=np.asarray(hist, dtype=float).ravel(), minlength=hp.npix(level))
    return SrpdMap.uniform(level, vals)


def post_process(centroids, config: LocalizerConfig = LocalizerConfig()) -> list:
    """Final DOAs from the centroids of all bins."""
    cents = np.asarray(centroids, dtype=float).reshape(-1, 3)
    if cents.shape[0] == 0:
        return []
    raw = centroid_histogram(cents)
    smooth = smooth_histogram(raw, config.hist_sigma)
    if not smooth.max() > 0:
        return []
    grid = cast_to_healpix(smooth, config.cast_level)
    out = []
    for cl in nnl_label(grid):
        # support: centroids that fall into the cluster's pixels
        members = {n.index for n in cl.members}
        pix = hp.vec2pix(config.cast_level, cents)
        support = int(np.isin(pix, list(members)).sum())
        out.append(DoaEstimate(cl.centroid, support))
    return out
