"""Metrics, batch experiments, cost benchmarks and plot data."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq, linear_sum_assignment

from . import healpix as hp
from .higrid import RefinementPolicy, SrpdMap, refine
from .pipeline import LocalizerConfig, localize
from .scene import SceneSpec, monochromatic_sources, synth_time_signals
from .sph import ArrayGeometry, plane_wave_shd, sh_matrix
from .srpd import CrossDensityCache, steering_vector

EXTREME_ERROR = math.pi / 4


def angular_distance(u, v) -> np.ndarray:
    """Great-circle angle in radians between unit vectors (broadcasting)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    c = np.sum(u * v, axis=-1) / (np.linalg.norm(u, axis=-1) * np.linalg.norm(v, axis=-1))
    # arctan2 form stays accurate near 0 and pi
    s = np.linalg.norm(np.cross(u, v), axis=-1) / (np.linalg.norm(u, axis=-1) * np.linalg.norm(v, axis=-1))
    return np.arctan2(s, c)


def hungarian_assign(est, truth) -> list:
    """Minimum total great-circle assignment of estimates to true directions.

    Returns (estimate index, truth index) pairs, min(|est|, |truth|) of them,
    sorted by truth index.
    """
    est = np.asarray(est, dtype=float).reshape(-1, 3)
    truth = np.asarray(truth, dtype=float).reshape(-1, 3)
    if len(est) == 0 or len(truth) == 0:
        raise ValueError("both direction lists must be nonempty")
    cost = angular_distance(est[:, None, :], truth[None, :, :])
    r, c = linear_sum_assignment(cost)
    return sorted(zip(r.tolist(), c.tolist()), key=lambda p: p[1])


@dataclass
class DoaErrors:
    pairs: list
    errors_deg: list
    extreme: list

    @property
    def mean_deg(self) -> float:
        ok = [e for e, x in zip(self.errors_deg, self.extreme) if not x]
        return float(np.mean(ok)) if ok else float("nan")


def doa_error(est, truth, pairs=None) -> DoaErrors:
    """Per-pair angular errors in degrees; errors above pi/4 are flagged extreme."""
    est = np.asarray(est, dtype=float).reshape(-1, 3)
    truth = np.asarray(truth, dtype=float).reshape(-1, 3)
    if pairs is None:
        pairs = hungarian_assign(est, truth)
    errs = [float(angular_distance(est[i], truth[j])) for i, j in pairs]
    return DoaErrors(list(pairs), [math.degrees(e) for e in errs], [e > EXTREME_ERROR for e in errs])


# --------------------------------------------------------------------------- #
# Batch experiments
# --------------------------------------------------------------------------- #

@dataclass
class TrialResult:
    trial: int
    seed: int
    s_act: int
    s_est: int = 0
    errors_deg: list = field(default_factory=list)
    extreme: list = field(default_factory=list)
    estimates: list = field(default_factory=list)
    failed: bool = False
    message: str = ""

    @property
    def delta_s(self) -> int:
        return self.s_est - self.s_act


@dataclass
class EvalReport:
    trials: list

    @property
    def completed(self) -> list:
        return [t for t in self.trials if not t.failed]

    @property
    def errors_deg(self) -> list:
        return [e for t in self.completed for e, x in zip(t.errors_deg, t.extreme) if not x]

    @property
    def mean_error_deg(self) -> float:
        e = self.errors_deg
        return float(np.mean(e)) if e else float("nan")

    @property
    def s_avg(self) -> float:
        c = self.completed
        return float(np.mean([t.s_est for t in c])) if c else float("nan")

    @property
    def negative_disparity(self) -> int:
        return sum(1 for t in self.completed if t.delta_s < 0)

    @property
    def extreme_count(self) -> int:
        return sum(sum(t.extreme) for t in self.completed)

    @property
    def failed_count(self) -> int:
        return sum(1 for t in self.trials if t.failed)

    def summary(self) -> dict:
        return {"n_trials": len(self.trials), "failed": self.failed_count,
                "mean_error_deg": self.mean_error_deg, "s_avg": self.s_avg,
                "negative_disparity": self.negative_disparity, "extreme_values": self.extreme_count}

    def to_dict(self) -> dict:
        trials = []
        for t in self.trials:
            d = asdict(t)
            d["delta_s"] = t.delta_s
            trials.append(d)
        return {"summary": self.summary(), "trials": trials}


def run_trial(trial: int, scene: SceneSpec, geometry: ArrayGeometry, config: LocalizerConfig,
              cache: CrossDensityCache | None = None) -> TrialResult:
    """Simulate one scene, localize it and score the estimates."""
    truth = scene.directions()
    res = TrialResult(trial, scene.seed, len(truth))
    try:
        x = synth_time_signals(scene, geometry)
        out = localize(x, geometry, config, fs=scene.fs, cache=cache)
    except (ValueError, ArithmeticError) as exc:
        res.failed, res.message = True, f"{type(exc).__name__}: {exc}"
        return res
    if out.selection.empty:
        res.failed, res.message = True, "no time-frequency bins selected"
        return res
    est = np.array([d.direction for d in out.doas]).reshape(-1, 3)
    res.s_est = len(est)
    res.estimates = [d.to_dict() for d in out.doas]
    if len(est) and len(truth):
        errs = doa_error(est, truth)
        res.errors_deg, res.extreme = errs.errors_deg, errs.extreme
    return res


_WORKER = {}


def _init_worker(geometry, config):
    _WORKER["geometry"], _WORKER["config"] = geometry, config


def _worker_trial(args):
    trial, scene = args
    return run_trial(trial, scene, _WORKER["geometry"], _WORKER["config"])


def run_experiment(scenes, geometry: ArrayGeometry, config: LocalizerConfig = LocalizerConfig(),
                   cache: CrossDensityCache | None = None, jobs: int = 1) -> EvalReport:
    """Score a batch of scenes.  Failed trials are recorded, not raised."""
    scenes = list(scenes)
    if jobs > 1 and len(scenes) > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(geometry, config)) as ex:
            trials = list(ex.map(_worker_trial, enumerate(scenes)))
    else:
        trials = [run_trial(i, s, geometry, config, cache) for i, s in enumerate(scenes)]
    trials.sort(key=lambda t: t.trial)
    return EvalReport(trials)


# --------------------------------------------------------------------------- #
# Cost benchmark
# --------------------------------------------------------------------------- #

@dataclass
class BenchRow:
    level: int
    n_sources: int
    n_diffuse: int
    reps: int
    higrid_evals: float
    higrid_evals_std: float
    full_evals: int
    count_ratio: float
    count_ratio_std: float
    time_higrid_s: float | None = None
    time_full_s: float | None = None
    time_ratio: float | None = None
    time_ratio_std: float | None = None


@dataclass
class BenchReport:
    rows: list
    seed: int
    freq: float

    def ratio(self, level: int, n_sources: int, n_diffuse: int = 0) -> float:
        for r in self.rows:
            if (r.level, r.n_sources, r.n_diffuse) == (level, n_sources, n_diffuse):
                return r.count_ratio
        raise KeyError((level, n_sources, n_diffuse))

    def to_dict(self) -> dict:
        return {"seed": self.seed, "freq": self.freq, "rows": [asdict(r) for r in self.rows]}


def srp_full_grid(sv: np.ndarray, level: int, Y: np.ndarray | None = None) -> np.ndarray:
    """Baseline: |y_N|^2 at every pixel centre of one level."""
    if Y is None:
        th, ph = hp.pix_center(level, np.arange(hp.npix(level)))
        Y = sh_matrix(int(round(math.sqrt(sv.size))) - 1, th, ph)
    return np.abs(Y @ sv) ** 2


def bench_cost(cache: CrossDensityCache, levels=(1, 2, 3, 4), source_counts=(1,), reps: int = 50,
               seed: int = 0, freq: float = 3000.0, r_a: float = 0.042, c: float = 343.0,
               n_diffuse: int = 0, min_sep: float = math.pi / 4, timing: bool = False) -> BenchReport:
    """Adaptive refinement against a full uniform grid on identical monochromatic frames.

    The count ratio is (SRPD evaluations of the refinement) / (pixels of the full
    grid).  Wall-clock ratios against the centre-point SRP scan are only
    measured when `timing` is set, since they are not reproducible.
    """
    k = 2 * np.pi * freq / c
    rows = []
    for S in source_counts:
        frames = []
        for rep in range(reps):
            srcs = monochromatic_sources(S, int(np.random.SeedSequence([seed, S, n_diffuse, rep])
                                                .generate_state(1)[0]), min_sep, n_diffuse)
            frames.append(steering_vector(plane_wave_shd(srcs, k, cache.order, r_a), r_a))
        for level in levels:
            if level > cache.max_level:
                raise ValueError(f"cache covers levels up to {cache.max_level}")
            full = hp.npix(level)
            evals, t_h, t_f = [], [], []
            th, ph = hp.pix_center(level, np.arange(full))
            Y = sh_matrix(cache.order, th, ph)
            for rep, sv in enumerate(frames):
                policy = RefinementPolicy(level, seed + rep)
                t0 = time.perf_counter()
                m = refine(sv, cache, policy)
                t1 = time.perf_counter()
                if timing:
                    srp_full_grid(sv, level, Y)
                    t_f.append(time.perf_counter() - t1)
                    t_h.append(t1 - t0)
                evals.append(m.evaluations)
            ev = np.array(evals, dtype=float)
            row = BenchRow(level, S, n_diffuse, reps, float(ev.mean()), float(ev.std()), full,
                           float(ev.mean() / full), float(ev.std() / full))
            if timing:
                ratios = np.array(t_h) / np.array(t_f)
                row.time_higrid_s, row.time_full_s = float(np.mean(t_h)), float(np.mean(t_f))
                row.time_ratio, row.time_ratio_std = float(np.mean(t_h) / np.mean(t_f)), float(ratios.std())
            rows.append(row)
    return BenchReport(rows, seed, freq)


# --------------------------------------------------------------------------- #
# Plot data
# --------------------------------------------------------------------------- #

def mollweide(theta, phi):
    """Mollweide coordinates of directions.

    Latitude is pi/2 - theta and longitude phi - pi, so (theta, phi) =
    (pi/2, pi) maps to the origin; x spans [-2 sqrt 2, 2 sqrt 2].
    """
    lat = np.pi / 2 - np.asarray(theta, dtype=float)
    lon = np.asarray(phi, dtype=float) - np.pi
    lon = np.mod(lon + np.pi, 2 * np.pi) - np.pi
    target = np.pi * np.sin(lat)
    psi = np.empty_like(lat)
    for i, (t, la) in enumerate(zip(target.ravel(), lat.ravel())):
        if abs(abs(la) - np.pi / 2) < 1e-12:
            psi.flat[i] = math.copysign(np.pi / 2, la)
        else:
            psi.flat[i] = brentq(lambda a: 2 * a + math.sin(2 * a) - t, -np.pi / 2, np.pi / 2, xtol=1e-14)
    x = 2 * math.sqrt(2) / np.pi * lon * np.cos(psi)
    y = math.sqrt(2) * np.sin(psi)
    return x, y


def plot_rows(obj) -> list:
    """(theta, phi, value, x, y, level, index) rows for a map or a histogram."""
    if isinstance(obj, SrpdMap):
        th, ph = _centres(obj)
        vals, lv, ix = obj.values, obj.levels, obj.indices
    else:
        h = np.asarray(obj, dtype=float)
        if h.shape != (180, 360):
            raise TypeError("expected an SrpdMap or a 180 x 360 histogram")
        T, P = np.meshgrid(np.radians(np.arange(180) + 0.5), np.radians(np.arange(360) + 0.5), indexing="ij")
        th, ph, vals = T.ravel(), P.ravel(), h.ravel()
        lv = np.full(vals.size, -1)
        ix = np.arange(vals.size)
    x, y = mollweide(th, ph)
    return [{"theta": float(a), "phi": float(b), "value": float(v), "x": float(xx), "y": float(yy),
             "level": int(l), "index": int(i)}
            for a, b, v, xx, yy, l, i in zip(th, ph, vals, x, y, lv, ix)]


def _centres(m: SrpdMap):
    th = np.empty(len(m))
    ph = np.empty(len(m))
    for lvl in np.unique(m.levels):
        sel = m.levels == lvl
        th[sel], ph[sel] = hp.pix_center(int(lvl), m.indices[sel])
    return th, ph


def write_atomic(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def emit_plot_data(obj, path, fmt: str | None = None) -> int:
    """Write plot rows of a map, histogram or report as JSON or CSV.

    Reports (anything with `to_dict`) are written as JSON verbatim.  Returns
    the number of rows written.
    """
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix == ".csv" else "json")
    if hasattr(obj, "to_dict") and not isinstance(obj, SrpdMap):
        write_atomic(path, json.dumps(obj.to_dict(), indent=2, sort_keys=True) + "\n")
        return 1
    rows = plot_rows(obj)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        write_atomic(path, buf.getvalue())
    else:
        write_atomic(path, json.dumps({"rows": rows}, indent=1) + "\n")
    return len(rows)


def read_plot_data(path) -> list:
    path = Path(path)
    if path.suffix == ".csv":
        with open(path, newline="") as fh:
            return [{k: (float(v) if k not in ("level", "index") else int(v)) for k, v in r.items()}
                    for r in csv.DictReader(fh)]
    return json.loads(path.read_text())["rows"]
