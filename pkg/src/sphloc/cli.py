"""Command-line interface.

Exit codes: 0 success, 2 usage or configuration error, 3 empty result,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .evaluate import bench_cost, emit_plot_data, run_experiment, write_atomic
from .higrid import RefinementPolicy, refine
from .pipeline import LocalizerConfig, bin_frequencies, localize, omni_component, stft
from .scene import (InfeasibleSceneError, SceneSpec, burst_scene, coherent_pair_scene, random_scenario,
                    synth_time_signals)
from .sph import ArrayGeometry, default_geometry, equalizer, load_geometry, shd_matrix, to_angles
from .srpd import DEFAULT_SUB_DEPTH, ENERGY_THRESHOLD, cd_cache

EXIT_OK, EXIT_USAGE, EXIT_EMPTY, EXIT_NUMERICAL = 0, 2, 3, 4

PIPELINE_KEYS = {f.name for f in fields(LocalizerConfig)}
COMMAND_KEYS = {
    "simulate": {"seed", "fs"},
    "localize": PIPELINE_KEYS,
    "map": PIPELINE_KEYS | {"frame", "freq_bin", "freq"},
    "eval": PIPELINE_KEYS | {"jobs"},
    "bench": {"levels", "sources", "reps", "seed", "freq", "n_diffuse", "order", "sub_depth",
              "timing", "cache_path", "min_sep"},
    "cache-build": {"max_level", "order", "sub_depth", "threshold"},
}


class UsageError(Exception):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None


def merge_config(command: str, config_path, flags: dict) -> dict:
    """Config file values overridden by explicitly given flags; unknown keys rejected."""
    allowed = COMMAND_KEYS[command]
    merged = _read_json(config_path) if config_path else {}
    if not isinstance(merged, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = sorted(set(merged) - allowed)
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
    merged.update({k: v for k, v in flags.items() if v is not None and k in allowed})
    return merged


def _localizer(cfg: dict) -> LocalizerConfig:
    try:
        return LocalizerConfig.from_dict({k: v for k, v in cfg.items() if k in PIPELINE_KEYS})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _geometry(path) -> ArrayGeometry:
    if path is None:
        return default_geometry()
    try:
        return load_geometry(path)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise UsageError(f"invalid geometry {path}: {exc}") from None


def _read_wav(path):
    from scipy.io import wavfile
    try:
        fs, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    return float(fs), data.T


def _write_wav(path, fs: float, signals) -> None:
    from scipy.io import wavfile
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        wavfile.write(fh, int(round(fs)), np.ascontiguousarray(np.asarray(signals, dtype=np.float32).T))
    tmp.replace(path)


def _scene_from_json(d: dict, seed) -> SceneSpec:
    """Explicit scene, or a generator ``{"random": {...}}``."""
    if "random" in d:
        g = dict(d["random"])
        kind = g.pop("kind", "tone")
        n = int(g.pop("n_sources"))
        min_sep = float(g.pop("min_sep", math.pi / 4))
        s = int(seed if seed is not None else g.pop("seed", 0))
        g.pop("seed", None)
        if kind == "speech":
            return burst_scene(n, min_sep, s, **g)
        if kind == "coherent":
            if n != 2:
                raise ValueError("a coherent scene has exactly 2 arrivals")
            return coherent_pair_scene(float(g.pop("separation", math.pi / 2)), s, **g)
        return random_scenario(n, min_sep, s, **g)
    if seed is not None:
        d = {**d, "seed": int(seed)}
    return SceneSpec.from_dict(d)


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #

def cmd_simulate(args) -> int:
    cfg = merge_config("simulate", args.config, {"seed": args.seed, "fs": args.fs})
    try:
        scene = _scene_from_json(_read_json(args.scene), cfg.get("seed"))
    except InfeasibleSceneError as exc:
        raise UsageError(f"infeasible scene, min_sep constraint cannot be met: {exc}") from None
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid scene: {exc}") from None
    if "fs" in cfg:
        scene.fs = float(cfg["fs"])
    geom = _geometry(args.geometry)
    x = synth_time_signals(scene, geom)
    _write_wav(args.out, scene.fs, x)
    th, ph = to_angles(scene.directions())
    truth = {"seed": scene.seed, "fs": scene.fs, "n_sources": int(np.size(th)),
             "doas": [{"theta_deg": math.degrees(t), "phi_deg": math.degrees(p)}
                      for t, p in zip(np.atleast_1d(th), np.atleast_1d(ph))],
             "scene": scene.to_dict()}
    write_atomic(Path(str(args.out) + ".json") if args.truth is None else args.truth, _dump(truth))
    return EXIT_OK


def cmd_localize(args) -> int:
    cfg = merge_config("localize", args.config, _pipeline_flags(args))
    lc = _localizer(cfg)
    geom = _geometry(args.geometry)
    fs, x = _read_wav(args.input)
    if x.shape[0] != geom.n_mics:
        raise UsageError(f"{args.input} has {x.shape[0]} channels, geometry has {geom.n_mics} sensors")
    res = localize(x, geom, lc, fs=fs)
    out = res.to_dict()
    out["seed"] = lc.seed
    write_atomic(args.out, _dump(out))
    if res.selection.empty:
        print("no time-frequency bins selected", file=sys.stderr)
        return EXIT_EMPTY
    return EXIT_OK


def cmd_map(args) -> int:
    cfg = merge_config("map", args.config, {**_pipeline_flags(args), "frame": args.frame,
                                            "freq_bin": args.freq_bin, "freq": args.freq})
    lc = _localizer(cfg)
    geom = _geometry(args.geometry)
    fs, x = _read_wav(args.input)
    if x.shape[0] != geom.n_mics:
        raise UsageError(f"{args.input} has {x.shape[0]} channels, geometry has {geom.n_mics} sensors")
    spectra = stft(x, lc.win, lc.hop)
    freqs = bin_frequencies(lc.win, fs)
    if cfg.get("freq_bin") is not None:
        kb = int(cfg["freq_bin"])
    elif cfg.get("freq") is not None:
        kb = int(np.argmin(np.abs(freqs - float(cfg["freq"]))))
    else:
        raise UsageError("map needs --freq-bin or --freq")
    if cfg.get("frame") is not None:
        t = int(cfg["frame"])
    else:
        # loudest frame of the chosen bin
        t = int(np.argmax(np.abs(omni_component(spectra)[:, kb])))
    if not (0 <= t < spectra.shape[1] and 0 <= kb < spectra.shape[2]):
        raise UsageError(f"bin ({t}, {kb}) outside the STFT of shape {spectra.shape[1:]}")
    cache = cd_cache(lc.max_level, lc.order, lc.sub_depth, path=lc.cache_path)
    k = 2 * np.pi * freqs[kb] / lc.c
    sv = (shd_matrix(geom)[: (lc.order + 1) ** 2] @ spectra[:, t, kb]) / equalizer(lc.order, k * geom.radius_m)
    m = refine(sv, cache, RefinementPolicy(lc.max_level, lc.seed, 0, lc.entropy_scope), bin_id=(t, kb))
    out = {"seed": lc.seed, "frame": t, "freq_bin": kb, "freq_hz": float(freqs[kb]),
           "max_level": m.max_level, "evaluations": m.evaluations, "history": m.history,
           "silent": m.silent, "leaves": m.to_records()}
    write_atomic(args.out, _dump(out))
    if args.plot:
        emit_plot_data(m, args.plot)
    if m.silent:
        return EXIT_EMPTY
    return EXIT_OK


def _batch_scenes(batch: dict) -> list:
    if "scenes" in batch:
        return [SceneSpec.from_dict(s) for s in batch["scenes"]]
    gen = dict(batch.get("random", {}))
    n_trials = int(gen.pop("n_trials", 10))
    n_sources = int(gen.pop("n_sources", 1))
    seed = int(gen.pop("seed", 0))
    min_sep = float(gen.pop("min_sep", math.pi / 4))
    return [burst_scene(n_sources, min_sep, seed + i, **gen) for i in range(n_trials)]


def cmd_eval(args) -> int:
    cfg = merge_config("eval", args.config, {**_pipeline_flags(args), "jobs": args.jobs})
    lc = _localizer(cfg)
    geom = _geometry(args.geometry)
    batch = _read_json(args.batch)
    try:
        scenes = _batch_scenes(batch)
    except InfeasibleSceneError as exc:
        raise UsageError(f"infeasible scene, min_sep constraint cannot be met: {exc}") from None
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid batch: {exc}") from None
    cache = cd_cache(lc.max_level, lc.order, lc.sub_depth, path=lc.cache_path)
    rep = run_experiment(scenes, geom, lc, cache=cache, jobs=int(cfg.get("jobs", 1)))
    out = rep.to_dict()
    out["seed"] = lc.seed
    write_atomic(args.out, _dump(out))
    return EXIT_OK


def cmd_bench(args) -> int:
    flags = {"levels": args.levels, "sources": args.sources, "reps": args.reps, "seed": args.seed,
             "freq": args.freq, "n_diffuse": args.n_diffuse, "timing": args.timing or None,
             "cache_path": args.cache}
    cfg = merge_config("bench", args.config, flags)
    levels = [int(v) for v in cfg.get("levels", [1, 2, 3, 4])]
    sources = [int(v) for v in cfg.get("sources", [1])]
    if not levels or min(levels) < 1 or max(levels) > 6:
        raise UsageError("levels must lie in 1..6")
    cache = cd_cache(max(levels), int(cfg.get("order", 4)), int(cfg.get("sub_depth", DEFAULT_SUB_DEPTH)),
                     path=cfg.get("cache_path"))
    try:
        rep = bench_cost(cache, levels, sources, int(cfg.get("reps", 50)), int(cfg.get("seed", 0)),
                         float(cfg.get("freq", 3000.0)), n_diffuse=int(cfg.get("n_diffuse", 0)),
                         min_sep=float(cfg.get("min_sep", math.pi / 4)), timing=bool(cfg.get("timing", False)))
    except InfeasibleSceneError as exc:
        raise UsageError(str(exc)) from None
    write_atomic(args.out, _dump(rep.to_dict()))
    return EXIT_OK


def cmd_cache_build(args) -> int:
    cfg = merge_config("cache-build", args.config, {"max_level": args.max_level, "order": args.order,
                                                    "sub_depth": args.sub_depth})
    lvl = int(cfg.get("max_level", 3))
    if not 0 <= lvl <= 6:
        raise UsageError("max_level must lie in 0..6")
    path = Path(args.out)
    if path.exists():
        path.unlink()
    cd_cache(lvl, int(cfg.get("order", 4)), int(cfg.get("sub_depth", DEFAULT_SUB_DEPTH)),
             float(cfg.get("threshold", ENERGY_THRESHOLD)), path=path)
    return EXIT_OK


# --------------------------------------------------------------------------- #
# Parser
# --------------------------------------------------------------------------- #

def _pipeline_flags(args) -> dict:
    return {"seed": args.seed, "win": args.win, "hop": args.hop, "f_lo": args.f_lo, "f_hi": args.f_hi,
            "max_level": args.max_level, "onset_delta": args.onset_delta, "hist_sigma": args.sigma,
            "c": args.c, "cache_path": args.cache}


def _add_pipeline_args(p):
    p.add_argument("--geometry", help="array geometry JSON (default: built-in 32-sensor layout)")
    p.add_argument("--config", help="run configuration JSON; explicit flags take precedence")
    p.add_argument("--seed", type=int, help="refinement seed (echoed into the output)")
    p.add_argument("--win", type=int, help="STFT window length in samples (power of two)")
    p.add_argument("--hop", type=int, help="STFT hop in samples")
    p.add_argument("--f-lo", type=float, help="lower band edge in Hz")
    p.add_argument("--f-hi", type=float, help="upper band edge in Hz")
    p.add_argument("--max-level", type=int, help="finest refinement level")
    p.add_argument("--onset-delta", type=float, help="onset threshold as a fraction of the peak flux")
    p.add_argument("--sigma", type=float, help="histogram Gaussian width in 1-degree cells")
    p.add_argument("--c", type=float, help="speed of sound in m/s")
    p.add_argument("--cache", help="cross-density cache file (built and saved if missing)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sphloc", description="Sound source localization with a rigid "
                                 "spherical microphone array.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="synthesize array signals for a scene")
    p.add_argument("--scene", required=True, help="scene JSON, explicit or {\"random\": {...}}")
    p.add_argument("--geometry", help="array geometry JSON")
    p.add_argument("--out", required=True, help="output WAV (float32)")
    p.add_argument("--truth", help="ground-truth JSON (default: <out>.json)")
    p.add_argument("--config", help="configuration JSON")
    p.add_argument("--seed", type=int, help="scene seed")
    p.add_argument("--fs", type=float, help="sampling rate in Hz")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("localize", help="estimate source directions from a recording")
    p.add_argument("--input", required=True, help="multichannel WAV")
    p.add_argument("--out", required=True, help="output DOA JSON")
    _add_pipeline_args(p)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("map", help="refined SRPD map of one time-frequency bin")
    p.add_argument("--input", required=True, help="multichannel WAV")
    p.add_argument("--out", required=True, help="output map JSON")
    p.add_argument("--plot", help="also write Mollweide plot data (.json or .csv)")
    p.add_argument("--frame", type=int, help="STFT frame (default: loudest frame of the bin)")
    p.add_argument("--freq-bin", type=int, help="STFT frequency bin")
    p.add_argument("--freq", type=float, help="frequency in Hz (nearest bin)")
    _add_pipeline_args(p)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("eval", help="run a batch of simulated trials and score them")
    p.add_argument("--batch", required=True, help="batch JSON: {\"scenes\": [...]} or {\"random\": {...}}")
    p.add_argument("--out", required=True, help="output report JSON")
    p.add_argument("--jobs", type=int, help="worker processes")
    _add_pipeline_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="evaluation counts of adaptive against full-grid maps")
    p.add_argument("--out", required=True, help="output report JSON")
    p.add_argument("--config", help="configuration JSON")
    p.add_argument("--levels", type=int, nargs="+", help="refinement levels")
    p.add_argument("--sources", type=int, nargs="+", help="numbers of unit plane waves")
    p.add_argument("--reps", type=int, help="repetitions per configuration")
    p.add_argument("--seed", type=int, help="base seed")
    p.add_argument("--freq", type=float, help="plane-wave frequency in Hz")
    p.add_argument("--n-diffuse", type=int, help="weak random plane waves added to every frame")
    p.add_argument("--timing", action="store_true", help="also record wall-clock times (not reproducible)")
    p.add_argument("--cache", help="cross-density cache file")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("cache-build", help="precompute cross-density matrices")
    p.add_argument("--out", required=True, help="cache file")
    p.add_argument("--config", help="configuration JSON")
    p.add_argument("--max-level", type=int, help="finest level (default 3)")
    p.add_argument("--order", type=int, help="spherical harmonic order (default 4)")
    p.add_argument("--sub-depth", type=int, help="quadrature depth below the finest level")
    p.set_defaults(func=cmd_cache_build)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ArithmeticError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
