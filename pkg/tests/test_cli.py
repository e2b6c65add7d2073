import json
import math
import subprocess
import sys

import numpy as np
import pytest
from scipy.io import wavfile

from sphloc.cli import build_parser, main

SPEECH2 = {"random": {"kind": "speech", "n_sources": 2, "snr_db": 30.0}}


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cache = str(d / "cd3.npz")
    assert main(["cache-build", "--out", cache, "--max-level", "3"]) == 0
    scene = write(d / "scene.json", SPEECH2)
    wav = str(d / "two.wav")
    assert main(["simulate", "--scene", scene, "--out", wav, "--seed", "3"]) == 0
    return d, cache, wav


def test_simulate_outputs(work):
    d, _, wav = work
    fs, x = wavfile.read(wav)
    assert fs == 48000 and x.dtype == np.float32 and x.shape[1] == 32
    truth = json.loads((d / "two.wav.json").read_text())
    assert truth["seed"] == 3 and truth["n_sources"] == 2 and len(truth["doas"]) == 2


def test_simulate_one_source(tmp_path):
    scene = {"sources": [{"theta": 1.0, "phi": 2.0, "signal": {"type": "tone", "freq": 3000.0}}],
             "duration": 0.1}
    out = tmp_path / "one.wav"
    assert main(["simulate", "--scene", write(tmp_path / "s.json", scene), "--out", str(out)]) == 0
    assert json.loads((tmp_path / "one.wav.json").read_text())["n_sources"] == 1


def test_simulate_infeasible(tmp_path, capsys):
    scene = write(tmp_path / "s.json", {"random": {"n_sources": 30, "min_sep": 1.5}})
    assert main(["simulate", "--scene", scene, "--out", str(tmp_path / "x.wav")]) == 2
    assert "min_sep" in capsys.readouterr().err


def test_localize_two_sources(work, tmp_path):
    d, cache, wav = work
    out = tmp_path / "doa.json"
    assert main(["localize", "--input", wav, "--out", str(out), "--cache", cache, "--seed", "9"]) == 0
    res = json.loads(out.read_text())
    assert res["n_sources"] == 2 and res["seed"] == 9


def test_localize_silent(tmp_path):
    wav = tmp_path / "silent.wav"
    wavfile.write(wav, 48000, np.zeros((8192, 32), dtype=np.float32))
    out = tmp_path / "doa.json"
    assert main(["localize", "--input", str(wav), "--out", str(out)]) == 3
    res = json.loads(out.read_text())
    assert res["doas"] == [] and res["empty_selection"] is True


def test_localize_channel_mismatch(tmp_path):
    wav = tmp_path / "four.wav"
    wavfile.write(wav, 48000, np.zeros((8192, 4), dtype=np.float32))
    assert main(["localize", "--input", str(wav), "--out", str(tmp_path / "o.json")]) == 2


def test_unknown_config_key(work, tmp_path, capsys):
    _, _, wav = work
    cfg = write(tmp_path / "c.json", {"win": 1024, "windw": 512})
    assert main(["localize", "--input", wav, "--out", str(tmp_path / "o.json"), "--config", cfg]) == 2
    assert "windw" in capsys.readouterr().err


def test_flags_override_config(work, tmp_path):
    _, cache, wav = work
    cfg = write(tmp_path / "c.json", {"seed": 1})
    out = tmp_path / "o.json"
    assert main(["localize", "--input", wav, "--out", str(out), "--config", cfg, "--seed", "5",
                 "--cache", cache]) == 0
    assert json.loads(out.read_text())["seed"] == 5
    assert main(["localize", "--input", wav, "--out", str(out), "--config", cfg, "--cache", cache]) == 0
    assert json.loads(out.read_text())["seed"] == 1


def test_map_mixed_levels(tmp_path):
    # three plane waves at 3 kHz as in the reference scene
    tone = {"type": "tone", "freq": 3000.0}
    scene = {"sources": [{"theta": math.pi / 2, "phi": 3 * math.pi / 5, "signal": tone},
                         {"theta": 2 * math.pi / 3, "phi": math.pi / 5, "signal": tone},
                         {"theta": math.pi / 3, "phi": 9 * math.pi / 5, "signal": tone}],
             "duration": 0.1}
    wav = tmp_path / "three.wav"
    assert main(["simulate", "--scene", write(tmp_path / "s.json", scene), "--out", str(wav)]) == 0
    out, plot = tmp_path / "map.json", tmp_path / "map.csv"
    assert main(["map", "--input", str(wav), "--out", str(out), "--plot", str(plot), "--freq", "3000",
                 "--frame", "20", "--max-level", "4"]) == 0
    m = json.loads(out.read_text())
    levels = {r["level"] for r in m["leaves"]}
    assert {1, 2, 3, 4} <= levels
    assert plot.read_text().count("\n") == len(m["leaves"]) + 1


def test_map_needs_a_bin(work, tmp_path):
    _, _, wav = work
    assert main(["map", "--input", wav, "--out", str(tmp_path / "m.json")]) == 2


def test_bench_rows(tmp_path):
    out = tmp_path / "b.json"
    assert main(["bench", "--out", str(out), "--levels", "1", "2", "3", "4", "--sources", "1",
                 "--reps", "2"]) == 0
    rows = json.loads(out.read_text())["rows"]
    assert len(rows) == 4 and all(r["time_ratio"] is None for r in rows)


def test_eval_batch(tmp_path):
    batch = write(tmp_path / "batch.json", {"random": {"n_trials": 10, "n_sources": 1, "duration": 0.3}})
    out = tmp_path / "r.json"
    assert main(["eval", "--batch", batch, "--out", str(out), "--max-level", "2"]) == 0
    rep = json.loads(out.read_text())
    assert len(rep["trials"]) == 10 and rep["summary"]["n_trials"] == 10


def test_help_lists_flags(capsys):
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    assert set(sub) == {"simulate", "localize", "map", "eval", "bench", "cache-build"}
    with pytest.raises(SystemExit) as exc:
        main(["localize", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--input", "--out", "--geometry", "--config", "--seed", "--win", "--hop", "--f-lo",
                 "--f-hi", "--max-level", "--onset-delta", "--sigma", "--c", "--cache"):
        assert flag in text


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "sphloc.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "sphloc" in r.stdout


# -- byte-identical reruns -------------------------------------------------- #

def run_twice(tmp_path, make_args, name):
    blobs = []
    for k in range(2):
        out = tmp_path / f"{k}_{name}"
        assert main(make_args(out)) in (0, 3)
        blobs.append(out.read_bytes())
    return blobs[0] == blobs[1]


def test_every_command_is_deterministic(work, tmp_path):
    d, cache, wav = work
    scene = write(tmp_path / "s.json", SPEECH2)
    batch = write(tmp_path / "b.json", {"random": {"n_trials": 2, "n_sources": 1, "duration": 0.3}})
    cases = {
        "sim.wav": lambda o: ["simulate", "--scene", scene, "--out", str(o), "--seed", "4"],
        "loc.json": lambda o: ["localize", "--input", wav, "--out", str(o), "--seed", "2", "--cache", cache],
        "map.json": lambda o: ["map", "--input", wav, "--out", str(o), "--freq", "4000", "--seed", "2",
                               "--cache", cache],
        "eval.json": lambda o: ["eval", "--batch", batch, "--out", str(o), "--seed", "2", "--cache", cache],
        "bench.json": lambda o: ["bench", "--out", str(o), "--levels", "1", "2", "--sources", "1", "3",
                                 "--reps", "3", "--seed", "2"],
        "cache.npz": lambda o: ["cache-build", "--out", str(o), "--max-level", "2"],
    }
    for name, make in cases.items():
        assert run_twice(tmp_path, make, name), name
    assert (tmp_path / "0_sim.wav.json").read_bytes() == (tmp_path / "1_sim.wav.json").read_bytes()
