import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sphloc import healpix as hp
from sphloc.higrid import (DegenerateMapError, full_grid, RefinementPolicy, SrpdMap, higrid_run, info_gain,
                           info_gain_incremental, spatial_entropy)
from sphloc.sph import PlaneWaveSource, ShdFrame, plane_wave_shd

K3K = 2 * np.pi * 3000 / 343
RA = 0.042
THREE_WAVES = [PlaneWaveSource(1.0, math.pi / 2, 3 * math.pi / 5), PlaneWaveSource(1.0, 2 * math.pi / 3, math.pi / 5),
        PlaneWaveSource(1.0, math.pi / 3, 9 * math.pi / 5)]


def assert_tiles(m: SrpdMap):
    """Leaves cover the finest level exactly once (no gaps, no ancestors)."""
    L = m.max_level
    cover = np.zeros(hp.npix(L), dtype=int)
    for l, i in zip(m.levels, m.indices):
        span = 4 ** (L - l)
        cover[i * span:(i + 1) * span] += 1
    assert np.all(cover == 1)
    assert m.areas.sum() == pytest.approx(4 * math.pi, abs=1e-12)


# -- entropy ----------------------------------------------------------------- #

def test_uniform_entropy():
    assert spatial_entropy(np.full(48, 3.0), np.full(48, hp.pix_area(1))) == pytest.approx(math.log(4 * math.pi))


def test_single_leaf_entropy():
    a = hp.pix_area(2)
    v = np.zeros(192)
    v[17] = 5.0
    assert spatial_entropy(v, np.full(192, a)) == pytest.approx(math.log(a))
    assert math.log(a) < 0


def test_two_leaf_hand_value():
    a1, a2 = 4 * math.pi / 48, 4 * math.pi / 192
    expect = -(0.9 * math.log(0.9 / a1) + 0.1 * math.log(0.1 / a2))
    assert spatial_entropy([9.0, 1.0], [a1, a2]) == pytest.approx(expect, rel=1e-14)


def test_degenerate_entropy():
    with pytest.raises(DegenerateMapError):
        spatial_entropy(np.zeros(4), np.ones(4))


def test_info_gain_equal_children_two_evaluations():
    areas = np.full(12, hp.pix_area(0))
    vals = np.arange(1.0, 13.0)
    g = info_gain(vals, areas, 4, [vals[4]] * 4)
    before = spatial_entropy(vals, areas)
    after = spatial_entropy(np.r_[np.delete(vals, 4), [vals[4]] * 4],
                            np.r_[np.delete(areas, 4), [areas[4] / 4] * 4])
    assert g == pytest.approx(before - after, abs=1e-14)
    # the quadrupled mass makes the node more dominant, so the value is not zero
    assert g != 0


def test_info_gain_concentrated_beats_equal():
    areas = np.full(12, hp.pix_area(0))
    vals = np.linspace(1.0, 2.0, 12)
    p = vals[3]
    eq = info_gain(vals, areas, 3, [p, p, p, p])
    conc = info_gain(vals, areas, 3, [4 * p - 3e-3, 1e-3, 1e-3, 1e-3])
    assert conc > eq


@settings(max_examples=200)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(2, 60))
def test_incremental_equals_full(seed, n):
    rng = np.random.default_rng(seed)
    vals = rng.exponential(size=n) * (rng.random(n) > 0.2)
    vals[0] += 0.1
    areas = 4 * math.pi / (12 * 4.0 ** rng.integers(0, 4, n))
    leaf = int(rng.integers(0, n))
    kids = rng.exponential(size=4) * (rng.random(4) > 0.3)
    assert info_gain_incremental(vals, areas, leaf, kids) == pytest.approx(
        info_gain(vals, areas, leaf, kids), abs=1e-12)


# -- refinement -------------------------------------------------------------- #

def three_wave_frame():
    return plane_wave_shd(THREE_WAVES, K3K, 4, RA)


@pytest.mark.parametrize("scope", ["frontier", "partition"])
def test_map_tiles_and_is_nonnegative(cache4, scope):
    m = higrid_run(three_wave_frame(), cache4, RefinementPolicy(4, 3, entropy_scope=scope))
    assert_tiles(m)
    assert m.values.min() >= 0
    assert len(m.history) == 5 and m.history[-1] == len(m)


def test_deterministic(cache3):
    a = higrid_run(three_wave_frame(), cache3, RefinementPolicy(3, 11))
    b = higrid_run(three_wave_frame(), cache3, RefinementPolicy(3, 11))
    assert a.to_records() == b.to_records() and a.evaluations == b.evaluations


def test_evaluation_bound(cache4):
    # initial grid plus four children per visited node never exceeds 12 + 4 * (12 + 48 + 192 + 768)
    for seed in range(5):
        m = higrid_run(three_wave_frame(), cache4, RefinementPolicy(4, seed))
        assert m.evaluations <= 12 + 4 * sum(hp.npix(l) for l in range(4))
        assert m.evaluations < hp.npix(4)


@pytest.mark.parametrize("seed", range(4))
def test_three_wave_doas_inside_finest_leaves(cache4, seed):
    m = higrid_run(three_wave_frame(), cache4, RefinementPolicy(4, seed))
    finest = set(m.indices[m.levels == 4].tolist())
    for s in THREE_WAVES:
        assert hp.pix_containing(4, s.theta, s.phi) in finest


def test_single_wave_max_leaf_contains_doa(cache3):
    th, ph = hp.pix_center(3, 421)
    m = higrid_run(plane_wave_shd([PlaneWaveSource(1.0, float(th), float(ph))], K3K, 4, RA), cache3,
                   RefinementPolicy(3, 0))
    best = int(np.argmax(m.values))
    assert m.levels[best] == 3 and m.indices[best] == 421


def test_partition_scope_never_raises_entropy(cache3):
    frame = three_wave_frame()
    m = higrid_run(frame, cache3, RefinementPolicy(3, 0, entropy_scope="partition"))
    init = full_grid(frame, cache3, 0)
    assert spatial_entropy(m.values, m.areas) <= spatial_entropy(init.values, init.areas) + 1e-12


def test_silent_frame(cache3):
    m = higrid_run(ShdFrame(np.zeros(25), K3K, 4), cache3, RefinementPolicy(3))
    assert m.silent and len(m) == 12 and np.all(m.values == 0)


def test_start_level_one(cache3):
    m = higrid_run(three_wave_frame(), cache3, RefinementPolicy(3, 0, start_level=1))
    assert_tiles(m)
    assert m.levels.min() >= 1 and m.history[0] == 48


def test_policy_validation(cache3):
    with pytest.raises(ValueError):
        RefinementPolicy(0)
    with pytest.raises(ValueError):
        RefinementPolicy(3, entropy_scope="global")
    with pytest.raises(ValueError):
        higrid_run(three_wave_frame(), cache3, RefinementPolicy(4))


def test_records_round_trip(cache3):
    m = higrid_run(three_wave_frame(), cache3, RefinementPolicy(3, 1))
    r = SrpdMap.from_records(m.to_records(), max_level=3)
    assert np.array_equal(r.values, m.values) and np.array_equal(r.levels, m.levels)
