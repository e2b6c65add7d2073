import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.polynomial import legendre as npleg
from scipy import special

from sphloc.sph import (ArrayGeometry, IllConditionedError, PlaneWaveSource, ShdFrame, acn,
                        assoc_legendre, default_geometry, equalizer, load_geometry, mode_strength,
                        mode_strengths, plane_wave_shd, regular_beampattern, save_geometry,
                        sh_matrix, shd_from_mics, sph_harmonic, srp_pwd, surface_mode_strength,
                        truncated_icosahedron_layout, unit_vector)

K3K = 2 * np.pi * 3000 / 343
RA = 0.042


# -- oracles ---------------------------------------------------------------- #

def legendre_rodrigues(n, m, x):
    """P_n^m via differentiating the Legendre polynomial (Condon-Shortley phase)."""
    c = np.zeros(n + 1)
    c[n] = 1.0
    d = npleg.legder(c, m) if m else c
    return (-1) ** m * (1 - x * x) ** (m / 2) * npleg.legval(x, d)


def jn_series(n, x, terms=40):
    """Spherical Bessel j_n by its power series."""
    s = 0.0
    for k in range(terms):
        s += (-1) ** k * (x * x / 4) ** k / (math.factorial(k) * special.gamma(n + k + 1.5))
    return math.sqrt(math.pi) / 2 * (x / 2) ** n * s


def jn_series_deriv(n, x, h=1e-6):
    return (jn_series(n, x + h) - jn_series(n, x - h)) / (2 * h)


def yn_recurrence(n, x):
    """Spherical Neumann y_n by upward recurrence from closed forms."""
    y0, y1 = -math.cos(x) / x, -math.cos(x) / x ** 2 - math.sin(x) / x
    if n == 0:
        return y0
    for k in range(1, n):
        y0, y1 = y1, (2 * k + 1) / x * y1 - y0
    return y1


# -- Legendre and harmonics ------------------------------------------------- #

def test_assoc_legendre_trivial_values():
    assert assoc_legendre(0, 0, 0.3) == 1.0
    assert assoc_legendre(1, 0, 0.5) == 0.5


@pytest.mark.parametrize("n", range(7))
def test_assoc_legendre_matches_rodrigues(n):
    x = np.linspace(-1, 1, 41)
    for m in range(n + 1):
        np.testing.assert_allclose(assoc_legendre(n, m, x), legendre_rodrigues(n, m, x),
                                   rtol=1e-12, atol=1e-12)


def test_assoc_legendre_2_1_half():
    # -3 x sqrt(1 - x^2)
    assert assoc_legendre(2, 1, 0.5) == pytest.approx(-3 * 0.5 * math.sqrt(0.75), rel=1e-14)


@pytest.mark.parametrize("args", [(2, 3, 0.1), (2, 1, 1.5), (-1, 0, 0.0)])
def test_assoc_legendre_domain_errors(args):
    with pytest.raises(ValueError):
        assoc_legendre(*args)


def test_zeroth_harmonic_constant():
    assert sph_harmonic(0, 0, 0.7, 2.1) == pytest.approx(1 / math.sqrt(4 * math.pi))
    assert abs(1 / math.sqrt(4 * math.pi) - 0.2820948) < 1e-7


@given(n=st.integers(0, 6), data=st.data(), theta=st.floats(0, math.pi), phi=st.floats(0, 2 * math.pi))
def test_conjugation_symmetry(n, data, theta, phi):
    m = data.draw(st.integers(0, n))
    lhs = sph_harmonic(n, -m, theta, phi)
    rhs = (-1) ** m * np.conj(sph_harmonic(n, m, theta, phi))
    assert abs(lhs - rhs) < 1e-12


def test_harmonic_matches_scipy():
    th, ph = 1.0, 2.0
    for n in range(5):
        for m in range(-n, n + 1):
            ref = special.sph_harm_y(n, m, th, ph)
            assert abs(sph_harmonic(n, m, th, ph) - ref) < 1e-13


def test_sh_matrix_matches_scalar_harmonic(rng):
    th = rng.uniform(0, np.pi, 20)
    ph = rng.uniform(0, 2 * np.pi, 20)
    Y = sh_matrix(6, th, ph)
    for n in range(7):
        for m in range(-n, n + 1):
            np.testing.assert_allclose(Y[:, acn(n, m)], sph_harmonic(n, m, th, ph), atol=1e-13)


def test_orthonormality_dense_quadrature():
    # Gauss-Legendre in cos(theta) times uniform azimuth integrates degree < 2*20 exactly
    x, w = npleg.leggauss(20)
    ph = np.arange(40) * 2 * np.pi / 40
    T, P = np.meshgrid(np.arccos(x), ph, indexing="ij")
    W = np.outer(w, np.full(40, 2 * np.pi / 40)).ravel()
    Y = sh_matrix(4, T.ravel(), P.ravel())
    G = (Y.conj().T * W) @ Y
    assert np.abs(G - np.eye(25)).max() < 1e-8


def test_array_layout_is_exact_quadrature(geom):
    Y = sh_matrix(4, geom.theta, geom.phi)
    G = (Y.conj().T * geom.weights) @ Y
    assert np.abs(G - np.eye(25)).max() < 1e-12
    assert geom.weights.sum() == pytest.approx(4 * np.pi)


# -- radial functions ------------------------------------------------------- #

def test_mode_strength_order0_closed_form():
    x = K3K * RA
    j0 = math.sin(x) / x
    dj0 = math.cos(x) / x - math.sin(x) / x ** 2
    h0 = 1j * np.exp(-1j * x) / x
    dh0 = np.exp(-1j * x) / x - 1j * np.exp(-1j * x) / x ** 2  # d/dx of i e^{-ix}/x
    expect = j0 - dj0 / dh0 * h0
    assert abs(mode_strength(0, K3K, RA, RA) - expect) < 1e-12


@pytest.mark.parametrize("n", range(6))
def test_mode_strength_against_series_oracle(n):
    x = K3K * RA
    j, dj = jn_series(n, x), jn_series_deriv(n, x)
    y = yn_recurrence(n, x)
    dy = (yn_recurrence(n, x + 1e-6) - yn_recurrence(n, x - 1e-6)) / 2e-6
    h, dh = j - 1j * y, dj - 1j * dy
    expect = j - dj / dh * h
    got = mode_strength(n, K3K, RA, RA)
    assert got != 0
    assert abs(got - expect) < 1e-8 * max(1.0, abs(expect))


def test_mode_strength_rigid_boundary():
    # radial derivative of the total field vanishes at the surface
    k, h = K3K, 1e-5
    for n in range(5):
        f = [mode_strength(n, k, RA + i * h, RA) for i in range(3)]
        deriv = (-3 * f[0] + 4 * f[1] - f[2]) / (2 * h)
        scale = k * abs(special.spherical_jn(n, k * RA, derivative=True)) + k * abs(f[0])
        assert abs(deriv) < 1e-6 * scale


def test_surface_form_matches_general_form():
    for n in range(6):
        general = complex(special.spherical_jn(n, K3K * RA)
                          - special.spherical_jn(n, K3K * RA, derivative=True)
                          / (special.spherical_jn(n, K3K * RA, derivative=True)
                             - 1j * special.spherical_yn(n, K3K * RA, derivative=True))
                          * (special.spherical_jn(n, K3K * RA) - 1j * special.spherical_yn(n, K3K * RA)))
        assert abs(mode_strength(n, K3K, RA, RA) - general) < 1e-12
        assert abs(surface_mode_strength(n, K3K * RA) - general) < 1e-12


def test_surface_mode_strength_limits():
    assert surface_mode_strength(0, np.array([0.0]))[0] == 1.0
    assert surface_mode_strength(3, np.array([0.0]))[0] == 0.0
    # high order at small argument underflows to zero instead of nan
    assert abs(surface_mode_strength(40, np.array([1e-3]))[0]) < 1e-100


def test_mode_strength_errors():
    with pytest.raises(ValueError):
        mode_strength(0, 0.0, RA, RA)
    with pytest.raises(ValueError):
        mode_strength(0, K3K, RA / 2, RA)


def test_equalizer_floor():
    with pytest.raises(IllConditionedError):
        equalizer(4, 1e-4)
    assert np.all(np.isfinite(equalizer(4, K3K * RA)))


# -- decomposition and beamforming ------------------------------------------ #

def test_shd_trivial_inputs(geom):
    z = shd_from_mics(np.zeros(32), geom, K3K)
    assert np.all(z.coeffs == 0)
    c = shd_from_mics(np.full(32, 2.5 + 0j), geom, K3K)
    assert c.coeffs[0] == pytest.approx(2.5 * math.sqrt(4 * np.pi))
    assert np.abs(c.coeffs[1:]).max() < 1e-12
    with pytest.raises(ValueError):
        shd_from_mics(np.zeros(31), geom, K3K)


def test_plane_wave_at_pole():
    f = plane_wave_shd([PlaneWaveSource(1.0, 0.0, 0.0)], K3K, 4, RA)
    b = mode_strengths(4, K3K * RA)
    for n in range(5):
        for m in range(-n, n + 1):
            expect = 4 * np.pi * 1j ** n * b[n] * math.sqrt((2 * n + 1) / (4 * np.pi)) if m == 0 else 0
            assert abs(f.coeffs[acn(n, m)] - expect) < 1e-13


def test_empty_source_list_is_zero_frame():
    f = plane_wave_shd([], K3K, 4, RA)
    assert np.all(f.coeffs == 0)
    assert np.all(srp_pwd(f, np.array([0.3, 1.0]), np.array([0.0, 2.0]), RA) == 0)


def test_srp_peak_value():
    f = plane_wave_shd([PlaneWaveSource(1.0, 1.1, 2.3)], K3K, 4, RA)
    assert srp_pwd(f, 1.1, 2.3, RA) == pytest.approx((25 / (4 * np.pi)) ** 2, rel=1e-12)


def test_srp_matches_regular_beampattern(rng):
    th0, ph0 = 0.9, 4.0
    f = plane_wave_shd([PlaneWaveSource(1.0, th0, ph0)], K3K, 4, RA)
    th = rng.uniform(0, np.pi, 200)
    ph = rng.uniform(0, 2 * np.pi, 200)
    cosang = unit_vector(th, ph) @ unit_vector(th0, ph0)
    np.testing.assert_allclose(srp_pwd(f, th, ph, RA), regular_beampattern(4, cosang) ** 2,
                               rtol=1e-9, atol=1e-12)


@settings(max_examples=30)
@given(psi=st.floats(0, 2 * math.pi), th=st.floats(0, math.pi), ph=st.floats(0, 2 * math.pi))
def test_srp_global_phase_invariance(psi, th, ph):
    f = plane_wave_shd([PlaneWaveSource(1.0, 1.0, 2.0), PlaneWaveSource(0.5j, 2.0, 5.0)], K3K, 4, RA)
    g = ShdFrame(f.coeffs * np.exp(1j * psi), f.k, f.order)
    assert srp_pwd(g, th, ph, RA) == pytest.approx(srp_pwd(f, th, ph, RA), rel=1e-10, abs=1e-14)


def test_srp_peak_within_one_level5_pixel():
    from sphloc import healpix as hp
    th0, ph0 = 2.2, 0.7
    f = plane_wave_shd([PlaneWaveSource(1.0, th0, ph0)], K3K, 4, RA)
    th, ph = hp.pix_center(5, np.arange(hp.npix(5)))
    best = np.argmax(srp_pwd(f, th, ph, RA))
    ang = math.acos(np.clip(unit_vector(th[best], ph[best]) @ unit_vector(th0, ph0), -1, 1))
    assert ang <= hp.angular_resolution(5)


def test_shd_round_trip_aliasing_bound(geom):
    from sphloc.scene import synth_pressures
    worst = 0.0
    for f in np.linspace(2608, 5216, 6):
        k = 2 * np.pi * f / 343
        for th, ph in [(0.3, 1.0), (1.6, 2.5), (2.8, 5.9)]:
            src = [PlaneWaveSource(1.0, th, ph)]
            got = shd_from_mics(synth_pressures(src, geom, k), geom, k).coeffs
            ref = plane_wave_shd(src, k, 4, geom.radius_m).coeffs
            worst = max(worst, np.abs(got - ref).max() / np.abs(ref).max())
    # measured aliasing of the 32-sensor layout is 16.5 % of the peak coefficient at 5.2 kHz
    assert worst < 0.2


def test_geometry_validation_and_io(tmp_path):
    g = truncated_icosahedron_layout()
    save_geometry(g, tmp_path / "g.json")
    h = load_geometry(tmp_path / "g.json")
    np.testing.assert_array_equal(g.theta, h.theta)
    assert h.n_mics == 32 and h.max_order == 4
    with pytest.raises(ValueError):
        ArrayGeometry(0.042, g.theta[:20], g.phi[:20], g.weights[:20], 4)
    with pytest.raises(ValueError):
        ArrayGeometry(0.042, g.theta, g.phi, -g.weights, 4)
    with pytest.raises(ValueError):
        ShdFrame(np.zeros(24), 1.0, 4)
    with pytest.raises(ValueError):
        ShdFrame(np.zeros(25), 0.0, 4)


def test_bundled_geometry_is_the_layout():
    a, b = default_geometry(), truncated_icosahedron_layout()
    np.testing.assert_allclose(a.theta, b.theta, atol=1e-15)
    np.testing.assert_allclose(a.weights, b.weights, atol=1e-15)
