from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stefan_lab import spectral_operator as so
from stefan_lab.constants import C_GAP, EXPANSION_BAND_CENTRE, EXPANSION_BAND_HALF_WIDTH
from stefan_lab.errors import ConfigurationError, DomainError
from stefan_lab.weighted_basis import make_grid


def in_band(r: float) -> bool:
    return abs(r - EXPANSION_BAND_CENTRE) <= EXPANSION_BAND_HALF_WIDTH


@pytest.fixture(scope="module")
def pairs_1e3():
    return so.eig_pairs(so.assemble(1e-3), 3)


@pytest.fixture(scope="module")
def pairs_1e5():
    return so.eig_pairs(so.assemble(1e-5), 2)


# --- assemble ---------------------------------------------------------------


def test_symmetry_defect_random_pairs():
    op = so.assemble(1e-4)
    rng = np.random.Generator(np.random.Philox(11))
    for _ in range(20):
        u, v = so.random_trial(op, rng), so.random_trial(op, rng)
        a = op.inner(op.apply(u), v)
        b = op.inner(u, op.apply(v))
        assert abs(a - b) <= 1e-10 * max(abs(a), abs(b), 1.0)


def test_unweighted_limit_spectrum_is_even_integers():
    lam = [p.lam for p in so.eig_pairs(so.assemble(0.0, 3000), 3, normalize=False)]
    assert np.allclose(lam, [0.0, 2.0, 4.0, 6.0], atol=1e-4)


def test_constant_function_is_not_a_test_vector():
    op = so.assemble(1e-4, 1000)
    with pytest.raises(DomainError):
        op.check_dirichlet(np.ones(op.grid.n))


def test_coarse_layer_rejected():
    b = 1e-4
    grid = make_grid(math.sqrt(b), 12.0, 200, "minus", "uniform")
    with pytest.raises(ConfigurationError):
        so.assemble(b, grid=grid)


def test_assemble_domain_errors():
    with pytest.raises(DomainError):
        so.assemble(-1e-3)
    with pytest.raises(DomainError):
        so.assemble(0.5)


@given(seed=st.integers(0, 2**32 - 1))
def test_rayleigh_quotients_nonnegative(seed):
    op = so.assemble(1e-4, 800)
    u = so.random_trial(op, np.random.Generator(np.random.Philox(seed)))
    assert op.rayleigh(u) >= 0


# --- eig_pairs --------------------------------------------------------------


def test_ground_state_against_tricomi_oracle():
    b = 1e-3
    lam = so.extrapolated_eigenvalue(b, 1)
    for k in (0, 1):
        assert lam[k] == pytest.approx(so.tricomi_eigenvalue(b, k), abs=1e-6)


def test_leading_order_eigenvalues(pairs_1e3):
    L = abs(math.log(1e-3))
    assert 2 / L == pytest.approx(0.28953, abs=1e-5)
    assert in_band((pairs_1e3[0].lam - 0.28953) * L * L)
    assert in_band((pairs_1e3[1].lam - 2 - 0.28953) * L * L)


def test_sign_changes_and_positivity(pairs_1e3):
    assert [p.sign_changes for p in pairs_1e3] == [0, 1, 2, 3]
    psi0 = pairs_1e3[0].psi
    assert psi0[0] == 0.0
    assert np.all(psi0[1:-1] > 0)


def test_pairs_satisfy_eigen_invariants(pairs_1e3):
    lam = [p.lam for p in pairs_1e3]
    assert np.all(np.diff(lam) > 0)
    for p in pairs_1e3:
        assert p.psi[0] == 0.0
        assert p.residual <= so.RESIDUAL_TOL


def test_too_many_modes_rejected():
    with pytest.raises(DomainError):
        so.eig_pairs(so.assemble(1e-3, 800), 11)


@given(b=st.floats(1e-7, 1e-2), k=st.integers(0, 3))
def test_eigenvalue_between_consecutive_even_integers(b, k):
    lam = so.eigenvalues(b, k, n=800)[k]
    assert 2 * k < lam < 2 * k + 2


# --- expansion --------------------------------------------------------------


@pytest.mark.parametrize("k", [0, 1])
def test_expansion_remainders_bounded(k):
    fit = so.expansion_fit([1e-3, 1e-4, 1e-5, 1e-6, 1e-7], k, n=1500)
    assert all(in_band(r) for r in fit.remainders)


def test_expansion_needs_three_decades():
    with pytest.raises(DomainError):
        so.expansion_fit([1e-3, 1e-4], 0)


# --- mu coefficients --------------------------------------------------------


def test_mu_empty_for_ground_state(pairs_1e5):
    assert pairs_1e5[0].mu_coeffs == []
    assert so.mu_coefficients(pairs_1e5[0]) == []


def test_mu_first_excited(pairs_1e5):
    L = abs(math.log(1e-5))
    (mu01,) = pairs_1e5[1].mu_coeffs
    assert 2 / L == pytest.approx(0.17372, abs=1e-5)
    assert in_band((mu01 - 2 / L) * L * L)


def test_mu_second_excited(pairs_1e5):
    L = abs(math.log(1e-5))
    mu02, mu12 = pairs_1e5[2].mu_coeffs
    assert in_band((mu02 - 1 / L) * L * L)
    assert in_band((mu12 - 2 / L) * L * L)


def test_mu_matches_recomputation(pairs_1e5):
    assert so.mu_coefficients(pairs_1e5[2]) == pytest.approx(pairs_1e5[2].mu_coeffs, rel=1e-12)


# --- freezing ---------------------------------------------------------------


def test_freezing_leading_term():
    B = 1e-4
    L = abs(math.log(B))
    lam_hat = so.freezing_spectrum(B, 0)[0].lam
    assert 2 + 2 / L == pytest.approx(2.21715, abs=1e-5)
    assert in_band((lam_hat - 2.21715) * L * L)


def test_freezing_shift_against_direct_solve():
    defect = so.freezing_shift_defect(1e-4, 3)
    assert np.max(np.abs(defect)) <= 1e-6, defect


def test_freezing_limit_approaches_even_integers():
    gaps = np.array([[p.lam - 2 * p.k - 2 for p in so.freezing_spectrum(B, 2, 1500)]
                     for B in (1e-2, 1e-4, 1e-6, 1e-8)])
    assert np.all(gaps > 0)
    assert np.all(np.diff(gaps, axis=0) < 0)


def test_direct_solve_truncation_limit():
    with pytest.raises(ConfigurationError):
        so.direct_freezing_spectrum(1e-4, 1, z_max=9.0)


def test_freezing_domain():
    with pytest.raises(DomainError):
        so.freezing_spectrum(0.0, 1)


# --- spectral gap -----------------------------------------------------------


def test_gap_ground_state_orthogonal():
    b = 1e-4
    res = so.spectral_gap_test(b, 0, trials=200)
    assert res.min_quotient >= 2 - C_GAP / abs(math.log(b))


def test_next_eigenfunction_quotient():
    b = 1e-4
    pairs = so.eig_pairs(so.assemble(b), 2)
    op = pairs[0].op
    q = op.rayleigh(pairs[1].psi)
    assert q == pytest.approx(pairs[1].lam, rel=1e-9)
    assert q >= 2 - C_GAP / abs(math.log(b))


def test_unconstrained_minimum_is_ground_state():
    pairs = so.eig_pairs(so.assemble(1e-4), 0)
    op = pairs[0].op
    assert op.rayleigh(pairs[0].psi) == pytest.approx(pairs[0].lam, rel=1e-9)
    rng = np.random.Generator(np.random.Philox(3))
    trials = [op.rayleigh(so.random_trial(op, rng)) for _ in range(100)]
    assert min(trials) >= pairs[0].lam


def test_gap_seed_reproducible():
    a = so.spectral_gap_test(1e-4, 1, trials=30, seed=5, n=1000)
    b = so.spectral_gap_test(1e-4, 1, trials=30, seed=5, n=1000)
    assert a.min_quotient == b.min_quotient


# --- renormalized eigenfunctions --------------------------------------------


def test_eta_vanishes_at_one(pairs_1e5):
    y = np.array([1.0, 2.0, 10.0])
    eta = so.renormalized_eigenfunction(pairs_1e5[2], y)
    assert eta[0] == 0.0


def test_eta_slope_second_excited():
    """Scaled slope remainder stays bounded (no growth) as b decreases."""
    rem = []
    for b in (1e-3, 1e-5, 1e-7):
        L = abs(math.log(b))
        pair = so.eig_pairs(so.assemble(b), 2)[2]
        rem.append((so.boundary_slope(pair) - so.eta_slope_leading(b, 2)) * L * L)
    assert so.eta_slope_leading(1e-5, 2) == pytest.approx(1 + 3 / abs(math.log(1e-5)))
    assert max(abs(r) for r in rem) <= 1.1 * abs(rem[0])


def test_eta_eigen_relation(pairs_1e5):
    """-eta'' - eta'/y + b y eta' = b lam eta on an interior window of y."""
    pair = pairs_1e5[1]
    b = pair.b
    y = np.linspace(1.0, 300.0, 60001)
    eta = so.renormalized_eigenfunction(pair, y)
    d1 = np.gradient(eta, y)
    d2 = np.gradient(d1, y)
    res = -d2 - d1 / y + b * y * d1 - b * pair.lam * eta
    win = slice(100, -100)
    scale = np.max(np.abs(d2[win]))
    assert np.max(np.abs(res[win])) <= 1e-2 * scale


def test_eta_outside_grid_rejected(pairs_1e5):
    with pytest.raises(ConfigurationError):
        so.renormalized_eigenfunction(pairs_1e5[0], np.array([1.0, 1e5]))


def test_db_derivative_leading_scale():
    b = 1e-5
    L = abs(math.log(b))
    for pair in so.eig_pairs(so.assemble(b), 2):
        ratio = so.dlambda_db(pair) / (2 / (b * L * L))
        assert 0.5 <= ratio <= 2.0


# --- discretisation ---------------------------------------------------------


def test_grid_convergence_order():
    orders = so.observed_order(1e-4, 2, n=500)
    assert np.all((orders >= 1.7) & (orders <= 2.3))


def test_conjugation_norms_agree(pairs_1e3):
    for p in pairs_1e3:
        a, b = so.conjugation_norms(p)
        assert a == pytest.approx(b, rel=1e-10)


def test_normalization_growth_trend():
    dev = []
    for b in (1e-3, 1e-5, 1e-7):
        L = math.log(b)
        dev.append([abs(p.norm_sq / (L * L / 4) - 1) for p in so.eig_pairs(so.assemble(b), 2)])
    dev = np.array(dev)
    assert np.all(np.diff(dev, axis=0) < 0)
    assert np.all(dev[-1] <= 0.25)
