from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stefan_lab import stefan_solver as ss
from stefan_lab.constants import CONSERVATION_DT, CONSERVATION_TOL
from stefan_lab.errors import ConfigurationError, DomainError
from stefan_lab.harness.verify import observed_order


def bump(y):
    return (y - 1) * np.exp(-((y - 1) ** 2))


@pytest.fixture(scope="module")
def small_grid():
    return ss.make_radial_grid(400, 1e4)


@pytest.fixture(scope="module")
def melt_run():
    st0 = ss.init_profile(bump, ss.make_radial_grid(800, 1e4))
    return ss.run(st0, 1e-3, t_end=0.5)


@pytest.fixture(scope="module")
def prepared_run():
    p = ss.init_prepared_data(1e-3, grid=ss.make_radial_grid(1200, 1e8))
    return p, ss.run(p.state, 5.0, s_end=3 * p.state.s, project_every=20)


# --- grid and state ---------------------------------------------------------


def test_grid_errors():
    with pytest.raises(ConfigurationError):
        ss.make_radial_grid(8, 1e4)
    with pytest.raises(ConfigurationError):
        ss.make_radial_grid(100, 20.0)


def test_grid_volumes_integrate_y():
    g = ss.make_radial_grid(200, 1e3)
    assert g.volumes.sum() == pytest.approx(0.5 * (g.y_max**2 - 1), rel=1e-12)


def test_state_rejects_bad_shape_and_radius(small_grid):
    with pytest.raises(ConfigurationError):
        ss.PulledBackState(0, 0, 1.0, 0.0, np.zeros(3), small_grid)
    with pytest.raises(DomainError):
        ss.PulledBackState(0, 0, 0.0, 0.0, np.zeros(small_grid.n + 1), small_grid)


# --- step -------------------------------------------------------------------


def test_zero_temperature_is_stationary(small_grid):
    st0 = ss.PulledBackState(0.0, 0.0, 1.3, 0.0, np.zeros(small_grid.n + 1), small_grid)
    new, info = ss.step(st0, 0.1)
    assert np.all(new.w == 0.0)
    assert new.lam == 1.3
    assert new.lam_dot == 0.0
    assert new.t == pytest.approx(0.1)


def test_positive_temperature_melts(small_grid):
    new, _ = ss.step(ss.init_profile(bump, small_grid), 1e-3)
    assert new.lam_dot < 0
    assert new.lam < 1.0
    assert new.w[0] == 0.0


def test_step_rejects_nonpositive_dt(small_grid):
    with pytest.raises(ConfigurationError):
        ss.step(ss.init_profile(bump, small_grid), 0.0)


@given(mu=st.floats(0.25, 4.0))
@settings(max_examples=10)
def test_scaling_symmetry(mu):
    g = ss.make_radial_grid(200, 1e3)
    st0 = ss.init_profile(bump, g)
    a, _ = ss.step(st0, 1e-2)
    b, _ = ss.step(ss.rescale_solution(st0, mu), 1e-2 / mu**2)
    assert np.allclose(a.w, b.w, rtol=1e-10, atol=1e-13)
    assert b.lam == pytest.approx(a.lam / mu, rel=1e-10)
    assert b.lam_dot == pytest.approx(a.lam_dot * mu, rel=1e-8)


def test_trace_consistency(melt_run):
    d = melt_run.column("trace_defect")[1:]
    scale = np.abs(melt_run.column("lambda_dot")[1:] * melt_run.column("lambda")[1:])
    assert np.max(d / scale) <= 1e-9


# --- run --------------------------------------------------------------------


def _heat(n, dt):
    g = ss.make_radial_grid(n, 1e2)
    st0 = ss.init_profile(bump, g, couple=False, scheme="trapezoid")
    return ss.run(st0, dt, t_end=0.2, couple=False, every=10**9).final


def test_heat_only_matches_fine_grid():
    coarse = _heat(3200, 5e-5)
    fine = _heat(6400, 2.5e-5)
    assert coarse.lam == 1.0 and fine.lam == 1.0
    # second-order Richardson on the fine run as the oracle
    oracle = fine.w[::2] + (fine.w[::2] - coarse.w) / 3.0
    assert np.max(np.abs(coarse.w - oracle)) <= 1e-6


def test_prepared_run_melts_monotonically(prepared_run):
    _, r = prepared_run
    lam = r.column("lambda")
    assert r.status == "s_end"
    assert np.all(np.diff(lam) < 0)
    assert r.projections[-1].s == r.final.s


def test_run_needs_a_stop(small_grid):
    with pytest.raises(ConfigurationError):
        ss.run(ss.init_profile(bump, small_grid), 1e-3)


def test_run_stops_at_lambda_floor(small_grid):
    prof = lambda y: 5.0 * bump(y)  # noqa: E731
    r = ss.run(ss.init_profile(prof, small_grid), 1e-3, lambda_floor=0.9, t_end=10.0)
    assert r.status == "lambda_floor"
    assert r.final.lam <= 0.9


def test_renormalized_time_accumulates(melt_run):
    t = melt_run.column("t")
    lam = melt_run.column("lambda")
    s = melt_run.column("s")
    ds = np.diff(t) / (lam[:-1] * lam[1:])
    assert np.allclose(np.diff(s), ds, rtol=1e-12)


def test_conservation_drift_default_grid():
    st0 = ss.init_profile(bump, ss.make_radial_grid())
    r = ss.run(st0, CONSERVATION_DT, t_end=1.0, every=10**9)
    c = r.column("conserved")
    assert abs(c[-1] - c[0]) <= CONSERVATION_TOL


def _drift(n, dt, scheme, t_end=0.5):
    r = ss.run(ss.init_profile(bump, ss.make_radial_grid(n, 1e4), scheme=scheme), dt,
               t_end=t_end, every=10**9)
    c = r.column("conserved")
    return abs(c[-1] - c[0])


def test_conservation_time_order():
    p = observed_order([_drift(800, dt, "euler") for dt in (4e-3, 2e-3, 1e-3)])
    assert p >= 1.0


def test_conservation_space_order():
    q = observed_order([_drift(n, 2e-4, "trapezoid") for n in (100, 200, 400)])
    assert q >= 2.0


def test_lambda_infinity_on_freezing_run():
    g = ss.make_radial_grid(1200, ss.DEFAULT_Y_MAX)
    prof = lambda y: -0.5 * bump(y) * ss.cutoff(y / 3)  # noqa: E731
    st0 = ss.init_profile(prof, g)
    pred = ss.lambda_infinity_formula(st0)
    r = ss.run(st0, 1e-3, t_end=1e10, growth=0.02)
    lam_inf, _ = ss.extrapolate_lambda_infinity(r.column("t"), r.column("lambda"))
    assert lam_inf == pytest.approx(pred, rel=0.01)
    assert np.all(np.diff(r.column("lambda")) >= 0)


def test_lambda_infinity_rejects_total_melt(small_grid):
    st0 = ss.init_profile(lambda y: 10.0 * bump(y), small_grid)
    with pytest.raises(DomainError):
        ss.lambda_infinity_formula(st0)


# --- diagnostics ------------------------------------------------------------


def test_zero_state_diagnostics(small_grid):
    st0 = ss.PulledBackState(0.0, 0.0, 1.0, 0.0, np.zeros(small_grid.n + 1), small_grid)
    new, _ = ss.step(st0, 0.1)
    d = ss.diagnostics(new)
    assert d.dirichlet_energy == 0.0 and d.mass_l2 == 0.0 and d.integral_u == 0.0
    assert d.energy_residuals == (0.0, 0.0, 0.0)
    assert d.conserved == pytest.approx(-math.pi)


def test_maximum_principle(melt_run):
    mn, mx = melt_run.column("min_u"), melt_run.column("max_u")
    assert np.all(mn >= -1e-12 * mx)


def test_dirichlet_energy_decays_while_melting(melt_run):
    E = melt_run.column("dirichlet_energy")
    ld = melt_run.column("lambda_dot")
    assert np.all(np.diff(E)[ld[1:] <= 0] <= 1e-14 * E[0])


def _max_residuals(n, dt):
    r = ss.run(ss.init_profile(bump, ss.make_radial_grid(n, 1e4)), dt, t_end=0.2)
    rows = np.array([rec.energy_residuals for rec in r.records[1:]])
    return rows.max(axis=0)


def test_energy_residuals_converge_at_scheme_order():
    levels = [_max_residuals(n, dt) for n, dt in ((400, 2e-3), (800, 1e-3), (1600, 5e-4))]
    ratios = np.array(levels[:-1]) / np.array(levels[1:])
    # backward Euler: each joint halving should roughly halve every defect
    assert np.all(ratios >= 1.6)
    assert levels[-1][1] <= 0.01


def test_annulus_share_bounds(melt_run):
    st0 = melt_run.final
    assert ss.annulus_energy_share(st0, 1e9) == pytest.approx(1.0)
    shares = [ss.annulus_energy_share(st0, R) for R in (1.0, 2.0, 4.0, 8.0)]
    assert np.all(np.diff(shares) >= 0)


# --- prepared data and projection ------------------------------------------


@pytest.mark.parametrize("b0", [1e-3, 1e-4, 1e-5])
def test_prepared_data_is_nonnegative_and_orthogonal(b0):
    p = ss.init_prepared_data(b0)
    assert np.min(p.state.w) >= 0.0
    assert abs(p.orthogonality) <= 1e-10
    assert p.B == pytest.approx(math.sqrt(abs(math.log(b0)) / (2 * b0)))
    assert p.dirichlet_energy < 1e-3


def test_prepared_alpha_trend():
    scaled = []
    for b0 in (1e-3, 1e-4, 1e-5):
        alpha = ss.init_prepared_data(b0).alpha
        scaled.append(abs(alpha - 1) * abs(math.log(b0)) ** 4)
    assert max(scaled) <= 150.0
    assert np.all(np.diff(scaled) < 0)


def test_prepared_data_errors():
    with pytest.raises(DomainError):
        ss.init_prepared_data(2e-2)
    with pytest.raises(ConfigurationError):
        ss.init_prepared_data(1e-3, grid=ss.make_radial_grid(400, 100.0))


def test_prepared_excited_data():
    p = ss.init_prepared_data(1e-3, k=1, grid=ss.make_radial_grid(1200, 1e8))
    assert p.modes.size == 2
    assert p.state.w[0] == 0.0 and p.state.w[-1] == 0.0


def test_projection_of_pure_mode():
    g = ss.make_radial_grid()
    b0 = 1e-3
    st0 = ss.PulledBackState(0.0, 1.0, 1.0, 0.0, b0 * ss.eta_on_grid(b0, 0, g), g)
    pr = ss.project_modulation(st0, 0, b_guess=1.01 * b0)
    assert pr.ok
    assert pr.b == pytest.approx(b0, rel=1e-10)
    assert pr.modes[0] == pytest.approx(b0, rel=1e-10)
    assert pr.eps_norm <= 1e-12


def test_projected_scale_trends_to_law(prepared_run):
    _, r = prepared_run
    ratio = np.array([pr.b * 2 * pr.s / math.log(pr.s) for pr in r.projections])
    assert all(pr.ok for pr in r.projections)
    late = ratio[ratio.size // 4:]
    assert np.all(np.diff(late) > 0)
    assert ratio[0] < ratio[-1] < 1.0


# --- rescaling --------------------------------------------------------------


def test_rescale_identity(melt_run):
    st0 = melt_run.final
    r = ss.rescale_solution(st0, 1.0)
    assert np.array_equal(r.w, st0.w) and r.lam == st0.lam and r.t == st0.t


@given(mu=st.floats(1e-3, 1e3))
def test_rescale_keeps_dirichlet_energy_and_inverts(mu):
    g = ss.make_radial_grid(100, 1e2)
    st0 = ss.init_profile(bump, g)
    r = ss.rescale_solution(st0, mu)
    assert ss.diagnostics(r).dirichlet_energy == ss.diagnostics(st0).dirichlet_energy
    back = ss.rescale_solution(r, 1.0 / mu)
    assert back.lam == pytest.approx(st0.lam, rel=1e-14)
    assert back.lam_dot == pytest.approx(st0.lam_dot, rel=1e-14)
    assert back.t == pytest.approx(st0.t, abs=1e-14)


def test_rescale_rejects_nonpositive_mu(small_grid):
    with pytest.raises(DomainError):
        ss.rescale_solution(ss.init_profile(bump, small_grid), 0.0)
