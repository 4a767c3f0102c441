"""Executable invariant suite.

Each check covers one invariant of one module and reports a value against its
limit.  ``quick`` selects reduced resolutions that keep the whole suite within
a couple of minutes; the limits are the same in both modes.
"""

from __future__ import annotations

import math
import tempfile
import time
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .. import constants as C
from .. import modulation_dynamics as md
from .. import spectral_operator as so
from .. import stefan_solver as ss
from .. import weighted_basis as wb

DEFAULT_SEED = 0x57EFA


@dataclass
class Settings:
    quick: bool = True
    seed: int = DEFAULT_SEED

    def rng(self, *stream: int) -> np.random.Generator:
        """Independent Philox stream keyed by the seed and ``stream`` ids."""
        key = np.random.SeedSequence([self.seed, *stream]).generate_state(2, np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


@dataclass
class CheckResult:
    module: str
    name: str
    passed: bool
    value: float
    limit: str
    detail: str = ""
    seconds: float = 0.0

    def row(self) -> dict:
        return {"module": self.module, "check": self.name, "passed": self.passed,
                "value": self.value, "limit": self.limit, "detail": self.detail}


Outcome = tuple[bool, float, str, str]
_REGISTRY: list[tuple[str, str, Callable[[Settings], Outcome]]] = []


def check(module: str, name: str):
    def deco(fn):
        _REGISTRY.append((module, name, fn))
        return fn
    return deco


def registered() -> list[tuple[str, str]]:
    return [(m, n) for m, n, _ in _REGISTRY]


# ----------------------------------------------------------------------------
# weighted_basis
# ----------------------------------------------------------------------------


def _default_grid() -> wb.WeightedGrid:
    return wb.make_grid(0.0, wb.DEFAULT_Z_MAX, wb.DEFAULT_N, "minus", "uniform")


def _relative(res: np.ndarray, scale: np.ndarray) -> float:
    """Pointwise residual measured against the size of the terms that cancel."""
    return float(np.max(np.abs(res) / (1.0 + scale)))


@check("weighted_basis", "orthonormality")
def _orthonormality(cfg: Settings) -> Outcome:
    g = _default_grid()
    P = wb.p_table(8, g.nodes)
    G = (P * g.quad_weights) @ P.T
    err = float(np.max(np.abs(G - np.eye(9))))
    return err <= 1e-8, err, "<= 1e-8", "K = 8, default grid"


@check("weighted_basis", "induction_formula")
def _induction(cfg: Settings) -> Outcome:
    z = _default_grid().nodes
    P = wb.p_table(8, z)
    worst = 0.0
    for k in range(1, 9):
        dP = wb.p_derivative(k, z)
        res = z * dP - 2 * k * (P[k] - P[k - 1])
        scale = np.abs(z * dP) + 2 * k * (np.abs(P[k]) + np.abs(P[k - 1]))
        worst = max(worst, _relative(res, scale))
    return worst <= 1e-8, worst, "<= 1e-8", "1 <= k <= 8, relative to term size"


@check("weighted_basis", "three_term_identity")
def _three_term(cfg: Settings) -> Outcome:
    z = _default_grid().nodes
    P = wb.p_table(8, z)
    worst = 0.0
    for k in range(0, 8):
        prev = P[k - 1] if k else np.zeros_like(z)
        res = z * z * P[k] + 2 * (k + 1) * P[k + 1] - (4 * k + 2) * P[k] + 2 * k * prev
        scale = (z * z * np.abs(P[k]) + 2 * (k + 1) * np.abs(P[k + 1])
                 + (4 * k + 2) * np.abs(P[k]) + 2 * k * np.abs(prev))
        worst = max(worst, _relative(res, scale))
    return worst <= 1e-8, worst, "<= 1e-8", "0 <= k <= 7, relative to term size"


def random_smooth(rng: np.random.Generator, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Random smooth function and its derivative: Laguerre sums or Gaussian bumps."""
    if rng.random() < 0.5:
        deg = int(rng.integers(0, 7))
        c = rng.standard_normal(deg + 1)
        u = sum(c[j] * wb.p_eval(j, z) for j in range(deg + 1))
        du = sum(c[j] * wb.p_derivative(j, z) for j in range(deg + 1))
        return np.asarray(u, float) * np.ones_like(z), np.asarray(du, float) * np.ones_like(z)
    m = rng.uniform(0.0, 6.0)
    sig = rng.uniform(0.2, 3.0)
    amp = rng.standard_normal()
    u = amp * np.exp(-0.5 * ((z - m) / sig) ** 2)
    return u, -u * (z - m) / sig**2


@check("weighted_basis", "weighted_l2_estimate")
def _weighted_estimate(cfg: Settings) -> Outcome:
    g = _default_grid()
    rng = cfg.rng(1)
    worst = 0.0
    for _ in range(50):
        u, du = random_smooth(rng, g.nodes)
        lhs, d, m = wb.weighted_estimate_terms(u, du, g)
        worst = max(worst, lhs / (d + m))
    lim = C.WEIGHTED_ESTIMATE_C
    return worst <= lim, worst, f"<= {lim}", "max ratio over 50 random functions"


@check("weighted_basis", "gram_near_identity")
def _gram(cfg: Settings) -> Outcome:
    worst = max(float(np.max(np.abs(wb.gram_matrix(8, b) - np.eye(9)))) / b
                for b in (1e-2, 1e-4))
    return worst <= C.GRAM_C, worst, f"<= {C.GRAM_C:.6g}", "max |M - I| / b"


# ----------------------------------------------------------------------------
# spectral_operator
# ----------------------------------------------------------------------------


def _n(cfg: Settings) -> int:
    return 1500 if cfg.quick else so.DEFAULT_SPECTRAL_N


@check("spectral_operator", "self_adjointness")
def _self_adjoint(cfg: Settings) -> Outcome:
    op = so.assemble(1e-4, _n(cfg))
    rng = cfg.rng(2)
    worst = 0.0
    for _ in range(20):
        u, v = so.random_trial(op, rng), so.random_trial(op, rng)
        a, b = float(v @ op.stiffness(u)), float(u @ op.stiffness(v))
        scale = math.sqrt(op.energy(u) * op.energy(v))
        worst = max(worst, abs(a - b) / scale)
    return worst <= 1e-10, worst, "<= 1e-10", "20 random pairs, b = 1e-4"


@check("spectral_operator", "ordering_and_orthogonality")
def _ordering(cfg: Settings) -> Outcome:
    op = so.assemble(1e-4, _n(cfg))
    pairs = so.eig_pairs(op, 4)
    lam = np.array([p.lam for p in pairs])
    worst = 0.0
    for i in range(len(pairs)):
        for j in range(i):
            pi, pj = pairs[i].psi, pairs[j].psi
            c = op.inner(pi, pj) / math.sqrt(op.inner(pi, pi) * op.inner(pj, pj))
            worst = max(worst, abs(c))
    strict = bool(np.all(np.diff(lam) > 0))
    return strict and worst <= 1e-8, worst, "<= 1e-8", f"strictly increasing: {strict}"


@check("spectral_operator", "residual_and_sign_changes")
def _residuals(cfg: Settings) -> Outcome:
    pairs = so.eig_pairs(so.assemble(1e-4, _n(cfg)), 3)
    worst = max(p.residual for p in pairs)
    signs = [p.sign_changes for p in pairs]
    ok = worst <= so.RESIDUAL_TOL and signs == list(range(len(pairs)))
    return ok, worst, f"<= {so.RESIDUAL_TOL}", f"sign changes {signs}"


@check("spectral_operator", "normalization_growth")
def _norm_growth(cfg: Settings) -> Outcome:
    blist = (1e-3, 1e-5, 1e-7) if cfg.quick else (1e-3, 1e-4, 1e-5, 1e-6, 1e-7)
    dev = []
    for b in blist:
        L = math.log(b)
        pairs = so.eig_pairs(so.assemble(b, _n(cfg)), 3)
        dev.append([abs(p.norm_sq / (L * L / 4) - 1) for p in pairs])
    dev = np.array(dev)
    monotone = bool(np.all(np.diff(dev, axis=0) < 0))
    last = float(np.max(dev[-1]))
    return monotone and last <= 0.25, last, "<= 0.25 at b = 1e-7", f"monotone: {monotone}"


@check("spectral_operator", "grid_order")
def _grid_order(cfg: Settings) -> Outcome:
    orders = so.observed_order(1e-4, 2, n=500 if cfg.quick else 1000)
    lo, hi = float(np.min(orders)), float(np.max(orders))
    ok = 1.7 <= lo and hi <= 2.3
    return ok, lo, "in [1.7, 2.3]", f"orders {np.round(orders, 3).tolist()}"


@check("spectral_operator", "conjugation_isometry")
def _conjugation(cfg: Settings) -> Outcome:
    worst = 0.0
    for p in so.freezing_spectrum(1e-4, 3, _n(cfg)):
        # freezing_spectrum stores v; the melting eigenfunction is w = exp(z^2/2) v
        w = np.exp(0.5 * p.grid.nodes**2) * p.psi
        melt = so.EigenPair(p.k, p.lam - 2, w, p.op)
        a, b = so.conjugation_norms(melt)
        worst = max(worst, abs(a - b) / a)
    return worst <= 1e-10, worst, "<= 1e-10", "relative norm difference, k <= 3"


# ----------------------------------------------------------------------------
# modulation_dynamics
# ----------------------------------------------------------------------------


def _k0_run(cfg: Settings) -> md.Trajectory:
    st = md.melt_k0_state(0.05)
    return md.integrate("melt", 0, st, st.s * (1e3 if cfg.quick else 1e6), per_decade=100)


@check("modulation_dynamics", "k0_monotone")
def _k0_monotone(cfg: Settings) -> Outcome:
    tr = _k0_run(cfg)
    db = float(np.max(np.diff(tr.scale)))
    dl = float(np.max(np.diff(tr.log_lam)))
    worst = max(db, dl)
    return worst < 0, worst, "< 0", "largest increment of b and log lambda"


@check("modulation_dynamics", "k0_sign_structure")
def _sign_structure(cfg: Settings) -> Outcome:
    tr = _k0_run(cfg)
    worst = 0.0
    for i in range(0, tr.s.size, 5):
        st = tr.state(i)
        b = st.scale
        db = md.melting_rhs(st, 0).scale
        L = abs(math.log(b))
        deriv = db * (-math.log(b)) / b**2
        worst = max(worst, abs(deriv + 2) * L)
    return worst <= 1.0, worst, "<= 1", "max |d/ds((log b + 1)/b) + 2| |log b|"


@check("modulation_dynamics", "freezing_scale_law")
def _freezing_scale(cfg: Settings) -> Outcome:
    s0 = 50.0
    st = md.approximate_solution(s0, 0, "freeze")
    tr = md.integrate("freeze", 0, st, s0 * 1e4, per_decade=50)
    dev = np.abs(tr.scale * tr.s - 0.5) * np.log(tr.s)
    worst = float(np.max(dev))
    return worst <= 1.0, worst, "<= 1", "max |B s - 1/2| log s"


@check("modulation_dynamics", "integrator_order")
def _integrator_order(cfg: Settings) -> Outcome:
    order, _ = md.integrator_order()
    return 3.5 <= order <= 5.5, order, "in [3.5, 5.5]", "constant-step RK45 on the k = 0 law"


@check("modulation_dynamics", "shooting_monotonicity")
def _shooting_monotone(cfg: Settings) -> Outcome:
    s0 = md.DEFAULT_S0
    res = md.shoot_unstable(1, s0=s0, s_end=s0 * 1e3)
    offsets = res.K_bound * np.geomspace(1e-1, 1e-7, 7)
    worst = math.inf
    for side in (-1.0, 1.0):
        exits = [md._shoot_once(1, s0, res.s_end, res.V_lower, res.w_unstable + side * d,
                                res.w_stable, res.K_bound, 1e-11).exit_s for d in offsets]
        # exit times must grow as the offset shrinks toward the tuned value
        worst = min(worst, float(np.min(np.diff(exits))))
    return worst >= 0, worst, ">= 0", "smallest exit-time increment as offsets shrink"


# ----------------------------------------------------------------------------
# stefan_solver
# ----------------------------------------------------------------------------


def _melt_profile(y):
    return (y - 1) * np.exp(-((y - 1) ** 2))


def _melt_run(cfg: Settings) -> ss.RunResult:
    g = ss.make_radial_grid(400 if cfg.quick else 1600, 1e4)
    st = ss.init_profile(_melt_profile, g)
    return ss.run(st, 1e-3, t_end=0.3 if cfg.quick else 1.0)


@check("stefan_solver", "maximum_principle")
def _max_principle(cfg: Settings) -> Outcome:
    r = _melt_run(cfg)
    mn, mx = r.column("min_u"), r.column("max_u")
    worst = float(np.min(mn / mx))
    return worst >= -1e-12, worst, ">= -1e-12", "min over steps of min_u / max_u"


@check("stefan_solver", "dirichlet_energy_decay")
def _energy_decay(cfg: Settings) -> Outcome:
    r = _melt_run(cfg)
    E = r.column("dirichlet_energy")
    ld = r.column("lambda_dot")
    inc = np.diff(E)[ld[1:] <= 0] / E[0]
    worst = float(np.max(inc)) if inc.size else 0.0
    return worst <= 1e-14, worst, "<= 1e-14", "largest relative increase on melting steps"


def _drift(n: int, dt: float, scheme: str, t_end: float) -> float:
    g = ss.make_radial_grid(n, 1e4)
    r = ss.run(ss.init_profile(_melt_profile, g, scheme=scheme), dt, t_end=t_end,
               every=10**9)
    c = r.column("conserved")
    return abs(c[-1] - c[0])


def observed_order(values) -> float:
    """Order from three levels halving the step: ``log2((d1 - d2) / (d2 - d3))``.

    Differences cancel the part of the error that does not depend on the
    refined parameter, e.g. the spatial floor in a time-step study.
    """
    d1, d2, d3 = values
    return math.log2(abs(d1 - d2) / abs(d2 - d3))


@check("stefan_solver", "conservation_orders")
def _conservation(cfg: Settings) -> Outcome:
    t_end = 0.5 if cfg.quick else 1.0
    n_t = 800 if cfg.quick else 1600
    p = observed_order([_drift(n_t, dt, "euler", t_end) for dt in (4e-3, 2e-3, 1e-3)])
    ns = (100, 200, 400) if cfg.quick else (200, 400, 800)
    q = observed_order([_drift(n, 2e-4, "trapezoid", t_end) for n in ns])
    ok = p >= 1 and q >= 2
    return ok, min(p, q / 2), "p >= 1, q >= 2", f"p = {p:.3f}, q = {q:.3f}"


@check("stefan_solver", "lambda_infinity")
def _lambda_inf(cfg: Settings) -> Outcome:
    g = ss.make_radial_grid(1200 if cfg.quick else ss.DEFAULT_GRID_N, ss.DEFAULT_Y_MAX)
    prof = lambda y: -0.5 * (y - 1) * np.exp(-((y - 1) ** 2)) * ss.cutoff(y / 3)  # noqa: E731
    st = ss.init_profile(prof, g)
    pred = ss.lambda_infinity_formula(st)
    r = ss.run(st, 1e-3, t_end=1e10, growth=0.02)
    lam_inf, _ = ss.extrapolate_lambda_infinity(r.column("t"), r.column("lambda"))
    err = abs(lam_inf / pred - 1)
    return err <= 0.01, err, "<= 0.01", f"predicted {pred:.6f}, extrapolated {lam_inf:.6f}"


@check("stefan_solver", "trace_consistency")
def _trace(cfg: Settings) -> Outcome:
    r = _melt_run(cfg)
    d = r.column("trace_defect")[1:]
    scale = np.abs(r.column("lambda_dot")[1:] * r.column("lambda")[1:])
    worst = float(np.max(d / scale))
    return worst <= 1e-9, worst, "<= 1e-9", "relative |w_y(1) + lambda lambda_dot|"


# ----------------------------------------------------------------------------
# harness
# ----------------------------------------------------------------------------


@check("harness", "determinism")
def _determinism(cfg: Settings) -> Outcome:
    from .config import ScenarioConfig, defaults
    from .scenarios import run_scenario

    blobs = []
    with tempfile.TemporaryDirectory() as tmp:
        for rep in range(2):
            params = defaults("spectrum") | {"b": 1e-4, "K": 2, "n": 800, "gap_trials": 20}
            out = Path(tmp) / f"rep{rep}"
            run_scenario(ScenarioConfig("spectrum", params, str(out), cfg.seed))
            blobs.append((out / "spectrum.csv").read_bytes())
    same = blobs[0] == blobs[1]
    return same, float(same), "identical", "spectrum CSV, two runs, same seed"


# ----------------------------------------------------------------------------


def run_checks(quick: bool = True, seed: int = DEFAULT_SEED,
               only: Callable[[str, str], bool] | None = None,
               progress: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    """Run every registered check; an exception counts as a failure."""
    cfg = Settings(quick, seed)
    out = []
    for module, name, fn in _REGISTRY:
        if only is not None and not only(module, name):
            continue
        t0 = time.perf_counter()
        try:
            passed, value, limit, detail = fn(cfg)
        except Exception as exc:  # noqa: BLE001 (reported as a failed check)
            passed, value, limit = False, float("nan"), ""
            detail = f"{type(exc).__name__}: {exc}"
            tb = traceback.extract_tb(exc.__traceback__)
            if tb:
                detail += f" at {Path(tb[-1].filename).name}:{tb[-1].lineno}"
        res = CheckResult(module, name, bool(passed), float(value), limit, detail,
                          time.perf_counter() - t0)
        out.append(res)
        if progress is not None:
            progress(res)
    return out


def format_line(res: CheckResult) -> str:
    tag = "PASS" if res.passed else "FAIL"
    return (f"{tag} {res.module}.{res.name}: {res.value:.4g} ({res.limit}) "
            f"{res.detail} [{res.seconds:.1f}s]")
