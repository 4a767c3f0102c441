"""Radial one-phase Stefan problem on the fixed exterior domain ``|y| >= 1``.

The temperature is pulled back to ``w(t, y) = u(t, lambda(t) y)`` and solved on
a grid that is uniform in ``xi = log y``.  In that variable the equation

    w_t - (lambda'/lambda) y w_y - (1/lambda^2) (1/y) (y w_y)_y = 0

becomes ``e^{2 xi} w_t = c (e^{2 xi} w)_xi - 2 c e^{2 xi} w + w_xixi / lambda^2``
with ``c = lambda'/lambda``, so the diffusive flux ``y w_y = w_xi`` has constant
coefficients and very large far fields cost a handful of extra cells.  Cells are
vertex-centred with measure ``y dy``; Dirichlet rows sit at ``y = 1`` and at
``y_max``.  The boundary speed comes from the Neumann condition
``w_y(1) = -lambda' lambda`` through a scalar fixed-point loop per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Literal, Sequence

import numpy as np
from scipy.integrate import trapezoid
from scipy.linalg import solve_banded

from .errors import ConfigurationError, DomainError, NumericalError
from .modulation_dynamics import approximate_solution, k0_initial_time
from .spectral_operator import (
    DEFAULT_SPECTRAL_N,
    EigenPair,
    assemble,
    eig_pairs,
    renormalized_eigenfunction,
)

__all__ = [
    "RadialGrid",
    "make_radial_grid",
    "PulledBackState",
    "DiagnosticsRecord",
    "StepInfo",
    "RunResult",
    "Projection",
    "cutoff",
    "weighted_inner",
    "init_prepared_data",
    "init_profile",
    "step",
    "run",
    "diagnostics",
    "project_modulation",
    "rescale_solution",
    "neumann_trace",
    "annulus_energy_share",
    "lambda_infinity_formula",
    "extrapolate_lambda_infinity",
]

Scheme = Literal["euler", "trapezoid"]

DEFAULT_GRID_N = 2400
DEFAULT_Y_MAX = 1e8
MIN_Y_MAX = 40.0
COUPLING_TOL = 1e-11
COUPLING_MAX_ITER = 50
MAX_HALVINGS = 10
DEFAULT_FLOOR_FRACTION = 1e-3
DECAY_MONITOR = 1e-10
PROJECTION_MAX_ITER = 30


# ----------------------------------------------------------------------------
# grid
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class RadialGrid:
    """Nodes ``y_i = exp(i h)``, ``i = 0..n``, with cell measures of ``y dy``."""

    n: int
    y_max: float

    @property
    def h(self) -> float:
        return math.log(self.y_max) / self.n

    @property
    def xi(self) -> np.ndarray:
        return np.arange(self.n + 1) * self.h

    @property
    def y(self) -> np.ndarray:
        return np.exp(self.xi)

    @property
    def volumes(self) -> np.ndarray:
        """``int y dy`` over each cell; half cells at both ends."""
        h = self.h
        v = np.exp(2.0 * self.xi) * math.sinh(h)
        v[0] = 0.5 * math.expm1(h)
        v[-1] = 0.5 * self.y_max**2 * (-math.expm1(-h))
        return v

    @property
    def face_weights(self) -> np.ndarray:
        """``y^2`` at the faces ``xi_{i+1/2}``, ``i = 0..n-1``."""
        return np.exp(2.0 * (self.xi[:-1] + 0.5 * self.h))


def make_radial_grid(n: int = DEFAULT_GRID_N, y_max: float = DEFAULT_Y_MAX) -> RadialGrid:
    if n < 16:
        raise ConfigurationError(f"grid needs at least 16 cells, got {n}")
    if not y_max >= MIN_Y_MAX:
        raise ConfigurationError(f"y_max must be >= {MIN_Y_MAX}, got {y_max}")
    return RadialGrid(int(n), float(y_max))


# ----------------------------------------------------------------------------
# states and records
# ----------------------------------------------------------------------------


@dataclass
class PulledBackState:
    """Pulled-back temperature ``w`` on ``grid`` with boundary radius ``lam``.

    ``previous`` holds ``(w, lam, lam_dot, dt)`` of the last accepted step so the
    energy identities can be checked with the scheme's own time differences.
    """

    t: float
    s: float
    lam: float
    lam_dot: float
    w: np.ndarray
    grid: RadialGrid
    scheme: Scheme = "euler"
    previous: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if self.w.shape != (self.grid.n + 1,):
            raise ConfigurationError(
                f"w has shape {self.w.shape}, grid needs {(self.grid.n + 1,)}")
        if not self.lam > 0:
            raise DomainError(f"lambda must be positive, got {self.lam}")

    @property
    def y(self) -> np.ndarray:
        return self.grid.y

    def copy(self) -> "PulledBackState":
        return replace(self, w=self.w.copy())


@dataclass
class DiagnosticsRecord:
    t: float
    s: float
    lam: float
    lam_dot: float
    dirichlet_energy: float
    mass_l2: float
    integral_u: float
    conserved: float
    energy_residuals: tuple[float, float, float]
    min_u: float
    max_u: float
    trace_defect: float
    far_field_ratio: float

    def row(self) -> dict:
        r0, r1, r2 = self.energy_residuals
        return {
            "t": self.t, "s": self.s, "lambda": self.lam, "lambda_dot": self.lam_dot,
            "dirichlet_energy": self.dirichlet_energy, "mass_l2": self.mass_l2,
            "integral_u": self.integral_u, "conserved": self.conserved,
            "residual_e0": r0, "residual_e1": r1, "residual_e2": r2,
            "min_u": self.min_u, "max_u": self.max_u,
            "trace_defect": self.trace_defect, "far_field_ratio": self.far_field_ratio,
        }


# ----------------------------------------------------------------------------
# discrete operators
# ----------------------------------------------------------------------------


def neumann_trace(w: np.ndarray, grid: RadialGrid) -> float:
    """Second-order one-sided ``w_y(1) = w_xi(0)``."""
    return float((-3.0 * w[0] + 4.0 * w[1] - w[2]) / (2.0 * grid.h))


def _operator_bands(grid: RadialGrid, lam: float, c: float, dt: float
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Tridiagonal ``L`` with ``V dw/dt = L w`` on all nodes (rows 0, n unused).

    Drift faces are centred where that keeps ``L`` off-diagonals nonnegative
    and ``|c| dt <= 1/2``; otherwise upwind, which always does.
    """
    h = grid.h
    n = grid.n
    fw = grid.face_weights  # y^2 at faces
    V = grid.volumes
    diff = 1.0 / (lam * lam * h)
    lower = np.zeros(n + 1)  # coefficient of w_{i-1} in row i
    diag = np.zeros(n + 1)
    upper = np.zeros(n + 1)  # coefficient of w_{i+1} in row i
    # diffusion: (w_{i+1} - 2 w_i + w_{i-1}) / (lam^2 h)
    lower[1:] += diff
    upper[:-1] += diff
    diag[1:-1] -= 2.0 * diff
    if c != 0.0:
        # face value weights (theta_left, theta_right) for w at face i+1/2
        centred = (abs(c) * fw * lam * lam * h <= 2.0) & (abs(c) * dt <= 0.5)
        th_l = np.where(centred, 0.5, 1.0 if c < 0 else 0.0)
        th_r = 1.0 - th_l
        # drift in row i: c [fw_{i+1/2} w_{i+1/2} - fw_{i-1/2} w_{i-1/2} - 2 V_i w_i]
        # face i+1/2 enters row i with +, row i+1 with -
        diag[:-1] += c * fw * th_l
        upper[:-1] += c * fw * th_r
        lower[1:] -= c * fw * th_l
        diag[1:] -= c * fw * th_r
        diag[1:-1] -= 2.0 * c * V[1:-1]
    return lower, diag, upper


def _apply_bands(bands, w: np.ndarray) -> np.ndarray:
    lower, diag, upper = bands
    out = diag * w
    out[1:] += lower[1:] * w[:-1]
    out[:-1] += upper[:-1] * w[1:]
    return out


def _solve_interior(grid: RadialGrid, bands, theta: float, dt: float,
                    rhs: np.ndarray) -> np.ndarray:
    """Solve ``(V/dt - theta L) w = rhs`` on interior nodes with zero Dirichlet ends."""
    lower, diag, upper = bands
    V = grid.volumes
    m = grid.n - 1
    ab = np.zeros((3, m))
    ab[1] = V[1:-1] / dt - theta * diag[1:-1]
    ab[0, 1:] = -theta * upper[1:-2]
    ab[2, :-1] = -theta * lower[2:-1]
    w = np.zeros(grid.n + 1)
    w[1:-1] = solve_banded((1, 1), ab, rhs[1:-1], check_finite=False)
    return w


# ----------------------------------------------------------------------------
# stepping
# ----------------------------------------------------------------------------


@dataclass
class StepInfo:
    iterations: int
    halvings: int
    dt: float
    converged: bool


def _advance(state: PulledBackState, dt: float, couple: bool
             ) -> tuple[PulledBackState, int] | None:
    """Attempt one step of size ``dt``; ``None`` when the coupling loop fails."""
    grid = state.grid
    theta = 1.0 if state.scheme == "euler" else 0.5
    lam0, ld0, w0 = state.lam, state.lam_dot, state.w
    V = grid.volumes
    rhs0 = V * w0 / dt
    if theta < 1.0:
        bands0 = _operator_bands(grid, lam0, ld0 / lam0, dt)
        rhs0 = rhs0 + (1.0 - theta) * _apply_bands(bands0, w0)

    def solve_for(ld: float) -> tuple[np.ndarray, float]:
        lam1 = lam0 + dt * (theta * ld + (1.0 - theta) * ld0)
        if not lam1 > 0:
            raise _Collapse()
        bands = _operator_bands(grid, lam1, ld / lam1, dt)
        return _solve_interior(grid, bands, theta, dt, rhs0), lam1

    if not couple:
        w1, _ = solve_for(0.0) if state.lam_dot == 0.0 else solve_for(0.0)
        new = PulledBackState(state.t + dt, state.s + dt / lam0**2, lam0, 0.0, w1, grid,
                              state.scheme, (w0, lam0, ld0, dt))
        return new, 1

    def picard(ld: float) -> tuple[float, np.ndarray, float]:
        w1, lam1 = solve_for(ld)
        return -neumann_trace(w1, grid) / lam1, w1, lam1

    try:
        x0 = ld0
        x1, w1, lam1 = picard(x0)
        it = 1
        history = [x0, x1]
        while it < COUPLING_MAX_ITER:
            if abs(x1 - x0) <= COUPLING_TOL * max(abs(x1), 1e-300):
                break
            x2, w1, lam1 = picard(x1)
            it += 1
            # Aitken extrapolation on three Picard iterates
            den = x2 - 2.0 * x1 + x0
            if len(history) >= 2 and den != 0.0 and it % 2 == 0:
                xa = x2 - (x2 - x1) ** 2 / den
                if np.isfinite(xa) and abs(xa - x2) < 10.0 * abs(x2 - x1) + 1e-300:
                    xb, wb, lb = picard(xa)
                    it += 1
                    if abs(xb - xa) < abs(x2 - x1):
                        x0, x1, w1, lam1 = xa, xb, wb, lb
                        continue
            x0, x1 = x1, x2
        else:
            x1, w1, lam1, it2 = _secant(picard, ld0, x1)
            it += it2
        if abs(x1 - x0) > COUPLING_TOL * max(abs(x1), 1e-300):
            x1, w1, lam1, it2 = _secant(picard, x0, x1)
            it += it2
    except (_Collapse, _NoConvergence):
        return None
    ld = x1
    # lambda consistent with the converged speed
    lam1 = lam0 + dt * (theta * ld + (1.0 - theta) * ld0)
    ds = dt / (lam0 * lam1)
    new = PulledBackState(state.t + dt, state.s + ds, lam1, ld, w1, grid, state.scheme,
                          (w0, lam0, ld0, dt))
    return new, it


class _Collapse(Exception):
    pass


class _NoConvergence(Exception):
    pass


def _secant(picard: Callable, x0: float, x1: float):
    """Safeguarded secant on ``g(x) = picard(x) - x``."""
    g0 = picard(x0)[0] - x0
    out = picard(x1)
    g1 = out[0] - x1
    for it in range(COUPLING_MAX_ITER):
        if g1 == g0:
            break
        x2 = x1 - g1 * (x1 - x0) / (g1 - g0)
        out = picard(x2)
        g2 = out[0] - x2
        x0, g0, x1, g1 = x1, g1, x2, g2
        if abs(x1 - x0) <= COUPLING_TOL * max(abs(x1), 1e-300):
            return x1, out[1], out[2], it + 2
    raise _NoConvergence()


def step(state: PulledBackState, dt: float, couple: bool = True
         ) -> tuple[PulledBackState, StepInfo]:
    """One implicit step; halves ``dt`` up to 10 times when the coupling loop fails."""
    if not dt > 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    h = 0
    while True:
        res = _advance(state, dt, couple)
        if res is not None:
            new, it = res
            return new, StepInfo(it, h, dt, True)
        h += 1
        if h > MAX_HALVINGS:
            raise NumericalError(
                f"coupling loop failed after {MAX_HALVINGS} step halvings at t={state.t:.6g}")
        dt *= 0.5


# ----------------------------------------------------------------------------
# diagnostics
# ----------------------------------------------------------------------------


def _norms(w: np.ndarray, grid: RadialGrid) -> dict:
    """``||w||^2, ||grad w||^2, ||Lap w||^2, ||grad Lap w||^2`` over the plane region."""
    xi = grid.xi
    e2 = np.exp(2.0 * xi)
    wx = np.gradient(w, grid.h, edge_order=2)
    wxx = np.gradient(wx, grid.h, edge_order=2)
    lap = wxx / e2
    dlap = np.gradient(lap, grid.h, edge_order=2)
    two_pi = 2.0 * math.pi
    return {
        "l2": two_pi * trapezoid(w * w * e2, dx=grid.h),
        "grad": two_pi * trapezoid(wx * wx, dx=grid.h),
        "lap": two_pi * trapezoid(lap * lap * e2, dx=grid.h),
        "dlap": two_pi * trapezoid(dlap * dlap, dx=grid.h),
    }


def _fv_dirichlet(w: np.ndarray, grid: RadialGrid) -> float:
    return 2.0 * math.pi * float(np.sum(np.diff(w) ** 2) / grid.h)


def _energy_residuals(state: PulledBackState) -> tuple[float, float, float]:
    if state.previous is None:
        return (0.0, 0.0, 0.0)
    w0, lam0, ld0, dt = state.previous
    theta = 1.0 if state.scheme == "euler" else 0.5
    n0 = _norms(w0, state.grid)
    n1 = _norms(state.w, state.grid)
    lam1, ld1 = state.lam, state.lam_dot

    def mix(a, b):
        return theta * b + (1.0 - theta) * a

    def rel(terms: Sequence[float]) -> float:
        scale = max(abs(x) for x in terms)
        return 0.0 if scale == 0.0 else abs(sum(terms)) / scale

    e0 = [
        0.5 * (n1["l2"] - n0["l2"]) / dt,
        mix(n0["grad"] / lam0**2, n1["grad"] / lam1**2),
        mix(ld0 / lam0 * n0["l2"], ld1 / lam1 * n1["l2"]),
    ]
    e1 = [
        0.5 * (n1["grad"] - n0["grad"]) / dt,
        mix(n0["lap"] / lam0**2, n1["lap"] / lam1**2),
        -mix(math.pi * lam0 * ld0**3, math.pi * lam1 * ld1**3),
    ]
    # third identity, derived from D_t = c (Lambda D + 2 D) + Lap D / lambda^2 with
    # D(1) = (lambda lambda')^2 and D_y(1) = lambda^2 (g' - c D(1)), g = -lambda lambda'
    e2 = [
        0.5 * (n1["lap"] - n0["lap"]) / dt,
        -(2.0 * math.pi / 3.0) * ((lam1 * ld1) ** 3 - (lam0 * ld0) ** 3) / dt,
        mix(n0["dlap"] / lam0**2, n1["dlap"] / lam1**2),
        -mix(ld0 / lam0 * n0["lap"], ld1 / lam1 * n1["lap"]),
        -mix(math.pi * ld0**5 * lam0**3, math.pi * ld1**5 * lam1**3),
    ]
    return (rel(e0), rel(e1), rel(e2))


def diagnostics(state: PulledBackState) -> DiagnosticsRecord:
    """Energies, conserved quantity and identity defects of the last step."""
    g = state.grid
    w = state.w
    V = g.volumes
    integral_u = 2.0 * math.pi * state.lam**2 * float(np.sum(V[1:-1] * w[1:-1]))
    mass_l2 = 2.0 * math.pi * state.lam**2 * float(np.sum(V[1:-1] * w[1:-1] ** 2))
    wmax = float(np.max(np.abs(w)))
    mid = int(np.searchsorted(g.y, 0.5 * g.y_max))
    far = float(np.max(np.abs(w[mid:]))) / wmax if wmax > 0 else 0.0
    return DiagnosticsRecord(
        t=state.t, s=state.s, lam=state.lam, lam_dot=state.lam_dot,
        dirichlet_energy=_fv_dirichlet(w, g),
        mass_l2=mass_l2,
        integral_u=integral_u,
        conserved=integral_u - math.pi * state.lam**2,
        energy_residuals=_energy_residuals(state),
        min_u=float(np.min(w)),
        max_u=float(np.max(w)),
        trace_defect=abs(neumann_trace(w, g) + state.lam_dot * state.lam),
        far_field_ratio=far,
    )


def annulus_energy_share(state: PulledBackState, R: float) -> float:
    """Fraction of the Dirichlet energy inside ``r <= R`` (``y <= R / lambda``)."""
    g = state.grid
    dw2 = np.diff(state.w) ** 2
    total = float(np.sum(dw2))
    if total == 0.0:
        return 0.0
    faces = np.exp(g.xi[:-1] + 0.5 * g.h)
    return float(np.sum(dw2[faces * state.lam <= R]) / total)


# ----------------------------------------------------------------------------
# initial data
# ----------------------------------------------------------------------------


def cutoff(x) -> np.ndarray:
    """Smooth ``chi`` with ``chi = 1`` on ``x <= 1`` and ``chi = 0`` on ``x >= 2``."""
    x = np.asarray(x, dtype=float)

    def f(t):
        out = np.zeros_like(t)
        pos = t > 0
        out[pos] = np.exp(-1.0 / t[pos])
        return out

    a, b = f(2.0 - x), f(x - 1.0)
    return a / (a + b)


def weighted_inner(f: np.ndarray, g: np.ndarray, grid: RadialGrid, b: float) -> float:
    """Discrete ``(f, g)_b = int f g exp(-b y^2 / 2) y dy`` with the cell measures."""
    y = grid.y
    rho = np.exp(-0.5 * b * y * y)
    return float(np.sum(grid.volumes * rho * f * g))


_EIGEN_CACHE: dict[tuple[float, int, int], list[EigenPair]] = {}


def _eigen(b: float, K: int, n: int = DEFAULT_SPECTRAL_N) -> list[EigenPair]:
    key = (float(b), int(K), int(n))
    if key not in _EIGEN_CACHE:
        if len(_EIGEN_CACHE) > 64:
            _EIGEN_CACHE.clear()
        _EIGEN_CACHE[key] = eig_pairs(assemble(b, n=n), K)
    return _EIGEN_CACHE[key]


def eta_on_grid(b: float, k: int, grid: RadialGrid, n: int = DEFAULT_SPECTRAL_N) -> np.ndarray:
    """``eta_{b,k}(y)`` on the PDE grid, zero beyond the spectral window."""
    pair = _eigen(b, k, n)[k]
    y = grid.y
    out = np.zeros_like(y)
    inside = np.sqrt(b) * y <= pair.grid.z_max
    out[inside] = renormalized_eigenfunction(pair, y[inside])
    return out


@dataclass
class PreparedData:
    state: PulledBackState
    alpha: float
    B: float
    orthogonality: float
    dirichlet_energy: float
    b: float
    modes: np.ndarray


def init_prepared_data(b0: float, k: int = 0, grid: RadialGrid | None = None,
                       lam0: float = 1.0, s0: float | None = None,
                       scheme: Scheme = "euler") -> PreparedData:
    """Compactly supported melting data ``b0 alpha chi_B eta_{b0,0}`` or its excited analogue.

    ``B^2 = |log b0| / (2 b0)``; ``alpha`` makes ``(u0 - b0 eta, eta)_{b0}`` vanish
    in the discrete inner product.
    """
    if not 0 < b0 <= 1e-2:
        raise DomainError(f"b0 must lie in (0, 1e-2], got {b0}")
    if k < 0:
        raise DomainError(f"k must be nonnegative, got {k}")
    grid = grid or make_radial_grid()
    B = math.sqrt(abs(math.log(b0)) / (2.0 * b0))
    if grid.y_max < 2.0 * B:
        raise ConfigurationError(f"y_max = {grid.y_max:.4g} does not reach 2B = {2 * B:.4g}")
    chi = cutoff(grid.y / B)
    if k == 0:
        eta = eta_on_grid(b0, 0, grid)
        alpha = weighted_inner(eta, eta, grid, b0) / weighted_inner(chi * eta, eta, grid, b0)
        w = b0 * alpha * chi * eta
        eps = w - b0 * eta
        ortho = weighted_inner(eps, eta, grid, b0) / weighted_inner(b0 * eta, eta, grid, b0)
        s_init = k0_initial_time(b0) if s0 is None else s0
        b, modes = b0, np.array([b0])
    else:
        s_init = (1.0 / (2.0 * k * b0)) if s0 is None else s0
        approx = approximate_solution(s_init, k, "melt")
        b, modes = approx.scale, approx.modes
        w = np.zeros(grid.n + 1)
        for j, bj in enumerate(modes):
            if bj != 0.0:
                w += bj * eta_on_grid(b, j, grid)
        w *= chi
        alpha, ortho = 1.0, 0.0
    w[0] = 0.0
    w[-1] = 0.0
    lam_dot = -neumann_trace(w, grid) / lam0
    state = PulledBackState(0.0, s_init, lam0, lam_dot, w, grid, scheme)
    return PreparedData(state, float(alpha), B, float(ortho), _fv_dirichlet(w, grid),
                        float(b), np.asarray(modes, float))


def init_profile(profile: Callable[[np.ndarray], np.ndarray], grid: RadialGrid | None = None,
                 lam0: float = 1.0, s0: float = 0.0, scheme: Scheme = "euler",
                 couple: bool = True) -> PulledBackState:
    """State from an arbitrary profile ``w0(y)`` (boundary values forced to zero)."""
    grid = grid or make_radial_grid()
    w = np.asarray(profile(grid.y), dtype=float).copy()
    w[0] = 0.0
    w[-1] = 0.0
    lam_dot = -neumann_trace(w, grid) / lam0 if couple else 0.0
    return PulledBackState(0.0, s0, lam0, lam_dot, w, grid, scheme)


# ----------------------------------------------------------------------------
# runs
# ----------------------------------------------------------------------------


@dataclass
class RunResult:
    states: list[PulledBackState]
    records: list[DiagnosticsRecord]
    status: str
    steps: int
    final: PulledBackState
    projections: list = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r.row()[name] for r in self.records])


def run(state0: PulledBackState, dt0: float, t_end: float | None = None,
        lambda_floor: float | None = None, s_end: float | None = None,
        every: int = 1, couple: bool = True, growth: float = 0.0,
        dt_max: float = math.inf, max_steps: int = 1_000_000,
        project_every: int = 0, project_k: int = 0,
        keep_states: bool = False) -> RunResult:
    """March until ``t_end``, ``s_end`` or ``lambda <= lambda_floor``.

    The step is ``dt0 (lambda/lambda0)^2`` so renormalised time advances evenly;
    ``growth > 0`` additionally allows ``dt = growth * t`` for long freezing runs.
    """
    if not dt0 > 0:
        raise ConfigurationError("dt0 must be positive")
    if t_end is None and s_end is None and lambda_floor is None:
        raise ConfigurationError("run needs t_end, s_end or lambda_floor")
    lam0 = state0.lam
    floor = DEFAULT_FLOOR_FRACTION * lam0 if lambda_floor is None else lambda_floor
    state = state0
    records = [diagnostics(state)]
    states = [state.copy()] if keep_states else []
    projections = []
    proj_prev = None
    if project_every:
        proj_prev = project_modulation(state, project_k)
        projections.append(proj_prev)
    status = "max_steps"
    n = 0
    while n < max_steps:
        if state.lam <= floor:
            status = "lambda_floor"
            break
        if t_end is not None and state.t >= t_end * (1 - 1e-14):
            status = "t_end"
            break
        if s_end is not None and state.s >= s_end * (1 - 1e-14):
            status = "s_end"
            break
        dt = dt0 * (state.lam / lam0) ** 2
        if growth > 0:
            dt = max(dt, growth * state.t)
        dt = min(dt, dt_max)
        if t_end is not None:
            dt = min(dt, t_end - state.t)
        if s_end is not None:
            dt = min(dt, (s_end - state.s) * state.lam**2 * 1.0000001)
        state, _ = step(state, dt, couple)
        n += 1
        if n % every == 0:
            records.append(diagnostics(state))
            if keep_states:
                states.append(state.copy())
        if project_every and n % project_every == 0:
            proj_prev = project_modulation(state, project_k, previous=proj_prev)
            projections.append(proj_prev)
    if n % every != 0:
        records.append(diagnostics(state))
        if keep_states:
            states.append(state.copy())
    if project_every and n % project_every != 0:
        projections.append(project_modulation(state, project_k, previous=proj_prev))
    return RunResult(states, records, status, n, state, projections)


# ----------------------------------------------------------------------------
# projection onto the modulated family
# ----------------------------------------------------------------------------


@dataclass
class Projection:
    s: float
    t: float
    lam: float
    b: float
    modes: np.ndarray
    eps_norm: float
    phi: float
    a: float
    ok: bool


def _project_fixed_b(w: np.ndarray, grid: RadialGrid, b: float, k: int
                     ) -> tuple[np.ndarray, float, list[np.ndarray]]:
    etas = [eta_on_grid(b, j, grid) for j in range(k + 1)]
    modes = np.array([weighted_inner(w, e, grid, b) / weighted_inner(e, e, grid, b)
                      for e in etas])
    eps = w - sum(m * e for m, e in zip(modes, etas))
    return modes, math.sqrt(max(weighted_inner(eps, eps, grid, b), 0.0)), etas


def project_modulation(state: PulledBackState, k: int = 0, b_guess: float | None = None,
                       previous: Projection | None = None, rtol: float = 1e-10
                       ) -> Projection:
    """Split ``w = sum b_j eta_{b,j} + eps`` with ``eps`` orthogonal to ``eta_{b,j}``.

    For ``k = 0`` the scale solves ``F(b) = (w - b eta_b, eta_b)_b = 0`` by the
    secant method; for ``k >= 1`` it follows the explicit family at the current ``s``.
    ``Phi = b_s + 2 b (a - b)`` uses the difference with ``previous``.
    """
    grid = state.grid
    a = -state.lam * state.lam_dot
    ok = True
    if k == 0:
        def F(b):
            eta = eta_on_grid(b, 0, grid)
            return weighted_inner(state.w - b * eta, eta, grid, b) / \
                weighted_inner(eta, eta, grid, b)

        b0 = b_guess or (previous.b if previous is not None else None)
        if b0 is None:
            b0 = max(min(a, 1e-2), 1e-12) if a > 0 else 1e-3
        x0, x1 = b0, b0 * (1.0 + 1e-3)
        f0, f1 = F(x0), F(x1)
        b = x1
        for _ in range(PROJECTION_MAX_ITER):
            if f1 == f0:
                break
            x2 = x1 - f1 * (x1 - x0) / (f1 - f0)
            if not 0 < x2 < 0.1:
                ok = False
                break
            x0, f0 = x1, f1
            x1, f1 = x2, F(x2)
            b = x1
            if abs(x1 - x0) <= rtol * abs(x1):
                break
        else:
            ok = False
        if not ok:
            b = previous.b if previous is not None else b0
    else:
        from .modulation_dynamics import melt_b_exact
        b = float(melt_b_exact(state.s, k))
    modes, eps_norm, _ = _project_fixed_b(state.w, grid, b, k)
    phi = math.nan
    if previous is not None and state.s > previous.s:
        bs = (b - previous.b) / (state.s - previous.s)
        a_mid = 0.5 * (a + previous.a)
        b_mid = 0.5 * (b + previous.b)
        phi = bs + 2.0 * b_mid * (a_mid - b_mid)
    return Projection(state.s, state.t, state.lam, float(b), modes, eps_norm, phi, a, ok)


# ----------------------------------------------------------------------------
# scaling and far-field limits
# ----------------------------------------------------------------------------


def rescale_solution(state: PulledBackState, mu: float) -> PulledBackState:
    """Image under ``u -> u(mu^2 t, mu x)``: radius ``lambda/mu``, time ``t/mu^2``.

    The pulled-back profile is unchanged, so the Dirichlet energy is too.
    """
    if not mu > 0:
        raise DomainError(f"mu must be positive, got {mu}")
    prev = None
    if state.previous is not None:
        w0, lam0, ld0, dt = state.previous
        prev = (w0, lam0 / mu, ld0 * mu, dt / mu**2)
    return PulledBackState(state.t / mu**2, state.s, state.lam / mu, state.lam_dot * mu,
                           state.w.copy(), state.grid, state.scheme, prev)


def lambda_infinity_formula(state: PulledBackState) -> float:
    """``sqrt(lambda^2 - (1/pi) int u)`` from the conservation law."""
    d = diagnostics(state)
    val = state.lam**2 - d.integral_u / math.pi
    if val <= 0:
        raise DomainError("data melts the whole disk; no limiting radius")
    return math.sqrt(val)


def extrapolate_lambda_infinity(t: np.ndarray, lam: np.ndarray, decades: float = 2.0
                                ) -> tuple[float, np.ndarray]:
    """Fit ``lambda = lam_inf - c1/log t - c2/log^2 t`` over the last ``decades`` of ``t``."""
    t = np.asarray(t, float)
    lam = np.asarray(lam, float)
    sel = (t > 0) & (t >= t[-1] / 10**decades)
    if sel.sum() < 4:
        raise NumericalError("too few samples for the lambda_inf fit")
    L = np.log(t[sel])
    X = np.vstack([np.ones_like(L), -1.0 / L, -1.0 / L**2]).T
    coef = np.linalg.lstsq(X, lam[sel], rcond=None)[0]
    return float(coef[0]), coef
