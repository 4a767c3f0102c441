"""Reduced modulation ODEs for melting and freezing, shooting, and rate fits.

State vectors used by the integrator are laid out as
``[log(lambda), t, b, b_0, ..., b_k]`` (melting, ``k >= 1``),
``[log(lambda), t, b]`` (melting, ``k = 0``) and
``[log(lambda), t, B, B_0, ..., B_k]`` (freezing).
Tracking ``log(lambda)`` keeps deep melting runs away from underflow.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np
from scipy.integrate import cumulative_simpson, quad, solve_ivp
from scipy.optimize import brentq

from .errors import DomainError, NumericalError, RegimeError, StiffnessError
from .weighted_basis import DEFAULT_B_STAR, alpha_seq

Regime = Literal["melt", "freeze"]

DEFAULT_S0 = 50.0
DEFAULT_K_BOUND = 10.0
DEFAULT_TOL = 1e-10
STEP_FLOOR = 1e-14


# ----------------------------------------------------------------------------
# states
# ----------------------------------------------------------------------------


@dataclass
class ModulationState:
    """Point of the reduced system.  ``scale`` is ``b`` (melting) or ``B`` (freezing)."""

    s: float
    lam: float
    scale: float
    modes: np.ndarray
    slope: float
    t: float = 0.0
    regime: Regime = "melt"

    @property
    def k(self) -> int:
        return len(self.modes) - 1

    def vector(self) -> np.ndarray:
        if self.regime == "melt" and self.k == 0:
            return np.array([np.log(self.lam), self.t, self.scale])
        return np.concatenate([[np.log(self.lam), self.t, self.scale], self.modes])

    @classmethod
    def from_vector(cls, s: float, y: np.ndarray, k: int, regime: Regime) -> "ModulationState":
        lam = float(np.exp(y[0]))
        scale = float(y[2])
        if regime == "melt" and k == 0:
            modes = np.array([scale])
        else:
            modes = np.asarray(y[3:3 + k + 1], dtype=float)
        slope = closure(scale, modes) if scale > 0 else float("nan")
        if regime == "melt" and k == 0:
            slope = scale
        return cls(s=float(s), lam=lam, scale=scale, modes=modes, slope=slope,
                   t=float(y[1]), regime=regime)


def closure(scale: float, modes: Sequence[float]) -> float:
    """Boundary slope ``a = sum_j b_j (1 + 2 alpha_j / |log b|)``."""
    al = alpha_seq(len(modes) - 1).as_float()
    L = abs(np.log(scale))
    return float(np.sum(np.asarray(modes) * (1.0 + 2.0 * al / L)))


# ----------------------------------------------------------------------------
# right-hand sides
# ----------------------------------------------------------------------------


def _check_scale(x: float, name: str, b_star: float) -> None:
    if not x > 0:
        raise DomainError(f"{name} = {x} left the domain (must stay positive)")
    if x >= b_star:
        raise DomainError(f"{name} = {x} exceeds b* = {b_star}")


def melting_rhs(state: ModulationState, k: int | None = None,
                b_star: float = DEFAULT_B_STAR) -> ModulationState:
    """Time derivatives of the melting system, returned as a ``ModulationState``.

    For ``k = 0`` this is ``b_s = -2 b^2/|log b|`` with ``a = b``.  For ``k >= 1``
    each mode obeys ``(b_j)_s = -(2j + 2/|log b|) b b_j - 2 (a - b) b_j / |log b|``
    with ``b_s = -2 b (a - b)`` and ``a`` from :func:`closure`.
    """
    k = state.k if k is None else k
    b = state.scale
    _check_scale(b, "b", b_star)
    if state.lam <= 0:
        raise DomainError("lambda must be positive")
    L = abs(np.log(b))
    if k == 0:
        bs = -2.0 * b * b / L
        return ModulationState(state.s, -b * state.lam, bs, np.array([bs]), float("nan"),
                               state.lam**2, "melt")
    modes = np.asarray(state.modes, dtype=float)
    a = closure(b, modes)
    j = np.arange(k + 1)
    dmodes = -(2 * j + 2.0 / L) * b * modes - 2.0 * (a - b) * modes / L
    bs = -2.0 * b * (a - b)
    return ModulationState(state.s, -a * state.lam, bs, dmodes, float("nan"),
                           state.lam**2, "melt")


def freezing_rhs(state: ModulationState, k: int | None = None,
                 b_star: float = DEFAULT_B_STAR) -> ModulationState:
    """Time derivatives of the freezing system.

    ``(B_j)_s = -(2j + 2 + 2/|log B|) B B_j - 2 (B - A) B_j / |log B|``,
    ``B_s = -2 B (B - A)``, ``A`` from :func:`closure`, ``lambda_s = A lambda``.
    """
    k = state.k if k is None else k
    B = state.scale
    _check_scale(B, "B", b_star)
    L = abs(np.log(B))
    modes = np.asarray(state.modes, dtype=float)
    A = closure(B, modes)
    j = np.arange(k + 1)
    dmodes = -(2 * j + 2 + 2.0 / L) * B * modes - 2.0 * (B - A) * modes / L
    Bs = -2.0 * B * (B - A)
    return ModulationState(state.s, A * state.lam, Bs, dmodes, float("nan"),
                           state.lam**2, "freeze")


def _vector_field(regime: Regime, k: int, b_star: float) -> Callable:
    al = alpha_seq(k).as_float()
    j = np.arange(k + 1)

    if regime == "melt" and k == 0:
        def f(s, y):
            b = y[2]
            if b <= 0:
                return np.array([0.0, 0.0, 0.0])
            L = -np.log(b)
            return np.array([-b, np.exp(2 * y[0]), -2.0 * b * b / L])
        return f

    shift = 0 if regime == "melt" else 2

    def f(s, y):
        x = y[2]
        out = np.zeros_like(y)
        if x <= 0:
            return out
        L = -np.log(x)
        m = y[3:]
        a = float(np.sum(m * (1.0 + 2.0 * al / L)))
        if regime == "melt":
            out[0] = -a
            out[2] = -2.0 * x * (a - x)
            out[3:] = -(2 * j + 2.0 / L) * x * m - 2.0 * (a - x) * m / L
        else:
            out[0] = a
            out[2] = -2.0 * x * (x - a)
            out[3:] = -(2 * j + shift + 2.0 / L) * x * m - 2.0 * (x - a) * m / L
        out[1] = np.exp(2 * y[0])
        return out

    return f


# ----------------------------------------------------------------------------
# explicit families
# ----------------------------------------------------------------------------


def melt_constants(k: int) -> tuple[float, float]:
    """``c_{k,1} = -(k+1)/(2k^2)`` and ``c_{k,2} = c_{k,1} - (k+1) alpha_k / k``."""
    if k < 1:
        raise DomainError("melting constants need k >= 1; use the k = 0 law instead")
    c1 = -(k + 1) / (2.0 * k * k)
    c2 = c1 - (k + 1) * float(alpha_seq(k)[k]) / k
    return c1, c2


def melt_b_exact(s, k: int):
    c1, _ = melt_constants(k)
    s = np.asarray(s, dtype=float)
    return 1.0 / (2 * k * s) + c1 / (s * np.log(s))


def melt_b_exact_ds(s, k: int):
    c1, _ = melt_constants(k)
    s = np.asarray(s, dtype=float)
    L = np.log(s)
    return -1.0 / (2 * k * s * s) - c1 * (L + 1.0) / (s * s * L * L)


def melt_bk_exact(s, k: int):
    _, c2 = melt_constants(k)
    s = np.asarray(s, dtype=float)
    return (k + 1) / (2.0 * k * s) + c2 / (s * np.log(s))


def approximate_solution(s: float, k: int, regime: Regime = "melt",
                         lam: float = 1.0, t: float = 0.0) -> ModulationState:
    """Explicit approximate solution of the reduced system at time ``s``."""
    if s <= 1:
        raise DomainError("s must exceed 1 (log s appears in denominators)")
    L = np.log(s)
    if regime == "melt":
        if k == 0:
            raise DomainError("k = 0 melting has no explicit family; use the b law")
        c1, c2 = melt_constants(k)
        b = 1.0 / (2 * k * s) + c1 / (s * L)
        modes = np.zeros(k + 1)
        modes[k] = (k + 1) / (2.0 * k * s) + c2 / (s * L)
        a = (k + 1) / (2.0 * k * s) + c1 / (s * L)
        return ModulationState(s, lam, b, modes, a, t, "melt")
    if regime == "freeze":
        B = 1.0 / (2.0 * s)
        modes = np.zeros(k + 1)
        modes[k] = 1.0 / (s ** (k + 1) * L * L)
        return ModulationState(s, lam, B, modes, closure(B, modes), t, "freeze")
    raise DomainError(f"unknown regime {regime!r}")


def approximate_residuals(s: float, k: int, regime: Regime = "melt") -> np.ndarray:
    """Residuals of the explicit family in the reduced equations.

    Melting returns the three residuals (``b_k`` law, ``b`` law with ``a^e``,
    closure defect); freezing returns the ``B_k`` residual with ``A^e = B_k^e``.
    Derivatives are exact.
    """
    L = np.log(s)
    if regime == "melt":
        c1, c2 = melt_constants(k)
        b = melt_b_exact(s, k)
        bk = melt_bk_exact(s, k)
        ae = (k + 1) / (2.0 * k * s) + c1 / (s * L)
        Lb = abs(np.log(b))
        dbk = -(k + 1) / (2.0 * k * s * s) - c2 * (L + 1) / (s * s * L * L)
        r1 = dbk + b * bk * (2 * k + 2.0 / Lb) + 2 * (ae - b) * bk / Lb
        r2 = melt_b_exact_ds(s, k) + 2 * b * (ae - b)
        r3 = ae - bk * (1 + 2 * float(alpha_seq(k)[k]) / Lb)
        return np.array([r1, r2, r3])
    B = 1.0 / (2 * s)
    LB = abs(np.log(B))
    Bk = 1.0 / (s ** (k + 1) * L * L)
    dBk = -(k + 1) / (s ** (k + 2) * L * L) - 2.0 / (s ** (k + 2) * L**3)
    r = dBk + Bk * B * (2 * k + 2 + 2.0 / LB) + 2 * (B - Bk) * Bk / LB
    return np.array([r])


# ----------------------------------------------------------------------------
# integration
# ----------------------------------------------------------------------------


@dataclass
class Trajectory:
    regime: Regime
    k: int
    s: np.ndarray
    y: np.ndarray
    sol: object = field(default=None, repr=False)
    status: str = "completed"
    t_events: list = field(default_factory=list)

    @property
    def log_lam(self) -> np.ndarray:
        return self.y[0]

    @property
    def lam(self) -> np.ndarray:
        return np.exp(self.y[0])

    @property
    def t(self) -> np.ndarray:
        return self.y[1]

    @property
    def scale(self) -> np.ndarray:
        return self.y[2]

    @property
    def modes(self) -> np.ndarray:
        if self.regime == "melt" and self.k == 0:
            return self.y[2:3]
        return self.y[3:]

    def slope(self) -> np.ndarray:
        if self.regime == "melt" and self.k == 0:
            return self.scale.copy()
        al = alpha_seq(self.k).as_float()
        L = np.abs(np.log(self.scale))
        return np.sum(self.modes * (1.0 + 2.0 * al[:, None] / L), axis=0)

    def state(self, i: int) -> ModulationState:
        return ModulationState.from_vector(self.s[i], self.y[:, i], self.k, self.regime)

    def rows(self) -> list[dict]:
        out = []
        a = self.slope()
        for i in range(self.s.size):
            row = {"s": self.s[i], "t": self.t[i], "lambda": self.lam[i],
                   "b_or_B": self.scale[i]}
            for j, m in enumerate(self.modes[:, i]):
                row[f"mode_{j}"] = m
            row["a_or_A"] = a[i]
            out.append(row)
        return out


def sample_points(s0: float, s_end: float, per_decade: int = 200) -> np.ndarray:
    n = max(2, int(np.ceil(np.log10(s_end / s0) * per_decade)) + 1)
    pts = np.geomspace(s0, s_end, n)
    pts[0], pts[-1] = s0, s_end
    return pts


def integrate(system: Regime, k: int, state0: ModulationState, s_end: float,
              tol: float = DEFAULT_TOL, per_decade: int = 200,
              b_star: float = DEFAULT_B_STAR, fixed_step: float | None = None,
              method: str = "RK45") -> Trajectory:
    """Integrate the reduced system from ``state0`` to ``s_end``.

    Adaptive embedded Runge-Kutta 4(5) with dense output sampled at log-spaced
    points.  ``fixed_step`` switches to constant steps for order studies.
    """
    if not 1e-12 <= tol <= 1e-6 and fixed_step is None:
        raise DomainError(f"tol must lie in [1e-12, 1e-6], got {tol}")
    if s_end <= state0.s:
        raise DomainError("s_end must exceed the initial time")
    y0 = state0.vector()
    if not y0[2] > 0:
        raise DomainError("initial scale parameter must be positive")
    f = _vector_field(system, k, b_star)

    def hit_zero(s, y):
        return y[2]
    hit_zero.terminal = True

    def hit_cap(s, y):
        return b_star - y[2]
    hit_cap.terminal = True

    pts = sample_points(state0.s, s_end, per_decade)
    kw: dict = {}
    if fixed_step is not None:
        kw.update(first_step=fixed_step, max_step=fixed_step, rtol=1e3, atol=1e3)
    else:
        atol = np.full(y0.size, tol)
        atol[2:] = 1e-30  # scale and modes are controlled relatively
        kw.update(rtol=tol, atol=atol)
    sol = solve_ivp(f, (state0.s, s_end), y0, method=method, t_eval=pts, dense_output=True,
                    events=[hit_zero, hit_cap], **kw)
    if sol.status == -1:
        last = sol.t[-1] if sol.t.size else state0.s
        raise StiffnessError(f"integrator failed near s={last:.6g}: {sol.message}",
                             state=sol.y[:, -1] if sol.y.size else y0)
    if sol.t.size and sol.status == 0:
        h = np.diff(sol.t)
        if h.size and np.any(h < STEP_FLOOR * sol.t[1:]):
            raise StiffnessError("step underflow", state=sol.y[:, -1])
    status = "completed" if sol.status == 0 else "event"
    if status == "event":
        if sol.t_events[0].size:
            status = "scale_vanished"
        elif sol.t_events[1].size:
            status = "scale_cap"
    return Trajectory(system, k, sol.t, sol.y, sol, status,
                      [e for e in sol.t_events])


def k0_invariant(b, s) -> np.ndarray:
    """``(log b + 1)/b + 2 s``, exactly conserved by the k = 0 law."""
    b = np.asarray(b, dtype=float)
    return (np.log(b) + 1.0) / b + 2.0 * np.asarray(s, dtype=float)


def k0_exact_b(s: float, const: float) -> float:
    """Invert the k = 0 invariant for ``b(s)``."""
    target = const - 2.0 * s
    g = lambda x: (x + 1.0) * np.exp(-x) - target  # noqa: E731  (x = log b)
    x = brentq(g, -700.0, -1.0 - 1e-12, xtol=1e-300, rtol=1e-15)
    return float(np.exp(x))


def k0_initial_time(b0: float) -> float:
    """Time at which the invariant vanishes: ``s0 = -(log b0 + 1)/(2 b0)``."""
    return float(-(np.log(b0) + 1.0) / (2.0 * b0))


def melt_k0_state(b0: float, s0: float | None = None, lam0: float = 1.0) -> ModulationState:
    s0 = k0_initial_time(b0) if s0 is None else s0
    return ModulationState(s0, lam0, b0, np.array([b0]), b0, 0.0, "melt")


def integrator_order(b0: float = 0.05, decades: float = 0.5,
                     steps: Sequence[float] | None = None) -> tuple[float, np.ndarray]:
    """Observed global order of the integrator on the k = 0 law.

    Runs with constant steps ``h``, ``h/2``, ``h/4`` and compares ``b(s_end)``
    against the exact invariant solution.
    """
    st = melt_k0_state(b0)
    s_end = st.s * 10**decades
    const = float(k0_invariant(b0, st.s))
    exact = k0_exact_b(s_end, const)
    span = s_end - st.s
    # coarser steps sit in the pre-asymptotic range, where the ratio reads 6-7
    steps = steps or [span / 40, span / 80, span / 160]
    errs = []
    for h in steps:
        tr = integrate("melt", 0, st, s_end, fixed_step=h, per_decade=4)
        errs.append(abs(tr.scale[-1] - exact))
    errs = np.array(errs)
    orders = np.log2(errs[:-1] / errs[1:])
    return float(np.mean(orders)), errs


# ----------------------------------------------------------------------------
# shooting for k >= 1
# ----------------------------------------------------------------------------


def a_matrix(k: int) -> np.ndarray:
    d = 1.0 / (k * (k + 1))
    return np.array([[-1.0, -1.0], [1.0, 1.0 + d]])


@dataclass
class ShootingState:
    """Rotated coordinates of the perturbation around the explicit melting family.

    ``W_unstable`` multiplies the eigenvector of ``A_k`` with positive eigenvalue
    ``mu1`` and ``W_stable`` the one with ``mu2 < 0``.
    """

    k: int
    V: np.ndarray
    W_stable: float
    W_unstable: float
    A: np.ndarray
    mu1: float
    mu2: float
    eigvecs: np.ndarray = field(repr=False)


def eigen_structure(k: int) -> tuple[float, float, np.ndarray]:
    """Eigenvalues ``mu1 > 0 > mu2`` of ``A_k`` and matching eigenvector columns."""
    A = a_matrix(k)
    w, v = np.linalg.eig(A)
    order = np.argsort(-w.real)
    w, v = w.real[order], v.real[:, order]
    return float(w[0]), float(w[1]), v


def shooting_state(k: int, V: np.ndarray) -> ShootingState:
    """Rotate ``(V_k, V_{k-1})`` into eigen-coordinates of ``A_k``."""
    mu1, mu2, vecs = eigen_structure(k)
    W = np.linalg.solve(vecs, np.array([V[k], V[k - 1]]))
    return ShootingState(k, np.asarray(V, float), float(W[1]), float(W[0]), a_matrix(k),
                         mu1, mu2, vecs)


def v_scale(s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    return s * np.log(s) ** 1.5


def _shoot_field(k: int) -> Callable:
    """Nonlinear mode system with ``b(s)`` frozen to the explicit family.

    ``(b_j)_s = -(2j + 2/|log b|) b b_j - 2(a - b) b_j/|log b|
                 - (j b_j - (j+1) b_{j+1}) Phi / b``, ``Phi = b_s + 2 b (a - b)``.
    State ``[log(lambda), t, b_0..b_k]``.
    """
    al = alpha_seq(k).as_float()
    j = np.arange(k + 1)

    def f(s, y):
        b = melt_b_exact(s, k)
        bs = melt_b_exact_ds(s, k)
        L = -np.log(b)
        m = y[2:]
        a = float(np.sum(m * (1.0 + 2.0 * al / L)))
        phi = bs + 2.0 * b * (a - b)
        up = np.zeros_like(m)
        up[:-1] = (j[:-1] + 1) * m[1:]
        out = np.empty_like(y)
        out[0] = -a
        out[1] = np.exp(2 * y[0])
        out[2:] = (-(2 * j + 2.0 / L) * b * m - 2.0 * (a - b) * m / L
                   - (j * m - up) * phi / b)
        return out

    return f


def _initial_modes(k: int, s0: float, V0: np.ndarray) -> np.ndarray:
    modes = np.zeros(k + 1)
    modes[k] = melt_bk_exact(s0, k)
    return modes + V0 / v_scale(s0)


def _coords(k: int, s: np.ndarray, modes: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    """Rows ``V_0..V_{k-2}, W_unstable, W_stable`` along a trajectory."""
    tilde = modes.copy()
    tilde[k] -= melt_bk_exact(s, k)
    V = tilde * v_scale(s)
    W = np.linalg.solve(vecs, np.vstack([V[k], V[k - 1]]))
    return np.vstack([V[: k - 1], W[0], W[1]])


@dataclass
class ShotResult:
    exit_s: float
    side: int  # sign of the coordinate that left the box (or of W at the end)
    which: int  # index of the coordinate that left the box; -1 if none did
    final: np.ndarray = field(default_factory=lambda: np.zeros(0))
    traj: Trajectory | None = None

    @property
    def survived(self) -> bool:
        return self.which == -1


def _shoot_once(k: int, s0: float, s_end: float, V_lower: np.ndarray, w_unstable: float,
                w_stable: float, K_bound: float, tol: float, keep: bool = False,
                per_decade: int = 100, loose_lower: float | None = None) -> ShotResult:
    """One forward run from the rotated data; stops when a coordinate leaves the box.

    With ``loose_lower`` set, the ``V_0..V_{k-2}`` coordinates only stop the run
    beyond that larger bound, so the ``W`` exit side is not masked by them.
    """
    mu1, mu2, vecs = eigen_structure(k)
    # data on or outside the box exits at once (event functions need a sign change)
    start = np.array(list(V_lower) + [w_unstable], dtype=float)
    for idx, v in enumerate(start):
        if abs(v) >= K_bound:
            return ShotResult(float(s0), int(np.sign(v)), idx, start)
    pair = vecs @ np.array([w_unstable, w_stable])
    V0 = np.zeros(k + 1)
    V0[k], V0[k - 1] = pair
    V0[: k - 1] = V_lower
    y0 = np.concatenate([[0.0, 0.0], _initial_modes(k, s0, V0)])
    f = _shoot_field(k)
    inv = np.linalg.inv(vecs)
    sc = lambda s: v_scale(s)  # noqa: E731

    events = []

    def make_event(idx):
        if idx < k - 1:
            bound = K_bound if loose_lower is None else loose_lower

            def ev(s, y):
                return bound - abs(y[2 + idx] * sc(s))
        else:
            def ev(s, y):
                Vk = (y[2 + k] - melt_bk_exact(s, k)) * sc(s)
                Vk1 = y[2 + k - 1] * sc(s)
                return K_bound - abs(inv[0, 0] * Vk + inv[0, 1] * Vk1)
        ev.terminal = True
        return ev

    for idx in range(k):
        events.append(make_event(idx))
    pts = sample_points(s0, s_end, per_decade) if keep else None
    sol = solve_ivp(f, (s0, s_end), y0, method="RK45", rtol=tol, atol=1e-30,
                    t_eval=pts, dense_output=keep, events=events)
    if sol.status == -1:
        raise StiffnessError(f"shooting integration failed: {sol.message}", state=sol.y[:, -1])
    traj = None
    if keep:
        yy = np.vstack([sol.y[0], sol.y[1], melt_b_exact(sol.t, k), sol.y[2:]])
        traj = Trajectory("melt", k, sol.t, yy, sol.sol,
                          "completed" if sol.status == 0 else "exited")
    if sol.status == 0:
        c = _coords(k, sol.t[-1:], sol.y[2:, -1:], vecs)[:k, 0]
        return ShotResult(float(sol.t[-1]), int(np.sign(c[k - 1])) or 1, -1, c, traj)
    for idx, te in enumerate(sol.t_events):
        if te.size:
            ye = sol.y_events[idx][0]
            c = _coords(k, np.array([te[0]]), ye[2:, None], vecs)[:k, 0]
            return ShotResult(float(te[0]), int(np.sign(c[idx])), idx, c, traj)
    raise NumericalError("shooting run stopped without reaching s_end or an exit event")


@dataclass
class ShootingResult:
    k: int
    s0: float
    s_end: float
    V_lower: np.ndarray
    w_unstable: float
    w_stable: float
    exit_s: float
    K_bound: float
    mu1: float
    mu2: float
    bisections: int
    traj: Trajectory | None = None

    @property
    def survived(self) -> bool:
        return self.exit_s >= self.s_end


LOOSE_FACTOR = 100.0


def _bisect(side_of: Callable[[float], int], lo: float, hi: float, width: float
            ) -> tuple[float, int]:
    s_lo, s_hi = side_of(lo), side_of(hi)
    if s_lo == 0:
        return lo, 0
    if s_hi == 0:
        return hi, 0
    if s_lo == s_hi:
        raise NumericalError(
            "codimension mismatch: both ends of the bracket exit on the same side")
    it = 0
    while hi - lo > width:
        mid = 0.5 * (lo + hi)
        sm = side_of(mid)
        it += 1
        if sm == 0:
            return mid, it
        if sm == s_lo:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi), it


def shoot_unstable(k: int, s0: float = DEFAULT_S0, s_end: float | None = None,
                   K_bound: float = DEFAULT_K_BOUND, tol: float = 1e-11,
                   w_stable: float = 0.5, rel_width: float = 1e-12) -> ShootingResult:
    """Tune the unstable coordinates so the perturbation stays in the ``K_bound`` box.

    Bisection over ``W`` (the coordinate along the expanding eigenvector of
    ``A_k``); for ``k >= 2`` an outer bisection runs over ``V_0..V_{k-2}``.
    """
    if k < 1:
        raise DomainError("shooting needs k >= 1")
    if k > 2:
        raise DomainError("nested shooting implemented for k <= 2")
    s_end = 1e3 * s0 if s_end is None else s_end
    mu1, mu2, _ = eigen_structure(k)
    width = rel_width * 2 * K_bound
    count = [0]

    def inner(v_lower: np.ndarray) -> tuple[float, ShotResult]:
        def side(w):
            count[0] += 1
            r = _shoot_once(k, s0, s_end, v_lower, w, w_stable, K_bound, tol,
                            loose_lower=LOOSE_FACTOR * K_bound)
            return int(np.sign(r.final[k - 1])) or 1
        w, _ = _bisect(side, -K_bound, K_bound, width)
        return w, _shoot_once(k, s0, s_end, v_lower, w, w_stable, K_bound, tol)

    if k == 1:
        w, res = inner(np.zeros(0))
        v_lower = np.zeros(0)
    else:
        # sign bisection over V_0 is ill-posed here: the inner tuned W jumps
        # with V_0, so the outer root is found by Newton continuation instead
        v0, w = _newton_tune(k, s0, s_end, w_stable, K_bound, tol)
        v_lower = np.array([v0])
    final = _shoot_once(k, s0, s_end, v_lower, w, w_stable, K_bound, tol, keep=True)
    return ShootingResult(k, s0, s_end, v_lower, w, w_stable, final.exit_s, K_bound,
                          mu1, mu2, count[0], final.traj)


def _final_coords(k: int, s0: float, s_end: float, v0: float, w: float,
                  w_stable: float, tol: float) -> np.ndarray:
    """``(V_0, W_unstable)`` at ``s_end`` with no box stop."""
    mu1, mu2, vecs = eigen_structure(k)
    V0 = np.zeros(k + 1)
    V0[k], V0[k - 1] = vecs @ np.array([w, w_stable])
    V0[0] = v0
    y0 = np.concatenate([[0.0, 0.0], _initial_modes(k, s0, V0)])
    sol = solve_ivp(_shoot_field(k), (s0, s_end), y0, method="RK45", rtol=tol, atol=1e-30)
    if sol.status != 0:
        raise NumericalError(f"shooting integration failed: {sol.message}")
    c = _coords(k, sol.t[-1:], sol.y[2:, -1:], vecs)[:, 0]
    return np.array([c[0], c[k - 1]])


def _newton_tune(k: int, s0: float, s_end: float, w_stable: float, K_bound: float,
                 tol: float, stages_per_decade: int = 2, max_iter: int = 8
                 ) -> tuple[float, float]:
    """Zero the final ``(V_0, W_unstable)`` by Newton, lengthening the run in stages."""
    x = np.zeros(2)
    n_stages = max(1, int(np.ceil(stages_per_decade * np.log10(s_end / s0))))
    for se in s0 * (s_end / s0) ** (np.arange(1, n_stages + 1) / n_stages):
        # perturbations grow roughly like s, so shrink the difference step to match
        d_step = 1e-3 * K_bound * s0 / se
        f = _final_coords(k, s0, se, x[0], x[1], w_stable, tol)
        for _ in range(max_iter):
            if np.max(np.abs(f)) < 1e-6 * K_bound:
                break
            J = np.empty((2, 2))
            for i in range(2):
                d = np.zeros(2)
                d[i] = d_step
                J[:, i] = (_final_coords(k, s0, se, *(x + d), w_stable, tol) - f) / d_step
            dx = -np.linalg.solve(J, f)
            for _ in range(20):
                try:
                    f_new = _final_coords(k, s0, se, *(x + dx), w_stable, tol)
                except NumericalError:
                    dx *= 0.5
                    continue
                if np.max(np.abs(f_new)) < np.max(np.abs(f)):
                    break
                dx *= 0.5
            else:
                raise NumericalError("Newton continuation stalled during shooting")
            x, f = x + dx, f_new
        if np.any(np.abs(x) >= K_bound):
            raise NumericalError("codimension mismatch: tuned data left the box")
    return float(x[0]), float(x[1])


def detuned_exit(result: ShootingResult, fraction: float = 0.1) -> ShotResult:
    """Exit of the trajectory started at the tuned data plus ``fraction * K_bound``."""
    w = result.w_unstable + fraction * result.K_bound
    return _shoot_once(result.k, result.s0, result.s_end, result.V_lower, w,
                       result.w_stable, result.K_bound, 1e-11)


def shooting_coordinates(result: ShootingResult) -> np.ndarray:
    tr = result.traj
    _, _, vecs = eigen_structure(result.k)
    return _coords(result.k, tr.s, tr.modes, vecs)


# ----------------------------------------------------------------------------
# rate extraction
# ----------------------------------------------------------------------------


@dataclass
class RateFit:
    regime: str
    terminal: float  # T for melting, lambda_inf for freezing
    c_star: float
    residual_series: np.ndarray = field(repr=False)
    s: np.ndarray = field(repr=False)
    exponents: dict = field(default_factory=dict)
    variation: float = float("nan")
    tail_fraction: float = float("nan")


def time_to_go(traj: Trajectory, tail: str = "exponential") -> tuple[np.ndarray, float]:
    """``T - t(s)`` on the trajectory samples by a reverse cumulative integral.

    ``t = int lambda^2 ds`` is accumulated from the end of the run so small
    remaining times keep full relative accuracy.  Beyond the last sample the
    tail is modelled from the local decay of ``lambda^2``.
    """
    s = traj.s
    lam2 = np.exp(2 * traj.log_lam)
    u = np.log(s)
    integrand = lam2 * s  # d s = s d(log s)
    rev = cumulative_simpson(integrand[::-1], x=-u[::-1], initial=0.0)
    head = rev[::-1]
    m = max(5, s.size // 20)
    if tail == "exponential":
        # d log(lambda^2)/ds fitted over the last samples
        slope = np.polyfit(s[-m:], 2 * traj.log_lam[-m:], 1)[0]
        if slope >= 0:
            raise NumericalError("lambda^2 not decaying at the end of the run")
        tail_val = lam2[-1] / (-slope)
    else:
        # power law with a log correction: log lambda^2 = c + g log s + d log log s
        X = np.vstack([np.ones(m), u[-m:], np.log(u[-m:])]).T
        c, g, d = np.linalg.lstsq(X, 2 * traj.log_lam[-m:], rcond=None)[0]
        if g >= -1:
            raise NumericalError(f"fitted tail exponent {g:.3f} is not integrable")
        s_e = s[-1]
        fn = lambda x: np.exp(c + (g + 1) * x + d * np.log(x))  # noqa: E731 (x = log s)
        tail_val = quad(fn, np.log(s_e), np.inf, limit=200)[0]
    return head + tail_val, float(tail_val)


RATE_WINDOW_DECADES = 3.0
TAIL_SHARE = 1e-3


def melt_rate_extract(traj: Trajectory, window: tuple[float, float] | None = None,
                      tail: str | None = None) -> RateFit:
    """Rate diagnostics for a melting trajectory.

    k = 0: series ``R = log(lambda^2/(T - t)) + sqrt(2 |log(T - t)|)`` and its
    total variation over the last decade of ``window``.

    k >= 1: least squares ``log lambda = -P log s + Q log log s + c`` over the
    window (default: the last three decades), converted to the ``T - t`` law
    ``lambda ~ (T-t)^p / |log(T-t)|^q`` through ``1/s ~ (T-t)^k / |log(T-t)|^{(k+1)/k}``,
    which gives ``p = k P`` and ``q = (k+1) P / k - Q``.
    """
    k = traj.k
    s = traj.s
    if k == 0 and s[-1] / s[0] < 10:
        raise DomainError("insufficient decade coverage for a rate fit")
    if k >= 1 and s[-1] / s[0] < 1e3 * (1 - 1e-9):
        raise DomainError("k >= 1 rate fit needs s_end / s0 >= 1e3")
    tail = tail or ("exponential" if k == 0 else "power")
    tau, tail_val = time_to_go(traj, tail)
    T = float(traj.t[0] + tau[0])
    if window is None:
        window = (s[0], s[-1]) if k == 0 else (s[-1] / 10**RATE_WINDOW_DECADES, s[-1])
    lo, hi = window
    sel = (s >= lo * (1 - 1e-12)) & (s <= hi * (1 + 1e-12))
    if k == 0:
        if np.min(traj.scale[sel]) > 1e-6:
            raise DomainError("k = 0 rate fit needs b below 1e-6 in the window")
        # near the end T - t is mostly the modelled tail; keep samples it barely touches
        sel &= tail_val <= TAIL_SHARE * tau
        if s[sel][-1] / s[sel][0] < 10:
            raise DomainError("less than a decade of samples with T - t resolved by the run")
        R = 2 * traj.log_lam[sel] - np.log(tau[sel]) + np.sqrt(2 * np.abs(np.log(tau[sel])))
        last = s[sel] >= s[sel][-1] / 10
        tv = float(np.sum(np.abs(np.diff(R[last]))))
        return RateFit("melt_k0", T, float(np.mean(R[last])), R, s[sel], {}, tv,
                       tail_val / T)
    ss = s[sel]
    if ss[-1] / ss[0] < 1e3 * (1 - 1e-9):
        raise DomainError("k >= 1 rate fit window must span three decades")
    L = np.log(ss)
    X = np.vstack([-L, np.log(L), np.ones_like(L)]).T
    (P, Q, c), *_ = np.linalg.lstsq(X, traj.log_lam[sel], rcond=None)
    resid = traj.log_lam[sel] - X @ np.array([P, Q, c])
    p_fit = k * P
    q_fit = (k + 1) * P / k - Q
    cs = traj.lam[sel] * ss ** ((k + 1) / (2 * k)) / L ** ((k + 1) / (2 * k * k))
    last = ss >= ss[-1] / 10
    return RateFit("melt_k%d" % k, T, float(cs[-1]), resid, ss,
                   {"P": float(P), "Q": float(Q), "p": float(p_fit), "q": float(q_fit),
                    "p_expected": (k + 1) / 2, "q_expected": (k + 1) / (2 * k)},
                   float(np.ptp(cs[last]) / np.mean(cs[last])), tail_val / T)


def synthetic_k0_trajectory(s0: float, s_end: float, per_decade: int = 200) -> Trajectory:
    """Trajectory with ``b(s) = log s / (2 s)`` and ``lambda`` from ``-lambda_s/lambda = b``."""
    s = sample_points(s0, s_end, per_decade)
    b = np.log(s) / (2 * s)
    loglam = -(np.log(s) ** 2 - np.log(s0) ** 2) / 4.0
    lam2 = np.exp(2 * loglam)
    t = np.concatenate([[0.0], cumulative_simpson(lam2 * s, x=np.log(s))])
    return Trajectory("melt", 0, s, np.vstack([loglam, t, b]))


def lambda_inf_extrapolate(traj: Trajectory) -> tuple[float, float]:
    """Limit of ``lambda`` for a freezing run via a fitted tail of ``A``.

    Fits ``A s^{k+1} (log s)^2 = c0 + c1/L + c2/L^2`` on the last decade and
    integrates ``A`` from the final sample to infinity.
    """
    k = traj.k
    s = traj.s
    A = traj.slope()
    sel = s >= s[-1] / 10
    L = np.log(s[sel])
    g = A[sel] * s[sel] ** (k + 1) * L * L
    X = np.vstack([np.ones_like(L), 1 / L, 1 / L**2]).T
    c0, c1, c2 = np.linalg.lstsq(X, g, rcond=None)[0]
    Le = np.log(s[-1])
    if k == 0:
        tail = c0 / Le + c1 / (2 * Le**2) + c2 / (3 * Le**3)
    else:
        f = lambda x: (c0 + c1 / x + c2 / x**2) * np.exp(-k * x) / x**2  # noqa: E731
        tail = quad(f, Le, np.inf, limit=200)[0]
    log_inf = traj.log_lam[-1] + tail
    return float(np.exp(log_inf)), float(tail)


def freeze_rate_extract(traj: Trajectory, k: int | None = None) -> RateFit:
    """Freezing diagnostics: ``(lambda_inf - lambda) log s`` (k = 0) or
    ``(lambda_inf - lambda) s^k (log s)^2`` (k >= 1)."""
    k = traj.k if k is None else k
    s = traj.s
    if s[-1] / s[0] < 1e4 * (1 - 1e-9):
        raise DomainError("freezing rate fit needs at least four decades in s")
    if np.any(np.diff(traj.log_lam) < 0):
        raise RegimeError("lambda is not monotone increasing along the freezing run")
    lam_inf, tail = lambda_inf_extrapolate(traj)
    gap = lam_inf - traj.lam
    L = np.log(s)
    prod = gap * L if k == 0 else gap * s**k * L * L
    last = s >= s[-1] / 10
    var = float(np.ptp(prod[last]) / abs(np.mean(prod[last])))
    return RateFit("freeze_k%d" % k, lam_inf, float(prod[-1]), prod, s, {}, var, tail)
