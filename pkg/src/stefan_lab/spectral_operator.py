"""Drift Laplacians ``H_b = -Delta + Lambda`` and ``H_B = -Delta - Lambda``.

The radial operator ``u -> -(1/(rho z)) d/dz (rho z du/dz)`` is discretised by
vertex-centred finite volumes on a graded grid.  Face coefficients use the exact
weight at the face and lumped cell masses are exact integrals of ``rho z``, so
the stiffness matrix ``K`` and mass matrix ``M`` are symmetric tridiagonal and
diagonal.  Eigenpairs solve ``K psi = lambda M psi`` with a Dirichlet condition
at ``z = sqrt(b)`` (and a negligible one at ``z_max``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.linalg import eigh_tridiagonal, solve_banded

from .errors import ConfigurationError, DomainError, NumericalError
from .weighted_basis import (
    DEFAULT_B_STAR,
    DEFAULT_Z_MAX,
    LaguerreBasis,
    WeightedGrid,
    alpha,
    make_grid,
    p_table,
    weight,
)

__all__ = [
    "DiscreteOperator",
    "EigenPair",
    "assemble",
    "eig_pairs",
    "eigenvalues",
    "extrapolated_eigenvalue",
    "observed_order",
    "expansion_fit",
    "mu_coefficients",
    "freezing_spectrum",
    "direct_freezing_spectrum",
    "spectral_gap_test",
    "renormalized_eigenfunction",
    "boundary_slope",
    "dlambda_db",
    "tricomi_eigenvalue",
    "conjugation_norms",
    "eta_slope_leading",
]

DEFAULT_SPECTRAL_N = 3000
MIN_LAYER_NODES = 8
RESIDUAL_TOL = 1e-8
FIT_FAILURE_RATIO = 0.10
DEFAULT_SEED = 0x57EFA  # "STEFA", fits in 32 bits


@dataclass(frozen=True)
class DiscreteOperator:
    """Symmetric pencil ``(K, M)`` for the drift Laplacian on one grid.

    ``face_coeff[i]`` couples nodes ``i`` and ``i+1``; ``mass[i]`` is the exact
    weighted measure of the control volume around node ``i``.  ``free`` marks
    the unknowns (Dirichlet nodes are excluded).
    """

    grid: WeightedGrid
    b: float
    face_coeff: np.ndarray = field(repr=False)
    mass: np.ndarray = field(repr=False)
    free: np.ndarray = field(repr=False)
    bc_inner: bool = True

    @property
    def sign(self) -> str:
        return self.grid.sign

    @property
    def size(self) -> int:
        return int(self.free.size)

    def diagonals(self) -> tuple[np.ndarray, np.ndarray]:
        """Main and off diagonal of ``K`` restricted to the free unknowns."""
        F = self.face_coeff
        n = self.grid.n
        full_diag = np.zeros(n)
        full_diag[:-1] += F
        full_diag[1:] += F
        idx = self.free
        d = full_diag[idx]
        e = -F[idx[:-1]]
        return d, e

    def apply(self, u: np.ndarray) -> np.ndarray:
        """``M^{-1} K u`` on the full grid; Dirichlet entries of ``u`` must be zero."""
        return self.stiffness(u) / self.mass

    def stiffness(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        flux = self.face_coeff * np.diff(u)
        out = np.zeros_like(u)
        out[:-1] -= flux
        out[1:] += flux
        return out

    def inner(self, u: np.ndarray, v: np.ndarray) -> float:
        """Discrete weighted inner product matching the mass matrix."""
        return float(np.sum(self.mass * u * v))

    def energy(self, u: np.ndarray, v: np.ndarray | None = None) -> float:
        """Discrete Dirichlet form ``sum F (du)(dv)``."""
        du = np.diff(u)
        dv = du if v is None else np.diff(v)
        return float(np.sum(self.face_coeff * du * dv))

    def rayleigh(self, u: np.ndarray) -> float:
        return self.energy(u) / self.inner(u, u)

    def check_dirichlet(self, u: np.ndarray) -> None:
        u = np.asarray(u, dtype=float)
        fixed = np.setdiff1d(np.arange(self.grid.n), self.free)
        if np.any(u[fixed] != 0.0):
            raise DomainError("test vector violates the Dirichlet condition")


def assemble(b: float, n: int = DEFAULT_SPECTRAL_N, z_max: float = DEFAULT_Z_MAX,
             sign: str = "minus", b_star: float = DEFAULT_B_STAR,
             grid: WeightedGrid | None = None) -> DiscreteOperator:
    """Discretise the drift Laplacian on ``[sqrt(b), z_max]``.

    ``b = 0`` gives the operator on ``[0, z_max]`` with the natural condition at
    the origin.
    """
    if b < 0:
        raise DomainError(f"b must be non-negative, got {b}")
    if b > b_star:
        raise DomainError(f"b={b} exceeds b*={b_star}")
    if grid is None:
        z_min = float(np.sqrt(b))
        grid = make_grid(z_min, z_max, n, sign, "graded")
    z = grid.nodes
    if b > 0 and grid.nodes_in(grid.z_min, 2 * grid.z_min) < MIN_LAYER_NODES:
        raise ConfigurationError(
            f"fewer than {MIN_LAYER_NODES} nodes resolve the layer [sqrt(b), 2 sqrt(b)]")
    faces = grid.faces()
    F = weight(faces, grid.sign) * faces / np.diff(z)
    left, right = grid.cell_bounds()
    if grid.sign == "minus":
        mass = -np.expm1(-0.5 * (right**2 - left**2)) * np.exp(-0.5 * left**2)
    else:
        mass = np.expm1(0.5 * (right**2 - left**2)) * np.exp(0.5 * left**2)
    inner_bc = b > 0 or grid.z_min > 0
    lo = 1 if inner_bc else 0
    free = np.arange(lo, grid.n - 1)
    return DiscreteOperator(grid=grid, b=float(b), face_coeff=F, mass=mass, free=free,
                            bc_inner=inner_bc)


# ----------------------------------------------------------------------------
# eigensolver
# ----------------------------------------------------------------------------


@dataclass
class EigenPair:
    """One eigenpair of the discrete operator.

    ``psi`` lives on the full grid (zero at Dirichlet nodes).  For ``b > 0``
    it is scaled so that the ``P_k(z) log(z/sqrt(b))`` component has unit
    coefficient; ``mu_coeffs`` are the companion coefficients of the lower
    modes.
    """

    k: int
    lam: float
    psi: np.ndarray = field(repr=False)
    op: DiscreteOperator = field(repr=False)
    mu_coeffs: list[float] = field(default_factory=list)
    sign_changes: int = 0
    norm_sq: float = float("nan")
    residual: float = float("nan")
    remainder_ratio: float = float("nan")

    @property
    def b(self) -> float:
        return self.op.b

    @property
    def grid(self) -> WeightedGrid:
        return self.op.grid


def _count_sign_changes(psi: np.ndarray) -> int:
    scale = np.max(np.abs(psi))
    s = np.sign(psi[np.abs(psi) > 1e-10 * scale])
    return int(np.count_nonzero(s[1:] != s[:-1]))


def _rounding_floor(op: DiscreteOperator, u: np.ndarray, lam: float) -> float:
    """A-priori rounding level of the weighted residual for a double-precision vector.

    On fine grids the tiny cells next to ``sqrt(b)`` amplify the roundoff of
    ``u`` itself by ``1/sqrt(m_i)``; residuals below this level are not meaningful.
    """
    a = np.abs(u)
    F = op.face_coeff
    scale = np.zeros_like(u)
    scale[:-1] += F * (a[:-1] + a[1:])
    scale[1:] += F * (a[:-1] + a[1:])
    scale += np.abs(lam * op.mass * u)
    s = scale[op.free]
    return float(np.finfo(float).eps * np.sqrt(np.sum(s * s / op.mass[op.free])))


def _refine(op: DiscreteOperator, d: np.ndarray, e: np.ndarray, m: np.ndarray,
            lam0: float, x0: np.ndarray, max_iter: int = 30) -> tuple[float, np.ndarray, float]:
    """Rayleigh-quotient inverse iteration on the free unknowns."""
    n = d.size
    ab = np.zeros((3, n))
    ab[0, 1:] = e
    ab[2, :-1] = e
    full = np.zeros(op.grid.n)
    x = x0 / np.sqrt(np.sum(m * x0 * x0))
    lam = lam0
    res = np.inf
    for it in range(max_iter):
        ab[1] = d - lam * m
        try:
            y = solve_banded((1, 1), ab, m * x, check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            # exact hit: the shift is an eigenvalue to machine precision
            y = x
        if not np.all(np.isfinite(y)):
            y = x
        x = y / np.sqrt(np.sum(m * y * y))
        full[op.free] = x
        lam_new = op.energy(full) / op.inner(full, full)
        r = op.stiffness(full)[op.free] - lam_new * m * x
        res = float(np.sqrt(np.sum(r * r / m)))
        tol = max(RESIDUAL_TOL, _rounding_floor(op, full, lam_new))
        converged = abs(lam_new - lam) <= 1e-14 * max(1.0, abs(lam_new)) and res < tol
        lam = lam_new
        if converged or (it > 2 and res < 1e-2 * tol):
            break
    if not res < tol:
        raise NumericalError(
            f"eigen refinement stalled: lambda={lam:.6g}, residual={res:.3e} after {it + 1} iterations")
    return lam, x, res


def eig_pairs(op: DiscreteOperator, K: int, normalize: bool = True) -> list[EigenPair]:
    """Return the ``K+1`` smallest eigenpairs in ascending order."""
    if K < 0 or K > 10:
        raise DomainError("need 0 <= K <= 10")
    d, e = op.diagonals()
    m = op.mass[op.free]
    s = 1.0 / np.sqrt(m)
    # symmetric form M^{-1/2} K M^{-1/2}
    ds = d * s * s
    es = e * s[:-1] * s[1:]
    try:
        w, v = eigh_tridiagonal(ds, es, select="i", select_range=(0, K))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"tridiagonal eigensolver failed: {exc}") from exc
    pairs: list[EigenPair] = []
    basis = LaguerreBasis.build(K)
    for k in range(K + 1):
        lam, x, res = _refine(op, d, e, m, float(w[k]), v[:, k] * s)
        psi = np.zeros(op.grid.n)
        psi[op.free] = x
        if psi[np.argmax(np.abs(psi[: max(2, op.grid.n // 50)]))] < 0:
            psi = -psi
        pair = EigenPair(k=k, lam=lam, psi=psi, op=op, residual=res)
        pair.sign_changes = _count_sign_changes(psi[op.free])
        if normalize and op.b > 0 and op.sign == "minus":
            scale, mus, ratio = _decompose(pair, basis)
            if ratio > FIT_FAILURE_RATIO:
                raise NumericalError(
                    f"mode {k}: remainder is {ratio:.1%} of the eigenfunction, expansion fails")
            pair.psi = scale * psi
            pair.mu_coeffs = mus
            pair.remainder_ratio = ratio
        else:
            pair.psi = psi / np.sqrt(op.inner(psi, psi))
        pair.norm_sq = op.inner(pair.psi, pair.psi)
        pairs.append(pair)
    lams = [p.lam for p in pairs]
    if np.any(np.diff(lams) <= 0):
        raise NumericalError(f"eigenvalues not strictly increasing: {lams}")
    return pairs


def eigenvalues(b: float, K: int, n: int = DEFAULT_SPECTRAL_N, **kw) -> np.ndarray:
    op = assemble(b, n, **kw)
    return np.array([p.lam for p in eig_pairs(op, K, normalize=False)])


def extrapolated_eigenvalue(b: float, K: int, n: int = DEFAULT_SPECTRAL_N, **kw) -> np.ndarray:
    """Richardson extrapolation ``(4 lam(2n) - lam(n)) / 3`` of the spectrum."""
    lo = eigenvalues(b, K, n, **kw)
    hi = eigenvalues(b, K, 2 * n, **kw)
    return (4.0 * hi - lo) / 3.0


def observed_order(b: float, K: int, n: int = 1000, **kw) -> np.ndarray:
    """Observed convergence order from runs at ``n``, ``2n`` and ``4n`` nodes."""
    l1, l2, l4 = (eigenvalues(b, K, m, **kw) for m in (n, 2 * n, 4 * n))
    return np.log2(np.abs(l1 - l2) / np.abs(l2 - l4))


# ----------------------------------------------------------------------------
# expansion diagnostics
# ----------------------------------------------------------------------------


def _decompose(pair: EigenPair, basis: LaguerreBasis) -> tuple[float, list[float], float]:
    """Split ``c psi = P_k L + sum_{j<k} mu_j P_j L + rest`` with ``rest`` orthogonal
    to ``P_0..P_k`` where ``L = log(z/sqrt(b))``.

    Returns ``(c, [mu_0..mu_{k-1}], |rest| / |c psi|)``.
    """
    op, k = pair.op, pair.k
    if k > basis.K:
        raise IndexError(f"basis too small for mode {k}")
    z = op.grid.nodes
    L = np.log(z / z[0])
    P = p_table(k, z)
    mass = op.mass
    # unknowns: c, mu_0..mu_{k-1}
    A = np.zeros((k + 1, k + 1))
    rhs = np.zeros(k + 1)
    for i in range(k + 1):
        A[i, 0] = np.sum(mass * pair.psi * P[i])
        for j in range(k):
            A[i, j + 1] = -np.sum(mass * P[j] * L * P[i])
        rhs[i] = np.sum(mass * P[k] * L * P[i])
    try:
        sol = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"expansion system singular for mode {k}") from exc
    c = float(sol[0])
    mus = [float(x) for x in sol[1:]]
    T = P[k] * L + sum(mu * P[j] * L for j, mu in enumerate(mus))
    rest = c * pair.psi - T
    ratio = np.sqrt(np.sum(mass * rest**2) / np.sum(mass * (c * pair.psi) ** 2))
    return c, mus, float(ratio)


def mu_coefficients(pair: EigenPair, basis: LaguerreBasis | None = None) -> list[float]:
    """Log-coefficients ``mu_{jk}``, ``j < k``, of an eigenfunction."""
    if pair.k == 0:
        return []
    basis = basis or LaguerreBasis.build(pair.k)
    _, mus, ratio = _decompose(pair, basis)
    if ratio > FIT_FAILURE_RATIO:
        raise NumericalError(f"remainder is {ratio:.1%} of the eigenfunction")
    return mus


def boundary_slope(pair: EigenPair) -> float:
    """``sqrt(b) psi'(sqrt(b))`` from the integrated eigen-equation.

    Integrating ``-(rho z psi')' = lam rho z psi`` over ``[sqrt(b), inf)`` gives
    ``rho(z0) z0 psi'(z0) = lam <psi, 1>_b``, which avoids differencing in the layer.
    """
    op = pair.op
    z0 = op.grid.z_min
    flux = pair.lam * float(np.sum(op.mass * pair.psi))
    return flux / float(weight(z0, op.sign))


def dlambda_db(pair: EigenPair) -> float:
    """Boundary-variation formula ``psi'(z0)^2 rho(z0) / (2 |psi|^2)``."""
    op = pair.op
    z0 = op.grid.z_min
    dpsi = boundary_slope(pair) / z0
    return dpsi**2 * float(weight(z0, op.sign)) / (2.0 * pair.norm_sq)


@dataclass
class ExpansionFit:
    k: int
    b_list: list[float]
    lam: list[float]
    remainders: list[float]
    max_abs: float
    monotone: bool


def expansion_fit(b_list: Sequence[float], k: int, n: int = DEFAULT_SPECTRAL_N,
                  extrapolate: bool = True) -> ExpansionFit:
    """Scaled remainders ``(lam_{b,k} - 2k - 2/|log b|) (log b)^2``."""
    b_list = sorted(float(b) for b in b_list)
    if len(b_list) < 2 or np.log10(b_list[-1] / b_list[0]) < 3 - 1e-9:
        raise DomainError("b_list must span at least three decades")
    lams, rem = [], []
    for b in b_list:
        lam = (extrapolated_eigenvalue(b, k, n) if extrapolate else eigenvalues(b, k, n))[k]
        L = abs(np.log(b))
        lams.append(float(lam))
        rem.append(float((lam - 2 * k - 2.0 / L) * L * L))
    diffs = np.diff(rem)
    monotone = bool(np.all(diffs >= 0) or np.all(diffs <= 0))
    return ExpansionFit(k, b_list, lams, rem, float(np.max(np.abs(rem))), monotone)


# ----------------------------------------------------------------------------
# freezing operator
# ----------------------------------------------------------------------------


def freezing_spectrum(B: float, K: int, n: int = DEFAULT_SPECTRAL_N,
                      z_max: float = DEFAULT_Z_MAX) -> list[EigenPair]:
    """Spectrum of ``-Delta - Lambda`` with Dirichlet data at ``sqrt(B)``.

    Uses ``v = exp(-z^2/2) w``: ``(-Delta - Lambda) v = exp(-z^2/2)(H_B + 2) w``,
    so each melting pair ``(lam, psi)`` maps to ``(lam + 2, exp(-z^2/2) psi)``.
    The returned ``op`` is still the melting operator; ``psi`` holds ``v``.
    """
    if not 0 < B <= DEFAULT_B_STAR:
        raise DomainError(f"need 0 < B <= {DEFAULT_B_STAR}, got {B}")
    pairs = eig_pairs(assemble(B, n, z_max), K)
    out = []
    for p in pairs:
        v = np.exp(-0.5 * p.op.grid.nodes**2) * p.psi
        out.append(EigenPair(k=p.k, lam=p.lam + 2.0, psi=v, op=p.op, mu_coeffs=p.mu_coeffs,
                             sign_changes=p.sign_changes, norm_sq=p.norm_sq,
                             residual=p.residual, remainder_ratio=p.remainder_ratio))
    return out


def direct_freezing_spectrum(B: float, K: int, n: int = DEFAULT_SPECTRAL_N,
                             z_max: float = 8.0) -> list[EigenPair]:
    """Eigenpairs of ``-Delta - Lambda`` in the ``rho_plus`` measure, no conjugation."""
    if z_max > 8.0:
        raise ConfigurationError("direct freezing solve limited to z_max <= 8 (weight overflow)")
    op = assemble(B, n, z_max, sign="plus")
    return eig_pairs(op, K, normalize=False)


def freezing_shift_defect(B: float, K: int, n: int = DEFAULT_SPECTRAL_N,
                          extrapolate: bool = True) -> np.ndarray:
    """``lam_hat_{B,k} - lam_{B,k} - 2`` with ``lam_hat`` from the direct ``rho_plus`` solve.

    The two operators are discretised on different grids, so each spectrum is
    Richardson extrapolated from ``n`` and ``2n`` nodes before comparing.
    """
    def direct(m: int) -> np.ndarray:
        return np.array([p.lam for p in direct_freezing_spectrum(B, K, m)])

    if extrapolate:
        hat = (4.0 * direct(2 * n) - direct(n)) / 3.0
        lam = extrapolated_eigenvalue(B, K, n)
    else:
        hat, lam = direct(n), eigenvalues(B, K, n)
    return hat - lam - 2.0


def conjugation_norms(pair: EigenPair) -> tuple[float, float]:
    """Norm of ``w`` in ``rho_minus`` and of ``v = exp(-z^2/2) w`` in ``rho_plus``.

    The integrands ``w^2 rho_-`` and ``v^2 rho_+`` coincide pointwise, so the two
    quadratures agree to rounding.
    """
    z = pair.grid.nodes
    w = pair.psi
    v = np.exp(-0.5 * z * z) * w
    qm = pair.grid.quad_weights
    qp = qm * np.exp(z * z)  # rho_+ z dz weights on the same nodes
    return float(np.sqrt(np.sum(qm * w * w))), float(np.sqrt(np.sum(qp * v * v)))


def tricomi_eigenvalue(b: float, k: int, dps: int = 30) -> float:
    """Oracle: ``lam`` solving ``U(-lam/2, 1, b/2) = 0`` near ``2k + 2/|log b|``."""
    import mpmath as mp

    with mp.workdps(dps):
        f = lambda lam: mp.hyperu(-lam / 2, 1, mp.mpf(b) / 2)  # noqa: E731
        guess = 2 * k + 2 / abs(mp.log(b))
        return float(mp.findroot(f, guess))


# ----------------------------------------------------------------------------
# spectral gap and renormalised modes
# ----------------------------------------------------------------------------


def random_trial(op: DiscreteOperator, rng: np.random.Generator, degree: int = 6) -> np.ndarray:
    """Smooth random function vanishing at ``z_min``."""
    z = op.grid.nodes
    deg = int(rng.integers(1, degree + 1))
    c = rng.standard_normal(deg + 1)
    P = p_table(deg, z)
    p = rng.uniform(0.5, 3.0)
    u = (c @ P) * (1.0 - (z[0] / z) ** p) if z[0] > 0 else c @ P
    u = u.copy()
    fixed = np.setdiff1d(np.arange(op.grid.n), op.free)
    u[fixed] = 0.0
    return u


@dataclass
class GapResult:
    b: float
    k: int
    trials: int
    min_quotient: float
    redraws: int


def spectral_gap_test(b: float, k: int, trials: int = 200, seed: int = DEFAULT_SEED,
                      n: int = DEFAULT_SPECTRAL_N, pairs: list[EigenPair] | None = None
                      ) -> GapResult:
    """Minimum Rayleigh quotient over random trials orthogonal to ``psi_0..psi_k``."""
    op = pairs[0].op if pairs else assemble(b, n)
    pairs = pairs or eig_pairs(op, k)
    rng = np.random.Generator(np.random.Philox(seed))
    best, redraws, done = np.inf, 0, 0
    while done < trials:
        u = random_trial(op, rng)
        for p in pairs[: k + 1]:
            u = u - op.inner(u, p.psi) / op.inner(p.psi, p.psi) * p.psi
        nrm = np.sqrt(op.inner(u, u))
        if nrm < 1e-12:
            redraws += 1
            continue
        best = min(best, op.rayleigh(u / nrm))
        done += 1
    return GapResult(b, k, trials, float(best), redraws)


def renormalized_eigenfunction(pair: EigenPair, y_nodes) -> np.ndarray:
    """``eta(y) = psi(sqrt(b) y)`` by monotone cubic interpolation."""
    y = np.asarray(y_nodes, dtype=float)
    b = pair.b
    z = np.sqrt(b) * y
    if np.any(y < 1.0 - 1e-12):
        raise DomainError("y nodes must lie in [1, y_max]")
    if np.max(z) > pair.grid.z_max * (1 + 1e-12):
        raise ConfigurationError(
            f"sqrt(b) * y_max = {np.max(z):.4g} exceeds z_max = {pair.grid.z_max}")
    interp = PchipInterpolator(pair.grid.nodes, pair.psi, extrapolate=False)
    out = interp(np.clip(z, pair.grid.z_min, pair.grid.z_max))
    out[y <= 1.0] = 0.0
    return out


def eta_slope_leading(b: float, k: int) -> float:
    """Leading-order ``d eta/dy (1) = 1 + 2 alpha_k / |log b|``."""
    return 1.0 + 2.0 * alpha(k) / abs(np.log(b))
