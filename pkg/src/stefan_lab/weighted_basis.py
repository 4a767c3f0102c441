"""Radial Gaussian-weighted function spaces built on Laguerre polynomials.

The weights are ``rho_minus(z) = exp(-z^2/2)`` and ``rho_plus(z) = exp(z^2/2)``
and all integrals carry the radial measure ``z dz``.  ``P_k(z) = L_k(z^2/2)``
are orthonormal for ``rho_minus z dz`` on ``[0, inf)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from math import comb, factorial
from typing import Literal

import numpy as np

from .errors import ConfigurationError, DomainError

Sign = Literal["minus", "plus"]
Scheme = Literal["uniform", "graded"]

DEFAULT_Z_MAX = 12.0
DEFAULT_N = 2000
DEFAULT_B_STAR = 0.1
# Gaussian tail bound required for truncating the rho_minus measure.
TAIL_TOLERANCE = 1e-14
# Share of nodes placed in [z_min, 2 z_min] by the graded map.
CLUSTER_FRACTION = 0.12
GREGORY_ORDER = 6


def weight(z, sign: Sign = "minus"):
    """Pointwise Gaussian weight ``exp(-z^2/2)`` or ``exp(+z^2/2)``."""
    z = np.asarray(z, dtype=float)
    if sign == "minus":
        return np.exp(-0.5 * z * z)
    if sign == "plus":
        return np.exp(0.5 * z * z)
    raise ConfigurationError(f"sign must be 'minus' or 'plus', got {sign!r}")


def weight_primitive(z, sign: Sign = "minus"):
    """Antiderivative of ``rho(z) z`` so cell masses can be integrated exactly."""
    z = np.asarray(z, dtype=float)
    if sign == "minus":
        return -np.exp(-0.5 * z * z)
    return np.exp(0.5 * z * z)


# ----------------------------------------------------------------------------
# Laguerre layer
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class LaguerreBasis:
    """Laguerre polynomials ``L_0..L_K`` normalised by ``L_k(0) = 1``."""

    K: int
    coeff_table: tuple[tuple[Fraction, ...], ...] = field(repr=False)

    @classmethod
    def build(cls, K: int) -> "LaguerreBasis":
        if K < 0:
            raise DomainError("K must be non-negative")
        table = tuple(
            tuple(Fraction((-1) ** i * comb(k, i), factorial(i)) for i in range(k + 1))
            for k in range(K + 1)
        )
        return cls(K=K, coeff_table=table)

    def _check(self, k: int) -> None:
        if k < 0 or k > self.K:
            raise IndexError(f"Laguerre index {k} outside 0..{self.K}")

    def laguerre(self, k: int, x):
        self._check(k)
        return laguerre_eval(k, x)

    def p(self, k: int, z):
        self._check(k)
        return p_eval(k, z)

    def dp(self, k: int, z):
        self._check(k)
        return p_derivative(k, z)

    def table(self, z) -> np.ndarray:
        """Rows ``P_0(z)..P_K(z)`` from a single recurrence sweep."""
        return p_table(self.K, z)


def laguerre_table(K: int, x) -> np.ndarray:
    """Rows ``L_0(x)..L_K(x)`` by the three-term recurrence."""
    x = np.asarray(x, dtype=float)
    out = np.empty((K + 1,) + x.shape)
    out[0] = 1.0
    if K >= 1:
        out[1] = 1.0 - x
    for k in range(1, K):
        out[k + 1] = ((2 * k + 1 - x) * out[k] - k * out[k - 1]) / (k + 1)
    return out


def laguerre_eval(k: int, x):
    """``L_k(x)`` via ``L_{k+1} = ((2k+1-x) L_k - k L_{k-1}) / (k+1)``."""
    if k < 0:
        raise IndexError("Laguerre index must be non-negative")
    val = laguerre_table(k, x)[k]
    return float(val) if np.ndim(val) == 0 else val


def p_table(K: int, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return laguerre_table(K, 0.5 * z * z)


def p_eval(k: int, z):
    """``P_k(z) = L_k(z^2/2)``."""
    z = np.asarray(z, dtype=float)
    return laguerre_eval(k, 0.5 * z * z)


def p_derivative(k: int, z):
    """``P_k'(z) = z L_k'(z^2/2)`` using ``L_k' = -(L_0 + ... + L_{k-1})``."""
    z = np.asarray(z, dtype=float)
    if k == 0:
        out = np.zeros_like(z)
    else:
        out = -z * laguerre_table(k - 1, 0.5 * z * z).sum(axis=0)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class AlphaSeq:
    """Harmonic numbers ``alpha_j = sum_{i<j} 1/(j-i)``, kept exact."""

    values: tuple[Fraction, ...]

    def __getitem__(self, j: int) -> Fraction:
        return self.values[j]

    def __len__(self) -> int:
        return len(self.values)

    def as_float(self) -> np.ndarray:
        return np.array([float(v) for v in self.values])


def alpha_seq(K: int) -> AlphaSeq:
    if K < 0:
        raise DomainError("K must be non-negative")
    vals = [Fraction(0)]
    for j in range(1, K + 1):
        vals.append(vals[-1] + Fraction(1, j))
    return AlphaSeq(tuple(vals))


def alpha(j: int) -> float:
    return float(alpha_seq(j)[j])


# ----------------------------------------------------------------------------
# Grids and quadrature
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class RadialMap:
    """Smooth monotone map from a uniform parameter ``xi in [0, 1]`` to ``z``.

    For ``z_min > 0`` the stretching function is
    ``g(z) = log(z/z_min) + c_inv (1 - z_min/z) + c_lin (z - z_min)``
    and ``xi = g(z) / g(z_max)``.  The ``1 - z_min/z`` term packs nodes next to
    ``z_min`` where eigenfunctions behave like ``log(z/z_min)``.  For
    ``z_min == 0`` or ``c_* is None`` the map is affine.
    """

    z_min: float
    z_max: float
    c_inv: float = 0.0
    c_lin: float = 0.0
    affine: bool = True

    @property
    def total(self) -> float:
        return float(self.g(np.array(self.z_max)))

    def g(self, z):
        z = np.asarray(z, dtype=float)
        if self.affine:
            return (z - self.z_min) / (self.z_max - self.z_min)
        zm = self.z_min
        return np.log(z / zm) + self.c_inv * (1.0 - zm / z) + self.c_lin * (z - zm)

    def dg(self, z):
        z = np.asarray(z, dtype=float)
        if self.affine:
            return np.full_like(z, 1.0 / (self.z_max - self.z_min))
        return 1.0 / z + self.c_inv * self.z_min / (z * z) + self.c_lin

    def xi(self, z):
        return self.g(z) / self.total

    def jacobian(self, z):
        """``dz/dxi`` at points ``z``."""
        return self.total / self.dg(z)

    def z(self, xi):
        """Invert the map by safeguarded Newton iterations."""
        xi = np.asarray(xi, dtype=float)
        if self.affine:
            return self.z_min + xi * (self.z_max - self.z_min)
        target = xi * self.total
        lo = np.full_like(target, self.z_min)
        hi = np.full_like(target, self.z_max)
        # log-linear initial guess
        z = self.z_min * np.exp(np.clip(xi, 0, 1) * np.log(self.z_max / self.z_min))
        for _ in range(200):
            f = self.g(z) - target
            lo = np.where(f < 0, z, lo)
            hi = np.where(f > 0, z, hi)
            step = f / self.dg(z)
            znew = z - step
            bad = (znew <= lo) | (znew >= hi)
            znew = np.where(bad, 0.5 * (lo + hi), znew)
            if np.all(np.abs(znew - z) <= 4e-16 * np.abs(znew)):
                z = znew
                break
            z = znew
        z = np.where(xi <= 0, self.z_min, z)
        z = np.where(xi >= 1, self.z_max, z)
        return z


def graded_map(z_min: float, z_max: float, fraction: float = CLUSTER_FRACTION,
               c_lin: float = 2.0) -> RadialMap:
    """Graded map with ``fraction`` of the parameter range inside ``[z_min, 2 z_min]``."""
    if z_min <= 0:
        return RadialMap(z_min, z_max)
    span = np.log(z_max / z_min) + c_lin * (z_max - z_min)
    near = np.log(2.0) + c_lin * z_min
    c_inv = max(0.0, (fraction * span - near) / (0.5 - fraction * (1.0 - z_min / z_max)))
    return RadialMap(z_min, z_max, c_inv=float(c_inv), c_lin=c_lin, affine=False)


def _bernoulli(n: int) -> list[Fraction]:
    B = [Fraction(1)]
    for m in range(1, n + 1):
        B.append(-sum(comb(m + 1, j) * B[j] for j in range(m)) / (m + 1))
    return B


@lru_cache(maxsize=16)
def gregory_end_weights(order: int = GREGORY_ORDER) -> tuple[float, ...]:
    """End weights of the trapezoid rule corrected to integrate degree < ``order``.

    The corrections cancel the Euler-Maclaurin endpoint terms and are solved
    in exact rational arithmetic.
    """
    q = order
    B = _bernoulli(q)
    rows, rhs = [], []
    for m in range(q):
        rows.append([Fraction(j) ** m for j in range(q)])
        rhs.append(B[m + 1] / (m + 1) if m % 2 == 1 else Fraction(0))
    n = q
    a = [r[:] + [v] for r, v in zip(rows, rhs)]
    for col in range(n):
        piv = next(r for r in range(col, n) if a[r][col] != 0)
        a[col], a[piv] = a[piv], a[col]
        for r in range(n):
            if r != col and a[r][col] != 0:
                f = a[r][col] / a[col][col]
                a[r] = [x - f * y for x, y in zip(a[r], a[col])]
    trap = [Fraction(1, 2)] + [Fraction(1)] * (q - 1)
    return tuple(float(trap[i] + a[i][n] / a[i][i]) for i in range(n))


def corrected_trapezoid(n: int, h: float, order: int = GREGORY_ORDER) -> np.ndarray:
    """Weights for ``n`` equispaced samples with Gregory end corrections."""
    w = np.full(n, h)
    if n < 2 * order + 2:
        w[0] = w[-1] = 0.5 * h
        return w
    ends = np.array(gregory_end_weights(order)) * h
    w[:order] = ends
    w[-order:] = ends[::-1]
    return w


@dataclass(frozen=True)
class WeightedGrid:
    """Radial nodes with quadrature weights for ``rho_sign(z) z dz``."""

    z_min: float
    z_max: float
    nodes: np.ndarray = field(repr=False)
    sign: Sign
    quad_weights: np.ndarray = field(repr=False)
    scheme: Scheme = "graded"
    mapping: RadialMap | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return int(self.nodes.size)

    @property
    def h(self) -> float:
        return 1.0 / (self.n - 1)

    @property
    def xi(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n)

    def faces(self) -> np.ndarray:
        """Cell faces at parameter midpoints (``n - 1`` values)."""
        xi_f = (np.arange(self.n - 1) + 0.5) * self.h
        return self.mapping.z(xi_f)

    def cell_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        f = self.faces()
        left = np.concatenate([[self.z_min], f])
        right = np.concatenate([f, [self.z_max]])
        return left, right

    def weight_values(self) -> np.ndarray:
        return weight(self.nodes, self.sign)

    def nodes_in(self, lo: float, hi: float) -> int:
        return int(np.count_nonzero((self.nodes >= lo) & (self.nodes <= hi)))


def make_grid(z_min: float = 0.0, z_max: float = DEFAULT_Z_MAX, n: int = DEFAULT_N,
              sign: Sign = "minus", scheme: Scheme = "graded",
              fraction: float = CLUSTER_FRACTION) -> WeightedGrid:
    """Build a weighted radial grid on ``[z_min, z_max]`` with ``n`` nodes."""
    if not (0.0 <= z_min < z_max):
        raise ConfigurationError(f"need 0 <= z_min < z_max, got {z_min}, {z_max}")
    if 0.0 < z_min < np.finfo(float).tiny:
        raise ConfigurationError(f"z_min={z_min} is subnormal; use 0 or a normal float")
    if n < 16:
        raise ConfigurationError(f"need n >= 16 nodes, got {n}")
    if sign not in ("minus", "plus"):
        raise ConfigurationError(f"sign must be 'minus' or 'plus', got {sign!r}")
    if scheme not in ("uniform", "graded"):
        raise ConfigurationError(f"scheme must be 'uniform' or 'graded', got {scheme!r}")
    if sign == "minus" and np.exp(-0.5 * z_max**2) * z_max**2 >= TAIL_TOLERANCE:
        raise ConfigurationError(
            f"z_max={z_max} leaves a Gaussian tail above {TAIL_TOLERANCE:g}")
    if scheme == "graded" and z_min > 0:
        mapping = graded_map(z_min, z_max, fraction)
    else:
        mapping = RadialMap(z_min, z_max)
    xi = np.linspace(0.0, 1.0, n)
    nodes = mapping.z(xi)
    nodes[0], nodes[-1] = z_min, z_max
    if np.any(np.diff(nodes) <= 0):
        raise ConfigurationError("grid map produced non-increasing nodes; reduce clustering")
    jac = mapping.jacobian(nodes)
    quad = corrected_trapezoid(n, 1.0 / (n - 1)) * jac * nodes * weight(nodes, sign)
    return WeightedGrid(z_min=float(z_min), z_max=float(z_max), nodes=nodes, sign=sign,
                        quad_weights=quad, scheme=scheme, mapping=mapping)


def inner_product(f, g, grid: WeightedGrid) -> float:
    """Quadrature value of ``int f g rho_sign z dz`` over the grid."""
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    if f.shape != grid.nodes.shape or g.shape != grid.nodes.shape:
        raise ValueError(
            f"shape mismatch: f{f.shape}, g{g.shape}, grid{grid.nodes.shape}")
    return float(np.sum(grid.quad_weights * f * g))


def gram_matrix(K: int, b: float, n: int = DEFAULT_N, z_max: float = DEFAULT_Z_MAX,
                b_star: float = DEFAULT_B_STAR) -> np.ndarray:
    """Matrix ``(<P_i, P_j>_b)_{i,j<=K}`` on ``[sqrt(b), inf)`` with ``rho_minus``."""
    if b < 0:
        raise DomainError(f"b must be non-negative, got {b}")
    if b > b_star:
        raise DomainError(f"b={b} exceeds b*={b_star}")
    grid = make_grid(np.sqrt(b), z_max, n, "minus", "graded")
    P = p_table(K, grid.nodes)
    M = (P * grid.quad_weights) @ P.T
    return 0.5 * (M + M.T)


def solve_gram(M: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve with the Gram matrix by pivoted LU (matrices are tiny)."""
    from scipy.linalg import lu_factor, lu_solve

    return lu_solve(lu_factor(M), rhs)


def weighted_estimate_terms(u, du, grid: WeightedGrid) -> tuple[float, float, float]:
    """``(int z^2 u^2, int u'^2, int u^2)`` against ``rho_sign z dz`` on the grid."""
    z = grid.nodes
    u = np.asarray(u, dtype=float)
    du = np.asarray(du, dtype=float)
    return (inner_product(z * u, z * u, grid), inner_product(du, du, grid),
            inner_product(u, u, grid))
