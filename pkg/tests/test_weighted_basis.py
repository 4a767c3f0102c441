from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stefan_lab.errors import ConfigurationError, DomainError
from stefan_lab.weighted_basis import (LaguerreBasis, alpha, alpha_seq, gram_matrix,
                                       inner_product, laguerre_eval, laguerre_table,
                                       make_grid, p_derivative, p_eval, p_table,
                                       solve_gram)


def exact_laguerre(k: int, x: float) -> Fraction:
    """Closed-form sum in rational arithmetic at the binary value of ``x``."""
    q = Fraction(x)
    return sum(Fraction((-1) ** i * math.comb(k, i), math.factorial(i)) * q**i
               for i in range(k + 1))


def explicit_laguerre(k: int, x: float) -> float:
    """Closed-form sum, used only as an oracle."""
    return sum((-1) ** i * math.comb(k, i) * x**i / math.factorial(i) for i in range(k + 1))


# --- laguerre_eval / p_eval -------------------------------------------------


def test_laguerre_degree_zero_is_one():
    assert laguerre_eval(0, 3.7) == 1.0
    assert np.all(laguerre_eval(0, np.linspace(0, 50, 7)) == 1.0)


def test_laguerre_one_at_two():
    assert laguerre_eval(1, 2.0) == pytest.approx(-1.0, abs=1e-15)


def test_laguerre_value_at_origin():
    assert laguerre_eval(5, 0.0) == 1.0


def test_laguerre_matches_high_precision_oracle():
    x = np.linspace(0.0, 200.0, 801)
    T = laguerre_table(20, x)
    for k in (1, 4, 9, 13, 20):
        exact = np.array([float(exact_laguerre(k, v)) for v in x])
        nz = exact != 0
        assert np.max(np.abs(T[k][nz] - exact[nz]) / np.abs(exact[nz])) <= 1e-12
        assert np.all(np.abs(T[k][~nz]) <= 1e-15)


def test_laguerre_negative_index_rejected():
    with pytest.raises(IndexError):
        laguerre_eval(-1, 1.0)


def test_basis_index_beyond_K_rejected():
    basis = LaguerreBasis.build(4)
    assert basis.laguerre(4, 0.0) == 1.0
    with pytest.raises(IndexError):
        basis.laguerre(5, 1.0)


def test_basis_coefficients_match_explicit_formula():
    basis = LaguerreBasis.build(6)
    for k, coeffs in enumerate(basis.coeff_table):
        assert len(coeffs) == k + 1  # degree k
        assert coeffs[0] == 1  # L_k(0) = 1
        assert coeffs[-1] == Fraction((-1) ** k, math.factorial(k))


def test_p_eval_examples():
    for k in range(8):
        assert p_eval(k, 0.0) == 1.0
    assert p_eval(1, math.sqrt(2.0)) == pytest.approx(0.0, abs=1e-15)
    assert p_eval(0, 3.7) == 1.0


@given(k=st.integers(0, 20), x=st.floats(0.0, 200.0))
def test_laguerre_agrees_with_explicit_sum(k, x):
    terms = sum(math.comb(k, i) * x**i / math.factorial(i) for i in range(k + 1))
    assert abs(laguerre_eval(k, x) - explicit_laguerre(k, x)) <= 1e-13 * terms


@given(k=st.integers(0, 12), z=st.floats(0.0, 10.0))
def test_p_is_laguerre_of_half_square(k, z):
    assert p_eval(k, z) == laguerre_eval(k, 0.5 * z * z)


@given(k=st.integers(1, 10), z=st.floats(0.05, 8.0))
def test_p_derivative_matches_finite_difference(k, z):
    h = 1e-6 * max(1.0, z)
    fd = (p_eval(k, z + h) - p_eval(k, z - h)) / (2 * h)
    scale = 1.0 + np.max(np.abs(p_table(k, np.array([z - h, z + h]))))
    assert abs(p_derivative(k, z) - fd) <= 1e-6 * scale * max(1.0, z)


# --- grids and quadrature ---------------------------------------------------


def test_uniform_grid_integrates_one():
    g = make_grid(0.0, 12.0, 2000, "minus", "uniform")
    assert inner_product(np.ones(g.n), np.ones(g.n), g) == pytest.approx(1.0, abs=1e-10)


def test_uniform_grid_integrates_z_squared():
    g = make_grid(0.0, 12.0, 2000, "minus", "uniform")
    assert inner_product(g.nodes**2, np.ones(g.n), g) == pytest.approx(2.0, abs=1e-9)


def test_graded_grid_starts_at_zmin():
    b = 1e-5
    g = make_grid(math.sqrt(b), 12.0, 2000, "minus", "graded")
    assert g.nodes[0] == math.sqrt(b)
    assert g.nodes[-1] == 12.0
    assert np.all(np.diff(g.nodes) > 0)
    assert np.all(g.quad_weights >= 0)


def test_graded_grid_resolves_boundary_layer():
    z0 = math.sqrt(1e-6)
    g = make_grid(z0, 12.0, 2000, "minus", "graded")
    assert g.nodes_in(z0, 2 * z0) >= 0.10 * g.n


def test_short_truncation_rejected():
    with pytest.raises(ConfigurationError):
        make_grid(0.0, 4.0, 2000, "minus", "uniform")


def test_too_few_nodes_rejected():
    with pytest.raises(ConfigurationError):
        make_grid(0.0, 12.0, 8, "minus", "uniform")


def test_inner_product_examples():
    g = make_grid(0.0, 12.0, 2000, "minus", "uniform")
    P = p_table(1, g.nodes)
    assert inner_product(P[0], P[0], g) == pytest.approx(1.0, abs=1e-10)
    assert inner_product(P[0], P[1], g) == pytest.approx(0.0, abs=1e-10)
    gb = make_grid(0.2, 12.0, 2000, "minus", "graded")
    one = np.ones(gb.n)
    assert inner_product(one, one, gb) == pytest.approx(math.exp(-0.02), abs=1e-10)


def test_inner_product_shape_mismatch():
    g = make_grid(0.0, 12.0, 100, "minus", "uniform")
    with pytest.raises(ValueError):
        inner_product(np.ones(99), np.ones(100), g)


def test_subnormal_dirichlet_point_rejected():
    with pytest.raises(ConfigurationError, match="subnormal"):
        make_grid(5e-324, 12.0, 100)


@given(a=st.floats(0.0, 0.5, allow_subnormal=False), c=st.floats(0.3, 2.0))
def test_quadrature_of_closed_form_moment(a, c):
    # int_a^inf exp(-c z^2/2) exp(-z^2/2) z dz with weight folded into the grid
    g = make_grid(a, 12.0, 2000, "minus", "graded" if a > 0 else "uniform")
    f = np.exp(-0.5 * c * g.nodes**2)
    exact = math.exp(-0.5 * (1 + c) * a * a) / (1 + c)
    assert inner_product(f, np.ones(g.n), g) == pytest.approx(exact, rel=1e-9)


# --- Gram matrix ------------------------------------------------------------


def test_gram_at_zero_is_identity():
    assert np.max(np.abs(gram_matrix(6, 0.0) - np.eye(7))) <= 1e-9


def test_gram_scalar_closed_form():
    M = gram_matrix(0, 0.04)
    assert M.shape == (1, 1)
    assert M[0, 0] == pytest.approx(math.exp(-0.02), abs=1e-10)


def test_gram_negative_b_rejected():
    with pytest.raises(DomainError):
        gram_matrix(3, -1e-3)


def test_gram_above_b_star_rejected():
    with pytest.raises(DomainError):
        gram_matrix(3, 0.2)


@given(b=st.floats(1e-8, 0.1), K=st.integers(0, 8))
def test_gram_symmetric_positive_definite(b, K):
    M = gram_matrix(K, b, n=800)
    assert np.array_equal(M, M.T)
    assert np.min(np.linalg.eigvalsh(M)) > 0
    rhs = np.arange(1.0, K + 2)
    assert np.allclose(M @ solve_gram(M, rhs), rhs, atol=1e-12)


# --- alpha sequence ---------------------------------------------------------


def test_alpha_examples():
    seq = alpha_seq(3)
    assert seq[0] == 0
    assert seq[1] == 1
    assert seq[3] == Fraction(11, 6)


@given(j=st.integers(1, 40))
def test_alpha_is_harmonic_and_increasing_with_shrinking_steps(j):
    seq = alpha_seq(j + 1)
    assert seq[j] == sum(Fraction(1, j - i) for i in range(j))
    assert seq[j] - seq[j - 1] > seq[j + 1] - seq[j] > 0
    assert alpha(j) == float(seq[j])
