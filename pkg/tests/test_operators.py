import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ecgtrans.errors import InputError
from ecgtrans.operators import (
    FirstOrderOperator,
    SecondOrderOperator,
    builtin_operator,
    cauchy_riemann,
    conormal,
    formal_adjoint,
    generalized_laplacian,
    gradient,
    gradient_with_mass,
    holonomic,
    load_operator,
    operator_from_dict,
    operator_to_dict,
    principal_symbol,
    save_operator,
    scale,
    strong_ellipticity_constant,
    symbol_injectivity_margin,
    unit_directions,
)

# ---------------------------------------------------------------- oracles

def _neg_div(n, extra=0):
    """Coefficients of (-div, extra zero-order entries) acting on n+extra vectors."""
    a = np.zeros((n, 1, n + extra))
    for j in range(n):
        a[j, 0, j] = -1.0
    return a


def test_principal_symbol_gradient():
    s = principal_symbol(gradient(2), [1.0, 0.0])
    assert np.array_equal(s, [[1.0], [0.0]])


def test_principal_symbol_zero_direction():
    for op in (gradient(2), holonomic(), cauchy_riemann()):
        assert not np.any(principal_symbol(op, np.zeros(2)))


def test_principal_symbol_cauchy_riemann():
    assert np.array_equal(principal_symbol(cauchy_riemann(), [0.0, 1.0]), [[-1j]])


def test_principal_symbol_bad_length():
    with pytest.raises(InputError):
        principal_symbol(gradient(2), [1.0, 0.0, 0.0])


def test_adjoint_of_gradient_is_minus_div():
    adj = formal_adjoint(gradient(2))
    assert np.array_equal(adj.a, _neg_div(2))
    assert not np.any(adj.a0)


def test_adjoint_of_gradient_with_mass():
    adj = formal_adjoint(gradient_with_mass(2))
    assert np.array_equal(adj.a, _neg_div(2, extra=1))
    assert np.array_equal(adj.a0, [[0.0, 0.0, 1.0]])


def test_adjoint_of_cauchy_riemann():
    adj = formal_adjoint(cauchy_riemann())
    assert np.array_equal(adj.a, np.array([[[-1.0]], [[-1j]]]))
    assert not np.any(adj.a0)


def test_laplacian_of_gradient():
    L = generalized_laplacian(gradient(2))
    assert L.equals(SecondOrderOperator.negative_laplacian(2))


def test_laplacian_of_gradient_with_mass():
    L = generalized_laplacian(gradient_with_mass(2))
    assert L.equals(SecondOrderOperator.negative_laplacian(2, zero_order=1.0))


def test_laplacian_of_cauchy_riemann():
    # (-dx - i dy)(dx - i dy) = -dxx - dyy; the mixed terms cancel after symmetrization
    L = generalized_laplacian(cauchy_riemann())
    assert L.equals(SecondOrderOperator.negative_laplacian(2))


def test_laplacian_of_holonomic_is_elliptic():
    L = generalized_laplacian(holonomic())
    assert strong_ellipticity_constant(L) == pytest.approx(1.0)


@pytest.mark.parametrize("nu", [(1.0, 0.0), (0.0, 1.0), (0.6, 0.8), (-0.8, 0.6)])
def test_conormal_of_gradient_is_normal_derivative(nu):
    for op in (gradient(2), gradient_with_mass(2)):
        M, M0 = conormal(op).coefficients(np.array(nu))
        assert np.array_equal(M[:, 0, 0], np.array(nu))
        assert not np.any(M0)


def test_conormal_scales_quadratically():
    nu = np.array([0.6, 0.8])
    M, M0 = conormal(holonomic()).coefficients(nu)
    Ms, M0s = conormal(scale(holonomic(), 3.0)).coefficients(nu)
    np.testing.assert_allclose(Ms, 9.0 * M, rtol=1e-15)
    np.testing.assert_allclose(M0s, 9.0 * M0, rtol=1e-15)


def test_conormal_normal_matrix_rank():
    for op in (gradient(2), gradient_with_mass(2), holonomic(), cauchy_riemann()):
        for nu in unit_directions(2, 16):
            assert np.linalg.matrix_rank(conormal(op).normal_matrix(nu)) == op.k


def test_margin_examples():
    assert symbol_injectivity_margin(gradient(2)) == pytest.approx(1.0, abs=1e-14)
    assert symbol_injectivity_margin(gradient_with_mass(2)) == pytest.approx(1.0, abs=1e-14)
    zero = FirstOrderOperator(np.zeros((2, 2, 1)), np.ones((2, 1)))
    assert symbol_injectivity_margin(zero) == 0.0


def test_margin_needs_samples():
    with pytest.raises(InputError):
        symbol_injectivity_margin(gradient(2), samples=4)


def test_ellipticity_examples():
    assert strong_ellipticity_constant(generalized_laplacian(gradient(2))) == pytest.approx(1.0)
    assert strong_ellipticity_constant(generalized_laplacian(gradient_with_mass(2))) == pytest.approx(1.0)
    zero = FirstOrderOperator(np.zeros((2, 1, 1)), np.zeros((1, 1)))
    assert strong_ellipticity_constant(generalized_laplacian(zero)) == 0.0


def test_scale_examples():
    L = generalized_laplacian(scale(gradient(2), 2.0))
    assert L.equals(SecondOrderOperator.negative_laplacian(2, factor=4.0))
    assert scale(holonomic(), 1.0).equals(holonomic())
    lam = 1.7
    Li = generalized_laplacian(scale(holonomic(), lam))
    Le = generalized_laplacian(holonomic())
    np.testing.assert_allclose(Li.Q, lam**2 * Le.Q, rtol=1e-15)
    np.testing.assert_allclose(Li.b, lam**2 * Le.b, rtol=1e-15)
    np.testing.assert_allclose(Li.c, lam**2 * Le.c, rtol=1e-15)


@pytest.mark.parametrize("factor", [0.0, -1.0, np.inf])
def test_scale_rejects_nonpositive(factor):
    with pytest.raises(InputError):
        scale(gradient(2), factor)


def test_operator_validation():
    with pytest.raises(InputError):
        FirstOrderOperator(np.zeros((2, 1, 2)), np.zeros((1, 2)))  # l < k
    with pytest.raises(InputError):
        FirstOrderOperator(np.zeros((1, 2, 1)), np.zeros((2, 1)))  # n < 2
    with pytest.raises(InputError):
        FirstOrderOperator(np.zeros((2, 2, 1)), np.zeros((3, 1)))
    with pytest.raises(InputError):
        FirstOrderOperator(np.full((2, 2, 1), np.nan), np.zeros((2, 1)))


def test_builtin_lookup():
    assert builtin_operator("holonomic").equals(holonomic())
    with pytest.raises(InputError):
        builtin_operator("nope")


# ------------------------------------------------------- pairing identity
#
# (A u, v) = (u, A^* v) for fields vanishing to second order on the boundary
# of the unit square, integrated exactly by tensor Gauss-Legendre.

_GX, _GW = np.polynomial.legendre.leggauss(10)
_X, _Y = np.meshgrid(0.5 * (_GX + 1), 0.5 * (_GX + 1), indexing="ij")
_W = 0.25 * np.outer(_GW, _GW)


def _bump(x, y):
    bx, by = x**2 * (1 - x) ** 2, y**2 * (1 - y) ** 2
    dbx, dby = 2 * x * (1 - x) * (1 - 2 * x), 2 * y * (1 - y) * (1 - 2 * y)
    return bx * by, dbx * by, bx * dby


def _field(coef):
    """Components B(x,y) (c0 + c1 x + c2 y); returns values and d/dx, d/dy, each (m, q, q)."""
    B, Bx, By = _bump(_X, _Y)
    p = coef[:, 0, None, None] + coef[:, 1, None, None] * _X + coef[:, 2, None, None] * _Y
    return B * p, Bx * p + B * coef[:, 1, None, None], By * p + B * coef[:, 2, None, None]


def _apply(op, u, ux, uy):
    return (np.einsum("lk,kxy->lxy", op.a[0], ux) + np.einsum("lk,kxy->lxy", op.a[1], uy)
            + np.einsum("lk,kxy->lxy", op.a0, u))


def _pair(f, g):
    return np.sum(_W * np.sum(np.conj(f) * g, axis=0))


@pytest.mark.parametrize("make", [gradient, gradient_with_mass, holonomic, cauchy_riemann])
def test_pairing_identity_fixtures(make):
    op = make() if make is not gradient else make(2)
    rng = np.random.default_rng(7)
    u = _field(rng.standard_normal((op.k, 3)))
    v = _field(rng.standard_normal((op.l, 3)))
    lhs = _pair(_apply(op, *u), v[0])
    rhs = _pair(u[0], _apply(formal_adjoint(op), *v))
    assert abs(lhs - rhs) <= 1e-14 * max(1.0, abs(lhs))


small = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@st.composite
def operators(draw, complex_=False):
    k = draw(st.integers(1, 3))
    l = draw(st.integers(k, 4))
    a = draw(arrays(float, (2, l, k), elements=small))
    a0 = draw(arrays(float, (l, k), elements=small))
    if complex_:
        a = a + 1j * draw(arrays(float, (2, l, k), elements=small))
        a0 = a0 + 1j * draw(arrays(float, (l, k), elements=small))
    return FirstOrderOperator(a, a0)


@settings(max_examples=40, deadline=None)
@given(operators(complex_=True), st.integers(0, 2**32 - 1))
def test_pairing_identity_random(op, seed):
    rng = np.random.default_rng(seed)
    u = _field(rng.standard_normal((op.k, 3)))
    v = _field(rng.standard_normal((op.l, 3)))
    lhs = _pair(_apply(op, *u), v[0])
    rhs = _pair(u[0], _apply(formal_adjoint(op), *v))
    scale_ = 1.0 + np.abs(op.a).sum() + np.abs(op.a0).sum()
    assert abs(lhs - rhs) <= 1e-12 * scale_


@settings(max_examples=60, deadline=None)
@given(operators(complex_=True))
def test_adjoint_is_involution(op):
    assert formal_adjoint(formal_adjoint(op)).equals(op)


@settings(max_examples=60, deadline=None)
@given(operators(complex_=True), arrays(float, (2,), elements=small))
def test_laplacian_symbol_is_minus_gram_of_symbol(op, zeta):
    s = principal_symbol(op, zeta)
    L = generalized_laplacian(op)
    np.testing.assert_allclose(L.symbol(zeta), -s.conj().T @ s, atol=1e-10)
    P = L.principal_part()
    for j in range(2):
        for m in range(2):
            np.testing.assert_allclose(P[j, m] + P[m, j], (P[j, m] + P[m, j]).conj().T, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(operators(), st.floats(0.1, 10))
def test_scale_squares_laplacian(op, lam):
    L = generalized_laplacian(op)
    Ls = generalized_laplacian(scale(op, lam))
    np.testing.assert_allclose(Ls.Q, lam**2 * L.Q, atol=1e-9)
    np.testing.assert_allclose(Ls.c, lam**2 * L.c, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(operators(complex_=True))
def test_ellipticity_is_margin_squared(op):
    m = symbol_injectivity_margin(op)
    c = strong_ellipticity_constant(generalized_laplacian(op))
    if m > 1e-6:
        assert c == pytest.approx(m**2, rel=1e-8, abs=1e-12)
    else:
        assert c <= 1e-10


@settings(max_examples=40, deadline=None)
@given(operators(complex_=True))
def test_operator_dict_round_trip(op):
    back = operator_from_dict(operator_to_dict(op))
    assert back.equals(op)


def test_operator_file_round_trip(tmp_path):
    for op in (holonomic(), cauchy_riemann()):
        path = tmp_path / f"{op.name}.json"
        save_operator(op, path)
        back = load_operator(path)
        assert back.equals(op) and back.name == op.name


def test_operator_file_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(InputError):
        load_operator(bad)
    with pytest.raises(InputError):
        load_operator(tmp_path / "missing.json")
