import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import cos_field
from ecgtrans.cauchy import (
    ALTERNATING,
    TIKHONOV,
    CauchyOperator,
    DiscrepancyError,
    add_noise,
    forward_map,
    select_alpha_discrepancy,
    solve_alternating,
    solve_tikhonov,
)
from ecgtrans.convergence import harmonic_fixture
from ecgtrans.errors import InputError, SolverError
from ecgtrans.fem import boundary_l2_norm, field_from_function
from ecgtrans.mesh import INNER, OUTER
from ecgtrans.operators import gradient

FX1 = harmonic_fixture(1)
FX5 = harmonic_fixture(5)


def rel(a, b):
    return boundary_l2_norm(a - b) / boundary_l2_norm(b)


@pytest.fixture(scope="module")
def cop01(annulus01):
    return CauchyOperator(gradient(2), annulus01)


@pytest.fixture(scope="module")
def cop005(annulus005):
    return CauchyOperator(gradient(2), annulus005)


def test_fixture_amplitudes():
    # u = (r + 4/r) cos: trace 5, outer data 4, inner flux -(1 - 4) = 3
    assert (FX1.trace, FX1.data, FX1.flux) == (5.0, 4.0, 3.0)
    assert (FX5.trace, FX5.data) == (1025.0, 64.0)


# -------------------------------------------------------------- forward map

def test_forward_map_harmonic(annulus005, cop005):
    g = cos_field(annulus005, INNER, FX1.trace)
    y = forward_map(gradient(2), annulus005, g, cauchy_op=cop005)
    assert rel(y, cos_field(annulus005, OUTER, FX1.data)) <= 2e-3


def test_forward_map_constant_and_zero(annulus01, cop01):
    c = field_from_function(annulus01, lambda x, y: 2.5 + 0 * x, INNER)
    y = forward_map(gradient(2), annulus01, c, cauchy_op=cop01)
    np.testing.assert_allclose(y.values, 2.5, atol=1e-12)
    assert np.abs(forward_map(gradient(2), annulus01, c * 0.0, cauchy_op=cop01).values).max() == 0.0


def test_forward_map_support_check(annulus01):
    with pytest.raises(InputError):
        forward_map(gradient(2), annulus01, cos_field(annulus01, OUTER))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_forward_map_linear(annulus01, cop01, seed):
    rng = np.random.default_rng(seed)
    g1 = rng.standard_normal(cop01.n_in)
    g2 = rng.standard_normal(cop01.n_in)
    f = lambda g: cop01.forward(g)[0]
    np.testing.assert_allclose(f(g1 + g2), f(g1) + f(g2), atol=1e-10 * np.abs(f(g1)).max())


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_adjoint_identity(cop01, seed):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal(cop01.n_in)
    y = rng.standard_normal(cop01.n_out)
    lhs = np.dot(cop01.forward(g)[0], y)
    assert lhs == pytest.approx(np.dot(g, cop01.adjoint(y)), rel=1e-10, abs=1e-12)


def test_gradient_matches_finite_differences(annulus01, cop01):
    rng = np.random.default_rng(11)
    f = cos_field(annulus01, OUTER, FX1.data).vector()
    g = rng.standard_normal(cop01.n_in)
    alpha = 1e-4
    grad = cop01.gradient(g, f, alpha)
    for _ in range(10):
        d = rng.standard_normal(cop01.n_in)
        eps = 1e-3
        fd = (cop01.objective(g + eps * d, f, alpha) - cop01.objective(g - eps * d, f, alpha)) / (2 * eps)
        assert abs(fd - grad @ d) <= 1e-5 * abs(fd)


# ---------------------------------------------------------------- Tikhonov

@pytest.fixture(scope="module")
def tik_m1(annulus005, cop005):
    f = cos_field(annulus005, OUTER, FX1.data)
    return solve_tikhonov(gradient(2), annulus005, f, 1e-8, cauchy_op=cop005)


def test_tikhonov_recovers_m1(annulus005, tik_m1):
    assert tik_m1.method == TIKHONOV
    assert rel(tik_m1.trace_inner, cos_field(annulus005, INNER, FX1.trace)) <= 0.05
    assert rel(tik_m1.flux_inner, cos_field(annulus005, INNER, FX1.flux)) <= 0.05
    assert np.isfinite(tik_m1.discrepancy)
    assert tik_m1.history[-1] <= 1e-10


def test_tikhonov_constant_data(annulus01, cop01):
    f = field_from_function(annulus01, lambda x, y: 1.5 + 0 * x, OUTER)
    sol = solve_tikhonov(gradient(2), annulus01, f, 1e-8, cauchy_op=cop01)
    np.testing.assert_allclose(sol.trace_inner.values, 1.5, rtol=1e-6)
    assert np.abs(sol.flux_inner.values).max() <= 1e-6


def test_tikhonov_zero_data(annulus01, cop01):
    f = cos_field(annulus01, OUTER, 0.0)
    sol = solve_tikhonov(gradient(2), annulus01, f, 1e-8, cauchy_op=cop01)
    assert np.abs(sol.u_b.values).max() <= 1e-6


def test_tikhonov_rejects_bad_alpha(annulus01):
    f = cos_field(annulus01, OUTER)
    for alpha in (0.0, -1.0):
        with pytest.raises(InputError):
            solve_tikhonov(gradient(2), annulus01, f, alpha)
    with pytest.raises(InputError):
        solve_tikhonov(gradient(2), annulus01, cos_field(annulus01, INNER), 1e-3)


def test_tikhonov_stagnation_reports_history(annulus01, cop01):
    f, _ = add_noise(cos_field(annulus01, OUTER, FX5.data, m=5), 0.05, 1)
    with pytest.raises(SolverError) as info:
        solve_tikhonov(gradient(2), annulus01, f, 1e-12, cauchy_op=cop01, maxiter=3)
    assert len(info.value.history) == 4


# -------------------------------------------------------------- alternating

def test_alternating_m1(annulus005, tik_m1):
    f = cos_field(annulus005, OUTER, FX1.data)
    sol = solve_alternating(gradient(2), annulus005, f, max_iter=200)
    assert sol.method == ALTERNATING
    e_alt = rel(sol.trace_inner, cos_field(annulus005, INNER, FX1.trace))
    e_tik = rel(tik_m1.trace_inner, cos_field(annulus005, INNER, FX1.trace))
    assert e_alt <= 0.10
    # the two methods agree within twice the larger individual error
    assert rel(sol.trace_inner, tik_m1.trace_inner) <= 2 * max(e_alt, e_tik)


def test_alternating_constant_one_sweep(annulus01):
    f = field_from_function(annulus01, lambda x, y: 2.0 + 0 * x, OUTER)
    sol = solve_alternating(gradient(2), annulus01, f, max_iter=50)
    assert sol.iterations == 1
    np.testing.assert_allclose(sol.u_b.values, 2.0, atol=1e-10)


def test_alternating_zero_stays_zero(annulus01):
    sol = solve_alternating(gradient(2), annulus01, cos_field(annulus01, OUTER, 0.0), max_iter=5)
    assert np.abs(sol.u_b.values).max() == 0.0


def test_alternating_iteration_count_is_respected(annulus01):
    f = cos_field(annulus01, OUTER, FX5.data, m=5)
    sol = solve_alternating(gradient(2), annulus01, f, max_iter=7, stop_tol=0.0)
    assert sol.iterations == 7 and len(sol.history) == 7
    with pytest.raises(InputError):
        solve_alternating(gradient(2), annulus01, f, max_iter=0)


# ------------------------------------------------------------ noise and sweep

def test_add_noise_level_and_seed(annulus01):
    f = cos_field(annulus01, OUTER, 4.0)
    a, da = add_noise(f, 0.01, 42)
    b, db = add_noise(f, 0.01, 42)
    c, _ = add_noise(f, 0.01, 43)
    assert np.array_equal(a.values, b.values) and da == db
    assert not np.array_equal(a.values, c.values)
    assert boundary_l2_norm(a - f) == pytest.approx(da, rel=1e-12)
    assert da == pytest.approx(0.01 * boundary_l2_norm(f), rel=1e-12)
    with pytest.raises(InputError):
        add_noise(f, -0.1, 0)


def test_sweep_monotone_discrepancy(annulus01):
    f, _ = add_noise(cos_field(annulus01, OUTER, FX1.data), 0.01, 3)
    with pytest.raises(DiscrepancyError) as info:
        select_alpha_discrepancy(gradient(2), annulus01, f, delta=1e-9, alpha_min=1e-10)
    table = info.value.table
    assert [e.alpha for e in table][:3] == [1e-2, 1e-3, 1e-4]
    disc = [e.discrepancy for e in table]
    assert all(b <= a * (1 + 1e-9) for a, b in zip(disc, disc[1:]))


def test_sweep_large_delta_returns_first_alpha(annulus01):
    f = cos_field(annulus01, OUTER, FX1.data)
    alpha, sol, table = select_alpha_discrepancy(gradient(2), annulus01, f,
                                                 delta=10 * boundary_l2_norm(f))
    assert alpha == 1e-2 and len(table) == 1 and sol.alpha == 1e-2


def test_sweep_validates(annulus01):
    f = cos_field(annulus01, OUTER)
    with pytest.raises(InputError):
        select_alpha_discrepancy(gradient(2), annulus01, f, delta=0.0)
    with pytest.raises(InputError):
        select_alpha_discrepancy(gradient(2), annulus01, f, delta=0.1, tau=0.5)


def test_discrepancy_principle_on_m5(annulus005, cop005):
    f = cos_field(annulus005, OUTER, FX5.data, m=5)
    fn, delta = add_noise(f, 0.01, 2024)
    ref = cos_field(annulus005, INNER, FX5.trace, m=5)
    alpha, sol, table = select_alpha_discrepancy(gradient(2), annulus005, fn, delta)
    assert sol.discrepancy <= 1.1 * delta
    raw = solve_tikhonov(gradient(2), annulus005, fn, 1e-10, cauchy_op=cop005)
    assert rel(sol.trace_inner, ref) < rel(raw.trace_inner, ref)
