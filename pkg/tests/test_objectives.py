import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acpc_ota.data import synth_quadratic
from acpc_ota.objectives import (AssumptionConstants, ContractError, EmptyDatasetError,
                                 LogisticProblem, QuadraticProblem, SingularityError,
                                 estimate_constants, global_value, local_gradient,
                                 local_stochastic_gradient, quadratic_optimum)

from conftest import tiny_logistic


def one_d(H=2.0, e=4.0, sigma=0.0):
    return QuadraticProblem(H=[[[H]]], e=[[e]], alpha=[1.0], sigma=sigma)


def central_diff(f, x, h=1e-4):
    g = np.empty_like(x)
    for j in range(len(x)):
        step = np.zeros_like(x)
        step[j] = h
        g[j] = (f(x + step) - f(x - step)) / (2 * h)
    return g


# quadratic family ---------------------------------------------------------


def test_value_at_optimum_is_zero():
    assert global_value(one_d(), np.array([2.0])) == pytest.approx(0.0, abs=1e-15)


def test_value_at_origin_is_constant_term():
    assert global_value(one_d(), np.array([0.0])) == pytest.approx(4.0)


def test_local_gradient_examples():
    q = one_d()
    assert local_gradient(q, 0, np.array([2.0]))[0] == 0.0
    assert local_gradient(q, 0, np.array([0.0]))[0] == -4.0


def test_dimension_mismatch_is_a_contract_error():
    with pytest.raises(ContractError):
        global_value(one_d(), np.zeros(2))
    with pytest.raises(ContractError):
        local_gradient(one_d(), 3, np.zeros(1))


def test_alpha_must_sum_to_one():
    with pytest.raises(ContractError):
        QuadraticProblem(H=[[[1.0]], [[1.0]]], e=[[0.0], [0.0]], alpha=[0.5, 0.6])
    with pytest.raises(ContractError):
        QuadraticProblem(H=[[[1.0]], [[1.0]]], e=[[0.0], [0.0]], alpha=[1.5, -0.5])


def test_ill_conditioned_H_rejected():
    with pytest.raises(SingularityError):
        QuadraticProblem(H=[np.diag([1.0, 1e-14])], e=[[1.0, 1.0]], alpha=[1.0])


def test_optimum_single_client_is_local_optimum():
    q = synth_quadratic(1, 3, 1.0, seed=4)
    np.testing.assert_allclose(quadratic_optimum(q), np.linalg.solve(q.H[0], q.e[0]), rtol=1e-12)


def test_optimum_two_client_hand_value():
    q = QuadraticProblem(H=[[[1.0]], [[3.0]]], e=[[1.0], [3.0]], alpha=[0.5, 0.5])
    assert quadratic_optimum(q)[0] == pytest.approx(1.0, abs=1e-15)


def test_optimum_is_stationary_and_minimal(rng):
    q = synth_quadratic(3, 2, 1.0, seed=7)
    x_star = quadratic_optimum(q)
    assert np.linalg.norm(q.global_gradient(x_star)) <= 1e-9
    f_star = global_value(q, x_star)
    for _ in range(100):
        u = rng.standard_normal(2)
        u /= np.linalg.norm(u)
        assert f_star <= global_value(q, x_star + 1e-3 * u)


def test_singular_mean_curvature():
    # each H_i is invertible but the weighted mean is not
    H = [np.array([[1.0, 0.0], [0.0, -1.0]]), np.array([[-1.0, 0.0], [0.0, 1.0]])]
    q = QuadraticProblem(H=H, e=[[1.0, 1.0], [1.0, 1.0]], alpha=[0.5, 0.5])
    with pytest.raises(SingularityError):
        quadratic_optimum(q)


def test_quadratic_stochastic_gradient_noise_free_equals_exact(rng):
    q = synth_quadratic(2, 3, 1.0, seed=1)
    x = rng.standard_normal(3)
    np.testing.assert_array_equal(local_stochastic_gradient(q, 1, x, 8, rng), q.local_gradient(1, x))


def test_quadratic_stochastic_gradient_is_unbiased():
    sigma, n = 0.7, 100_000
    q = synth_quadratic(2, 3, 1.0, seed=2, sigma=sigma)
    x = np.array([0.3, -0.1, 0.5])
    r = np.random.default_rng(3)
    mean = np.mean([q.local_stochastic_gradient(0, x, 1, r) for _ in range(n)], axis=0)
    assert np.all(np.abs(mean - q.local_gradient(0, x)) <= 3 * sigma / np.sqrt(n))


def test_quadratic_constants_examples():
    assert estimate_constants(one_d()).L == 2.0
    q = QuadraticProblem(H=[np.diag([1.0, 3.0]), np.diag([2.0, 2.0])], e=[[0, 0], [0, 0]],
                         alpha=[0.5, 0.5])
    c = estimate_constants(q)
    assert c.L == pytest.approx(3.0)
    assert c.G_is_estimate


def test_constants_reject_negative():
    with pytest.raises(ValueError):
        AssumptionConstants(L=-1.0, sigma=0.0, G=0.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), m=st.integers(1, 4), d=st.integers(1, 5))
def test_weighted_sum_consistency(seed, m, d):
    q = synth_quadratic(m, d, 1.0, seed=seed)
    r = np.random.default_rng(seed)
    for x in r.standard_normal((4, d)):
        total = sum(a * q.local_value(i, x) for i, a in enumerate(q.alpha))
        assert global_value(q, x) == pytest.approx(total, rel=1e-12, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), m=st.integers(1, 3), d=st.integers(1, 4))
def test_quadratic_gradient_matches_finite_differences(seed, m, d):
    q = synth_quadratic(m, d, 1.0, seed=seed)
    x = np.random.default_rng(seed).standard_normal(d)
    for i in range(m):
        fd = central_diff(lambda z: q.local_value(i, z), x)
        g = q.local_gradient(i, x)
        assert np.allclose(fd, g, rtol=1e-5, atol=1e-5 * max(1.0, np.abs(g).max()))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), het=st.floats(0.0, 2.0))
def test_smoothness_witness_quadratic(seed, het):
    q = synth_quadratic(3, 3, het, seed=seed)
    L = estimate_constants(q).L
    r = np.random.default_rng(seed)
    for _ in range(10):
        x, y = r.standard_normal((2, 3)) * 5
        for i in range(q.m):
            lhs = np.linalg.norm(q.local_gradient(i, x) - q.local_gradient(i, y))
            assert lhs <= L * np.linalg.norm(x - y) * (1 + 1e-10)


# logistic family ------------------------------------------------------------


def test_logistic_alpha_from_sizes():
    p = tiny_logistic((7, 5, 9))
    np.testing.assert_allclose(p.alpha, np.array([7, 5, 9]) / 21)
    assert p.d == (4 + 1) * 3


def test_logistic_rejects_bad_inputs():
    with pytest.raises(EmptyDatasetError):
        LogisticProblem.from_clients([np.ones((2, 3)), np.ones((0, 3))],
                                     [np.array([0, 1]), np.array([], dtype=int)], 2)
    with pytest.raises(ContractError):
        LogisticProblem.from_clients([np.ones((2, 3))], [np.array([0, 5])], 2)


def test_logistic_single_sample_gradient_finite_differences():
    r = np.random.default_rng(0)
    p = LogisticProblem.from_clients([r.random((1, 5))], [np.array([2])], 3)
    x = 0.3 * r.standard_normal(p.d)
    fd = central_diff(lambda z: p.local_value(0, z), x)
    assert np.allclose(fd, p.local_gradient(0, x), atol=1e-5)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), lam=st.sampled_from([0.0, 0.1]))
def test_logistic_gradient_matches_finite_differences(seed, lam):
    p = tiny_logistic(seed=seed % 1000, lam=lam)
    x = 0.5 * np.random.default_rng(seed).standard_normal(p.d)
    for i in range(p.m):
        fd = central_diff(lambda z: p.local_value(i, z), x)
        g = p.local_gradient(i, x)
        assert np.allclose(fd, g, rtol=1e-5, atol=1e-5)


def test_logistic_global_is_weighted_sum_and_one_pass_agrees(rng):
    p = tiny_logistic()
    x = rng.standard_normal(p.d)
    total = sum(a * p.local_value(i, x) for i, a in enumerate(p.alpha))
    assert p.global_value(x) == pytest.approx(total, rel=1e-12)
    v, g = p.value_and_gradient(x)
    assert v == pytest.approx(total, rel=1e-12)
    np.testing.assert_allclose(g, p.global_gradient(x), rtol=1e-10, atol=1e-12)


def test_logistic_full_batch_is_exact_and_consumes_no_randomness(rng):
    p = tiny_logistic()
    x = rng.standard_normal(p.d)
    state = rng.bit_generator.state
    np.testing.assert_array_equal(p.local_stochastic_gradient(0, x, 7, rng), p.local_gradient(0, x))
    assert rng.bit_generator.state == state


def test_logistic_batch_bounds():
    p = tiny_logistic()
    with pytest.raises(ContractError):
        p.local_stochastic_gradient(0, np.zeros(p.d), 8, np.random.default_rng(0))
    with pytest.raises(ContractError):
        p.local_stochastic_gradient(0, np.zeros(p.d), 0, np.random.default_rng(0))


def test_logistic_stochastic_gradient_unbiased():
    p = tiny_logistic((12,))
    x = 0.2 * np.random.default_rng(1).standard_normal(p.d)
    r = np.random.default_rng(2)
    draws = np.array([p.local_stochastic_gradient(0, x, 3, r) for _ in range(40_000)])
    se = draws.std(axis=0) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - p.local_gradient(0, x)) <= 4 * se + 1e-12)


def test_logistic_smoothness_bound_holds(rng):
    p = tiny_logistic(lam=0.05)
    L = estimate_constants(p, rng=np.random.default_rng(0)).L
    for _ in range(50):
        x, y = rng.standard_normal((2, p.d)) * 3
        for i in range(p.m):
            lhs = np.linalg.norm(p.local_gradient(i, x) - p.local_gradient(i, y))
            assert lhs <= L * np.linalg.norm(x - y)


def test_logistic_constants_are_estimates():
    c = estimate_constants(tiny_logistic(), rng=np.random.default_rng(0))
    assert c.G > 0 and c.sigma >= 0 and c.G_is_estimate
