import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfmarket.env import Grids, Triangular, regularized_reward, reward_table
from mfmarket.meanfield import DenseTransitionModel, build_transition_model
from mfmarket.policy import (RegularizerSpec, SoftQTable, estimate_gamma1_lipschitz, evaluate_policy,
                             gamma1_lipschitz_bound, policy_from_q, reward_lipschitz_bound, soft_q_learning,
                             soft_value, soft_value_iteration)
from mfmarket.qp import NonConvergence

from helpers import policy_grid_values, random_mdp


def env_setup(n_hours=4):
    g = Grids.build(np.linspace(-0.3, 0.4, n_hours), Triangular(0.8, 1.2, 1.0), 5, 5, 2)
    return g, build_transition_model(g, 0.1)


# -- softmax map -------------------------------------------------------------

def test_equal_values_give_uniform_policy():
    for alpha in (0.01, 1.0, 100.0):
        np.testing.assert_allclose(policy_from_q(np.array([[1.0, 1.0]]), np.ones((1, 2), bool), alpha), [[0.5, 0.5]])


def test_small_alpha_approaches_argmax():
    p = policy_from_q(np.array([[3.0, 3.1]]), np.ones((1, 2), bool), 1e-4)
    assert p[0, 1] > 1 - 1e-12


@settings(max_examples=50)
@given(st.integers(0, 2 ** 31 - 1), st.floats(-1e3, 1e3), st.floats(0.01, 10))
def test_policy_shift_invariant_and_masked(seed, shift, alpha):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(6, 4)) * 10
    mask = rng.random((6, 4)) < 0.7
    mask[:, 0] = True
    p = policy_from_q(q, mask, alpha)
    np.testing.assert_allclose(p, policy_from_q(q + shift, mask, alpha), atol=1e-9)
    assert np.all(p[~mask] == 0.0)
    # strictly positive unless exp underflows
    gap = (np.where(mask, q, -np.inf).max(axis=1, keepdims=True) - q) / alpha
    assert np.all(p[mask & (gap < 700)] > 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_policy_maximizes_regularized_objective():
    rng = np.random.default_rng(0)
    q = rng.normal(size=4)
    alpha = 0.7
    p = policy_from_q(q[None], np.ones((1, 4), bool), alpha)[0]
    obj = lambda x: x @ q - alpha * np.sum(x * np.log(x))
    for _ in range(200):
        assert obj(p) >= obj(rng.dirichlet(np.ones(4))) - 1e-12
    assert obj(p) == pytest.approx(soft_value(q[None], np.ones((1, 4), bool), alpha)[0])


# -- soft value iteration ------------------------------------------------------

def test_one_step_problem():
    model = DenseTransitionModel(np.ones((1, 2, 1)))
    r = np.array([[1.0, 2.5]])
    t = soft_value_iteration(model, r, RegularizerSpec(0.5), 0.0)
    np.testing.assert_allclose(t.q, r)
    assert soft_value(t.q, model.mask, 0.5)[0] == pytest.approx(0.5 * math.log(math.exp(2) + math.exp(5)))


def test_zero_rewards_give_entropy_bonus():
    rng = np.random.default_rng(1)
    model, _ = random_mdp(rng, 4, 3)
    alpha, gamma = 0.3, 0.9
    t = soft_value_iteration(model, np.zeros((4, 3)), RegularizerSpec(alpha), gamma, tol=1e-12)
    np.testing.assert_allclose(t.q, gamma / (1 - gamma) * alpha * math.log(3), atol=1e-10)
    uniform = np.full((4, 3), 1 / 3)
    np.testing.assert_allclose(evaluate_policy(uniform, model, np.zeros((4, 3)), RegularizerSpec(alpha), gamma),
                               alpha * math.log(3) / (1 - gamma), atol=1e-10)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_two_state_problem_matches_policy_grid(seed):
    rng = np.random.default_rng(seed)
    model, r = random_mdp(rng, 2, 2)
    alpha, gamma = 0.5, 0.8
    reg = RegularizerSpec(alpha)
    t = soft_value_iteration(model, r, reg, gamma, tol=1e-12)
    v_star = soft_value(t.q, model.mask, alpha)
    v0, v1 = policy_grid_values(model, r, alpha, gamma)
    assert abs(v0.max() - v_star[0]) <= 1e-4
    assert abs(v1.max() - v_star[1]) <= 1e-4
    pi = policy_from_q(t.q, model.mask, alpha)
    np.testing.assert_allclose(evaluate_policy(pi, model, r, reg, gamma), v_star, atol=1e-9)


def test_random_starts_reach_same_fixed_point():
    rng = np.random.default_rng(4)
    model, r = random_mdp(rng, 5, 3)
    reg = RegularizerSpec(0.2)
    ref = soft_value_iteration(model, r, reg, 0.9, tol=1e-10).q
    for _ in range(10):
        q0 = rng.normal(scale=50, size=r.shape)
        np.testing.assert_allclose(soft_value_iteration(model, r, reg, 0.9, tol=1e-10, q0=q0).q, ref, atol=1e-6)


def test_bellman_iterates_contract():
    rng = np.random.default_rng(5)
    model, r = random_mdp(rng, 6, 3)
    gamma = 0.85
    _, hist = soft_value_iteration(model, r, RegularizerSpec(0.3), gamma, tol=1e-10,
                                   q0=rng.normal(size=r.shape) * 10, return_history=True)
    h = np.array(hist)
    # the asymptotic ratio is exactly gamma, so allow absolute rounding error in Q (~|Q| * eps)
    assert np.all(h[1:] <= (gamma + 1e-10) * h[:-1] + 1e-12)


def test_iteration_cap_raises():
    rng = np.random.default_rng(6)
    model, r = random_mdp(rng)
    orig = soft_value_iteration.__globals__["soft_bellman"]
    # an operator that never settles
    soft_value_iteration.__globals__["soft_bellman"] = lambda q, *a: q + 1.0
    try:
        with pytest.raises(NonConvergence):
            soft_value_iteration(model, r, RegularizerSpec(0.1), 0.9, tol=1e-8)
    finally:
        soft_value_iteration.__globals__["soft_bellman"] = orig


def test_optimal_policy_dominates_random_policies():
    rng = np.random.default_rng(7)
    model, r = random_mdp(rng, 4, 3)
    reg, gamma = RegularizerSpec(0.4), 0.9
    pi = policy_from_q(soft_value_iteration(model, r, reg, gamma, tol=1e-12).q, model.mask, 0.4)
    v = evaluate_policy(pi, model, r, reg, gamma)
    for _ in range(100):
        other = rng.dirichlet(np.ones(3), size=4)
        assert np.all(v >= evaluate_policy(other, model, r, reg, gamma) - 1e-8)


def test_evaluation_with_no_discount_is_one_step_reward():
    g, model = env_setup()
    lam = np.array([30.0, 40.0, 50.0, 45.0])
    R = reward_table(g, lam, 1.0, 1.0)
    rng = np.random.default_rng(8)
    pi = rng.random((g.S, g.A)) * g.mask
    pi /= pi.sum(1, keepdims=True)
    s0 = 7
    v = evaluate_policy(pi, model, R, RegularizerSpec(0.2), 0.0, s0)
    ref = regularized_reward(g.state_e[s0], g.state_nd[s0], g.state_hour[s0], pi[s0], g.actions, lam, 1.0, 1.0, 0.2)
    assert v == pytest.approx(ref, abs=1e-12)


def test_q_sensitivity_to_prices_is_bounded():
    g, model = env_setup()
    reg, gamma = RegularizerSpec(0.5), 0.9
    rng = np.random.default_rng(9)
    L_r = reward_lipschitz_bound(1.0, 1.0, np.abs(g.nd_values).max())
    for _ in range(10):
        l1, l2 = rng.uniform(20, 60, 4), rng.uniform(20, 60, 4)
        q1 = soft_value_iteration(model, reward_table(g, l1, 1.0, 1.0), reg, gamma, tol=1e-10).q
        q2 = soft_value_iteration(model, reward_table(g, l2, 1.0, 1.0), reg, gamma, tol=1e-10).q
        assert np.abs(q1 - q2)[g.mask].max() <= L_r / (1 - gamma) * np.abs(l1 - l2).sum() + 1e-8


# -- soft Q-learning -----------------------------------------------------------

def test_zero_training_steps_leave_table_untouched():
    rng = np.random.default_rng(0)
    model, r = random_mdp(rng)
    table = SoftQTable(rng.normal(size=r.shape), model.mask, 0.9)
    before = table.q.copy()
    out, s = soft_q_learning(model, r, RegularizerSpec(0.1), 0.9, 0, np.random.default_rng(1), table=table, s0=2)
    np.testing.assert_array_equal(out.q, before)
    assert s == 2


def test_bandit_q_learning_reaches_exact_solution():
    model = DenseTransitionModel(np.ones((1, 3, 1)))
    r = np.array([[1.0, 0.5, -0.2]])
    reg, gamma = RegularizerSpec(0.5), 0.5
    exact = soft_value_iteration(model, r, reg, gamma, tol=1e-12).q
    table, _ = soft_q_learning(model, r, reg, gamma, 100_000, np.random.default_rng(0), lr=lambda k: 1.0 / k)
    np.testing.assert_allclose(table.q, exact, atol=1e-2)


def test_q_learning_is_deterministic_given_seed():
    g, model = env_setup()
    R = reward_table(g, np.array([30.0, 40.0, 50.0, 45.0]), 1.0, 1.0)
    a, _ = soft_q_learning(model, R, RegularizerSpec(0.5), 0.9, 3000, np.random.default_rng(11))
    b, _ = soft_q_learning(model, R, RegularizerSpec(0.5), 0.9, 3000, np.random.default_rng(11))
    np.testing.assert_array_equal(a.q, b.q)
    # masked pairs are never visited
    assert a.visits[~g.mask].sum() == 0


def test_q_learning_approaches_exact_values_on_small_env():
    g, model = env_setup(2)
    R = reward_table(g, np.array([20.0, 40.0]), 1.0, 1.0)
    reg, gamma = RegularizerSpec(2.0), 0.5
    exact = soft_value_iteration(model, R, reg, gamma, tol=1e-12).q
    table, _ = soft_q_learning(model, R, reg, gamma, 200_000, np.random.default_rng(2), lr=lambda k: 1.0 / k ** 0.7)
    seen = (table.visits > 500) & g.mask
    assert seen.sum() >= 0.4 * g.mask.sum()
    assert np.abs(table.q - exact)[seen].max() < 0.5


# -- Lipschitz estimate of the optimality map -----------------------------------

def test_gamma1_lipschitz_identical_pairs():
    g, model = env_setup()
    lam = np.array([30.0, 40.0, 50.0, 45.0])
    est = estimate_gamma1_lipschitz(model, lambda l: reward_table(g, l, 1.0, 1.0), RegularizerSpec(1.0), 0.9,
                                    [(lam, lam.copy())])
    assert est == 0.0


def test_gamma1_lipschitz_scales_inversely_with_alpha():
    g, model = env_setup()
    base = np.array([30.0, 40.0, 50.0, 45.0])
    pairs = []
    for h in range(4):
        bumped = base.copy()
        bumped[h] += 1.0
        pairs.append((base, bumped))
    build = lambda l: reward_table(g, l, 1.0, 1.0)
    e1 = estimate_gamma1_lipschitz(model, build, RegularizerSpec(50.0), 0.9, pairs)
    e2 = estimate_gamma1_lipschitz(model, build, RegularizerSpec(100.0), 0.9, pairs)
    assert 0 < e1 < math.inf
    assert e2 / e1 == pytest.approx(0.5, abs=0.05)
    L_r = reward_lipschitz_bound(1.0, 1.0, np.abs(g.nd_values).max())
    assert e1 <= gamma1_lipschitz_bound(1.0, 1.0, np.abs(g.nd_values).max(), RegularizerSpec(50.0), 0.9)
    assert L_r > 0


def test_regularizer_needs_positive_alpha():
    with pytest.raises(ValueError):
        RegularizerSpec(0.0)
    assert RegularizerSpec(0.3).rho == 0.3
