import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfmarket.checks import consistency_ratios
from mfmarket.env import Grids, PopulationSpec, Triangular, efficiency_adjust, storage_transition
from mfmarket.meanfield import (DenseTransitionModel, aggregate_storage, build_transition_model,
                                consistency_update, initial_meanfield, meanfield_to_demand)


def small_grids(noise=Triangular(0.8, 1.2, 1.0)):
    return Grids.build([0.2, -0.1, 0.3], noise, n_storage=5, n_actions=5, n_nd=3)


def brute_kernel(g, zeta):
    """P[s, a, s'] written out from the definitions, one entry at a time."""
    P = np.zeros((g.S, g.A, g.S))
    for s in range(g.S):
        h, i = g.state_hour[s], g.state_e_index[s]
        h2 = (h + 1) % g.H
        for a in range(g.A):
            e2 = storage_transition(g.storage[i], g.actions[a], g.storage)
            i2 = int(np.flatnonzero(g.storage == e2)[0])
            for k2 in range(g.K):
                for j in range(g.E):
                    p_e = zeta / g.E + (1 - zeta) * (j == i2)
                    P[s, a, g.index(h2, k2, j)] += g.nd_probs[h2, k2] * p_e
    return P


@pytest.mark.parametrize("zeta", [0.0, 0.3, 1.0])
def test_factored_kernel_matches_brute_force(zeta):
    g = small_grids()
    model = build_transition_model(g, zeta)
    P = brute_kernel(g, zeta)
    np.testing.assert_allclose(model.matrix(), P, atol=1e-15)
    np.testing.assert_allclose(P.sum(axis=2), 1.0, atol=1e-12)
    rng = np.random.default_rng(0)
    v = rng.normal(size=g.S)
    w = rng.random((g.S, g.A))
    pi = rng.dirichlet(np.ones(g.A), g.S)
    np.testing.assert_allclose(model.expect(v), P @ v, atol=1e-12)
    np.testing.assert_allclose(model.push(w), np.einsum("sa,sat->ta", w, P), atol=1e-12)
    np.testing.assert_allclose(model.policy_matrix(pi), np.einsum("sa,sat->st", pi, P), atol=1e-12)


def test_deterministic_chain_has_one_hot_rows():
    g = small_grids(Triangular())
    P = build_transition_model(g, 0.0).matrix()
    assert np.all(np.isclose(P.max(axis=2), 1.0))


def test_full_regeneration_forgets_storage():
    g = small_grids()
    P = build_transition_model(g, 1.0).matrix().reshape(g.S, g.A, g.H, g.K, g.E)
    e_marg = P.sum(axis=(2, 3))
    np.testing.assert_allclose(e_marg, 1.0 / g.E, atol=1e-15)


def test_sampled_transitions_follow_kernel():
    g = small_grids()
    model = build_transition_model(g, 0.2)
    P = model.matrix()
    rng = np.random.default_rng(5)
    s, a = int(g.index(1, 2, 2)), 3
    draws = [model.sample_next(s, a, rng.random(3)) for _ in range(40_000)]
    freq = np.bincount(draws, minlength=g.S) / len(draws)
    np.testing.assert_allclose(freq, P[s, a], atol=6e-3)


def test_dense_sampling_uses_cumulative_rows():
    m = DenseTransitionModel(np.array([[[0.25, 0.75]], [[1.0, 0.0]]]))
    assert m.sample_next(0, 0, [0.2]) == 0 and m.sample_next(0, 0, [0.3]) == 1


def test_consistency_with_full_noise_is_uniform():
    g = small_grids()
    model = build_transition_model(g, 0.4)
    rng = np.random.default_rng(0)
    mf = rng.dirichlet(np.ones(g.S * g.A)).reshape(g.S, g.A)
    out = consistency_update(mf, g.mask / g.mask.sum(1, keepdims=True), model, 1.0)
    np.testing.assert_allclose(out, 1.0 / (g.S * g.A))


def test_point_mass_moves_to_successor():
    g = small_grids(Triangular())
    model = build_transition_model(g, 0.0)
    s0, a0, a1 = int(g.index(0, 0, 2)), 1, 3
    mf = np.zeros((g.S, g.A))
    mf[s0, a0] = 1.0
    pi = np.zeros((g.S, g.A))
    pi[:, g.zero_action] = 1.0
    pi[s0] = 0.0
    pi[s0, a1] = 1.0
    out = consistency_update(mf, pi, model, 0.0)
    # the printed map moves mass with the new action a1 and records a1
    s1 = int(np.argmax(model.matrix()[s0, a1]))
    expected = np.zeros_like(mf)
    expected[s1, a1] = 1.0
    np.testing.assert_array_equal(out, expected)
    nat = consistency_update(mf, pi, model, 0.0, variant="natural")
    s1n = int(np.argmax(model.matrix()[s0, a0]))
    assert nat[s1n].sum() == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.0, 1.0), st.sampled_from(["printed", "natural"]))
def test_consistency_stays_on_simplex_with_floor(seed, zeta, variant):
    g = small_grids()
    model = build_transition_model(g, zeta)
    rng = np.random.default_rng(seed)
    mf = rng.dirichlet(np.ones(g.S * g.A) * 0.3).reshape(g.S, g.A)
    pi = rng.random((g.S, g.A)) * g.mask
    pi /= pi.sum(1, keepdims=True)
    out = consistency_update(mf, pi, model, zeta, variant)
    assert abs(out.sum() - 1) <= 1e-12
    assert out.min() >= zeta / (g.S * g.A) - 1e-18


@pytest.mark.parametrize("zeta", [0.05, 0.5, 0.9])
def test_lipschitz_constants_are_one_minus_zeta(zeta):
    g = small_grids()
    r_mf, r_pi = consistency_ratios(build_transition_model(g, zeta), zeta, n_pairs=300, seed=1)
    assert r_mf <= 1 - zeta + 1e-9
    assert r_pi <= 1 - zeta + 1e-9
    assert r_mf >= 1 - zeta - 1e-9          # point masses attain the bound


def test_repeated_application_contracts_geometrically():
    g = small_grids()
    zeta = 0.2
    model = build_transition_model(g, zeta)
    rng = np.random.default_rng(3)
    pi = rng.random((g.S, g.A)) * g.mask
    pi /= pi.sum(1, keepdims=True)
    a = initial_meanfield(g, 0.0)
    b = initial_meanfield(g, 1.0, hour=1)
    prev = np.abs(a - b).sum()
    for _ in range(30):
        a, b = consistency_update(a, pi, model, zeta), consistency_update(b, pi, model, zeta)
        d = np.abs(a - b).sum()
        assert d <= (1 - zeta) * prev + 1e-12
        prev = d


def test_demand_from_point_mass():
    g = Grids.build([0.2], Triangular(), 5, 5, 1)
    pop = PopulationSpec(10, 0, (1.0,), (1.0,), 100.0)
    mf = np.zeros((g.S, g.A))
    mf[int(g.index(0, 0, 2)), g.zero_action] = 1.0       # e = 0.5, nd = 0.2, idle
    assert meanfield_to_demand([mf], [g], [pop], [0.0])[0] == pytest.approx(20.0)


def test_demand_with_zero_net_load_is_consumer_demand():
    g = Grids.build([0.0, 0.0], Triangular(), 5, 5, 1)
    pop = PopulationSpec(10, 50, (1.0,), (1.0,), 3.0, consumer_ref_capacity=0.01)
    mf = np.zeros((g.S, g.A))
    mf[:, g.zero_action] = 1.0 / g.S
    assert meanfield_to_demand([mf], [g], [pop], [40.0])[0] == pytest.approx(0.4)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.5, 1.0))
def test_demand_difference_bound(seed, eta):
    g = small_grids()
    pop = PopulationSpec(10, 0, (1.0,), (1.0,), 2.5, efficiency=eta)
    rng = np.random.default_rng(seed)
    L1, L2 = (rng.dirichlet(np.ones(g.S * g.A)).reshape(g.S, g.A) for _ in range(2))
    d1, d2 = (meanfield_to_demand([L], [g], [pop], [0.0])[0] for L in (L1, L2))
    bound = pop.total_capacity * np.abs(L1 - L2).sum() * (1 / eta + np.abs(g.nd_values).max())
    assert abs(d1 - d2) <= bound + 1e-12


def test_aggregate_storage_examples():
    assert aggregate_storage([0.5, 0.5, 0.5], [1, 2, 3]) == pytest.approx(0.5)
    assert aggregate_storage([0.0, 1.0], [10, 30]) == pytest.approx(0.75)
    assert aggregate_storage([0.3], [7]) == pytest.approx(0.3)


def test_initial_meanfield_is_a_distribution():
    g = small_grids()
    mf = initial_meanfield(g, 0.5, hour=2)
    assert mf.sum() == pytest.approx(1.0)
    assert np.all(mf[~g.mask] == 0)
    assert set(g.state_hour[mf.sum(1) > 0]) == {2}


def test_efficiency_adjust_vectorizes_over_grid():
    g = small_grids()
    phi = efficiency_adjust(g.state_e[:, None], g.actions[None, :], 0.9)
    assert phi.shape == (g.S, g.A)
