import numpy as np
import pytest
from hypothesis import given, strategies as st

from longterm_effects.core import DivergenceError, ExperimentDataset, RewardModel, SingularMatrixError, TransitionModel
from longterm_effects.stationary import (
    estimate_effects_stationary,
    fit_stationary,
    spectral_radius,
    value_stationary,
)
from longterm_effects.synthetic import ground_truth_delta, make_truth, simulate_dataset

from conftest import random_dataset


def one_group(traj):
    obs = np.asarray(traj, dtype=float)
    if obs.ndim == 2:
        obs = obs[None]
    return ExperimentDataset(obs, np.zeros(len(obs), dtype=int), tuple(map(str, range(len(obs)))), 1)


def rollout_value(m, gamma, theta, start, steps):
    total, x = 0.0, np.array(start, dtype=float)
    for t in range(steps + 1):
        total += gamma**t * theta @ x
        x = m @ x
    return total


def test_scalar_ols_by_hand():
    fit = fit_stationary(one_group([[1.0], [2.0], [4.0]]))
    assert fit.model[0][0, 0] == pytest.approx(2.0, abs=1e-14)


def test_constant_trajectory_is_fixed_point():
    fit = fit_stationary(one_group([[3.0], [3.0], [3.0]]))
    assert fit.model[0][0, 0] == pytest.approx(1.0, abs=1e-14)
    assert fit.residual_rms[0] == pytest.approx(0.0, abs=1e-14)


def test_noiseless_refit(rng):
    m = rng.uniform(-0.4, 0.4, (3, 3))
    obs = np.empty((4, 5, 3))
    obs[:, 0] = rng.standard_normal((4, 3))
    for t in range(4):
        obs[:, t + 1] = obs[:, t] @ m.T
    fit = fit_stationary(one_group(obs))
    assert np.linalg.norm(fit.model[0] - m) < 1e-8
    assert min(fit.condition_numbers) >= 1.0


def test_ols_matches_lstsq(rng):
    ds = random_dataset(rng, k=2, n_per=5, T=3, d=3)
    fit = fit_stationary(ds)
    for i in range(2):
        g = ds.group(i)
        x, y = g[:, :-1].reshape(-1, 3), g[:, 1:].reshape(-1, 3)
        ref = np.linalg.lstsq(x, y, rcond=None)[0].T
        np.testing.assert_allclose(fit.model[i], ref, rtol=1e-12, atol=1e-12)


def test_singular_gram_advises_ridge():
    ds = one_group(np.zeros((2, 3, 2)) + [1.0, 1.0])
    with pytest.raises(SingularMatrixError, match="ridge"):
        fit_stationary(ds)
    fit = fit_stationary(ds, ridge=1e-3)
    assert np.all(np.isfinite(fit.model.matrices))


def test_scalar_value_example():
    model = TransitionModel(np.array([[[0.5]]]), 0.5)
    assert value_stationary(model, 0, RewardModel(np.ones(1)), np.array([4.0])) == pytest.approx(16 / 3, rel=1e-15)


def test_zero_dynamics_value_is_immediate_reward(rng):
    start, theta = rng.standard_normal(3), rng.standard_normal(3)
    model = TransitionModel(np.zeros((1, 3, 3)), 0.9)
    assert value_stationary(model, 0, RewardModel(theta), start) == pytest.approx(theta @ start, rel=1e-14)


def test_value_matches_rollout(rng):
    for _ in range(10):
        m = rng.standard_normal((3, 3))
        m *= 0.8 / spectral_radius(m)
        start, theta = rng.standard_normal(3), rng.standard_normal(3)
        ref = rollout_value(m, 0.95, theta, start, 400)
        got = value_stationary(TransitionModel(m[None], 0.95), 0, RewardModel(theta), start)
        assert abs(got - ref) <= 1e-9 * abs(ref)


def test_divergent_value_raises():
    model = TransitionModel(np.array([[[1.2]]]), 0.9)
    with pytest.raises(DivergenceError) as info:
        value_stationary(model, 0, RewardModel(np.ones(1)), np.ones(1))
    assert info.value.radius == pytest.approx(1.08)
    assert "spectral norm" in str(info.value)


def test_spectral_radius_examples(rng):
    assert spectral_radius(np.eye(4)) == pytest.approx(1.0, rel=1e-12)
    assert spectral_radius(np.diag([0.2, -0.9])) == pytest.approx(0.9, rel=1e-12)
    m = rng.standard_normal((5, 5))
    # companion-form oracle: roots of the characteristic polynomial
    roots = np.roots(np.poly(m))
    assert spectral_radius(m) == pytest.approx(np.max(np.abs(roots)), rel=1e-8)


def test_identical_groups_have_zero_effect(rng):
    g = rng.standard_normal((6, 4, 2))
    obs = np.concatenate([g, g])
    ds = ExperimentDataset(obs, np.repeat([0, 1], 6), tuple(map(str, range(12))), 2)
    assert estimate_effects_stationary(ds, RewardModel(np.ones(2)), 0.9)[0] == 0.0


def test_copy_of_control_as_third_group(rng):
    g0, g1 = rng.standard_normal((6, 4, 2)), rng.standard_normal((6, 4, 2))
    theta = RewardModel(np.array([1.0, -0.5]))
    two = ExperimentDataset(np.concatenate([g0, g1]), np.repeat([0, 1], 6), tuple(map(str, range(12))), 2)
    three = ExperimentDataset(np.concatenate([g0, g1, g0]), np.repeat([0, 1, 2], 6),
                              tuple(map(str, range(18))), 3)
    e2 = estimate_effects_stationary(two, theta, 0.5)
    e3 = estimate_effects_stationary(three, theta, 0.5)
    assert e3[1] == 0.0
    assert e3[0] == e2[0]


def test_noiseless_stationary_synthetic_recovers_truth():
    truth = make_truth(4, 3, 10, alpha=0.0, seed=5, noise_std=0.0)
    ds = simulate_dataset(truth, 50, 10, center_initial=True)
    theta = RewardModel(np.full(4, 0.25))
    est = estimate_effects_stationary(ds, theta, 0.99)
    true = ground_truth_delta(truth, theta, 0.99)
    np.testing.assert_allclose(est, true, rtol=1e-6)


@given(st.integers(0, 2**31), st.floats(0.1, 10.0))
def test_scaling_observations_scales_value(seed, c):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, k=2, n_per=8, T=4, d=2)
    theta = RewardModel(np.array([1.0, 0.5]))
    base = fit_stationary(ds)
    scaled = ds.with_observations(c * ds.observations)
    fit = fit_stationary(scaled)
    np.testing.assert_allclose(fit.model.matrices, base.model.matrices, rtol=1e-9, atol=1e-12)
    gamma = 0.5 / max(1.0, max(spectral_radius(m) for m in base.model.matrices))
    v = estimate_effects_stationary(ds, theta, gamma)
    np.testing.assert_allclose(estimate_effects_stationary(scaled, theta, gamma), c * v, rtol=1e-8, atol=1e-12)


@given(st.integers(0, 2**31))
def test_fit_equivariant_to_relabeling(seed):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, k=3, n_per=5, T=3, d=2)
    perm_ind = rng.permutation(ds.n)
    labels = np.array([2, 0, 1])
    shuffled = ExperimentDataset(ds.observations[perm_ind], labels[ds.policies[perm_ind]],
                                 tuple(ds.individual_ids[j] for j in perm_ind), 3)
    a = fit_stationary(ds).model.matrices
    b = fit_stationary(shuffled).model.matrices
    for i in range(3):
        np.testing.assert_allclose(b[labels[i]], a[i], rtol=1e-10, atol=1e-12)


@given(st.integers(0, 2**31), st.integers(5, 60))
def test_truncation_error_bound(seed, horizon):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((3, 3))
    m *= 0.9 / np.linalg.norm(m, 2)
    gamma = 0.9
    theta, start = rng.standard_normal(3), rng.standard_normal(3)
    exact = value_stationary(TransitionModel(m[None], gamma), 0, RewardModel(theta), start)
    partial = rollout_value(m, gamma, theta, start, horizon)
    q = gamma * 0.9
    bound = np.linalg.norm(theta) * np.linalg.norm(start) * q ** (horizon + 1) / (1 - q)
    assert abs(exact - partial) <= bound + 1e-12
