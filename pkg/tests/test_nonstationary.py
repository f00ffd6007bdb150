import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import linalg, optimize

from longterm_effects.core import (
    DivergenceError,
    EstimationError,
    ExperimentDataset,
    RewardModel,
    SingularMatrixError,
    TransitionModel,
)
from longterm_effects.nonstationary import (
    ExogenousSeries,
    FitReport,
    NonstationaryConfig,
    _GroupStats,
    alternate_minimize,
    apply_transition_adjoint,
    apply_transition_operator,
    build_transition_operator,
    default_lambda_z,
    exogenous_normal_equations,
    loss,
    solve_exogenous,
    solve_transitions,
    value_nonstationary,
)
from longterm_effects.stationary import estimate_effects_stationary, fit_stationary, value_stationary
from longterm_effects.synthetic import ground_truth_delta, make_truth, simulate_dataset

from conftest import random_dataset


def central_gradient(f, x, h=1e-3):
    x = np.array(x, dtype=float)
    g = np.empty(x.size)
    flat = x.ravel()
    for a in range(x.size):
        up, down = flat.copy(), flat.copy()
        up[a] += h
        down[a] -= h
        g[a] = (f(up.reshape(x.shape)) - f(down.reshape(x.shape))) / (2 * h)
    return g


def noiseless(d=3, k=3, n=60, T=8, alpha=1.0, seed=0):
    truth = make_truth(d, k, T, alpha=alpha, seed=seed, noise_std=0.0)
    return truth, simulate_dataset(truth, n, T, center_initial=True)


# -- operator ---------------------------------------------------------------


def test_operator_small_example():
    np.testing.assert_array_equal(build_transition_operator(np.array([[0.5]]), 2),
                                  [[-0.5, 1, 0], [0, -0.5, 1]])


def test_operator_with_zero_dynamics():
    A = build_transition_operator(np.zeros((2, 2)), 3)
    np.testing.assert_array_equal(A[:, :2], 0)
    np.testing.assert_array_equal(A[:, 2:], np.eye(6))


@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**31))
def test_operator_matches_per_step_residuals(d, T, seed):
    rng = np.random.default_rng(seed)
    m, z = rng.standard_normal((d, d)), rng.standard_normal((T + 1, d))
    per_step = np.array([z[t + 1] - m @ z[t] for t in range(T)])
    dense = build_transition_operator(m, T) @ z.ravel()
    np.testing.assert_allclose(apply_transition_operator(m, z), per_step, rtol=0, atol=1e-14)
    np.testing.assert_allclose(dense, per_step.ravel(), rtol=0, atol=1e-14)
    r = rng.standard_normal((T, d))
    np.testing.assert_allclose(apply_transition_adjoint(m, r).ravel(),
                               build_transition_operator(m, T).T @ r.ravel(), atol=1e-13)


# -- loss -------------------------------------------------------------------


def test_loss_is_zero_at_truth():
    truth, ds = noiseless(alpha=2.0)
    value = loss(truth.matrices, truth.exogenous()[: ds.T + 1], ds)
    assert value < 1e-18 * max(1.0, np.sum(ds.observations**2))


def test_loss_with_zero_model_is_next_step_energy(rng):
    ds = random_dataset(rng, k=2, n_per=3, T=4, d=2)
    value = loss(np.zeros((2, 2, 2)), np.zeros((5, 2)), ds)
    assert value == pytest.approx(np.sum(ds.observations[:, 1:] ** 2), rel=1e-14)


@given(st.integers(1, 3), st.integers(1, 5), st.integers(2, 3), st.integers(0, 2**31))
def test_loss_forms_agree(d, T, k, seed):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, k=k, n_per=4, T=T, d=d)
    mats, z = rng.standard_normal((k, d, d)), rng.standard_normal((T + 1, d))
    a = loss(mats, z, ds, 0.3, 0.2, form="sum")
    b = loss(mats, z, ds, 0.3, 0.2, form="operator")
    c = _GroupStats(ds).loss(mats, z, 0.3, 0.2, 0.0)
    assert abs(a - b) <= 1e-10 * abs(a)
    assert abs(a - c) <= 1e-10 * abs(a)


def test_loss_rejects_bad_shapes(rng):
    ds = random_dataset(rng)
    with pytest.raises(ValueError):
        loss(np.zeros((2, 2, 2)), np.zeros((3, 2)), ds)


# -- z update ---------------------------------------------------------------


def test_exogenous_per_step_means():
    obs = np.zeros((4, 2, 1))
    obs[:, 0, 0] = [5.0, -1.0, 2.0, 7.0]
    obs[:, 1, 0] = [1.0, 2.0, 3.0, 4.0]
    ds = ExperimentDataset(obs, np.array([0, 0, 1, 1]), tuple("abcd"), 2)
    z = solve_exogenous(np.zeros((2, 1, 1)), ds, 1e-9).z
    assert z[1, 0] == pytest.approx(2.5, abs=1e-9)
    assert z[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_exogenous_vanishes_under_heavy_penalty(rng):
    ds = random_dataset(rng, k=2, n_per=5, T=3, d=2)
    mats = fit_stationary(ds).model.matrices
    z = solve_exogenous(mats, ds, 1e12).z
    assert np.max(np.abs(z)) < 1e-9 * np.max(np.abs(ds.observations))


def test_exogenous_matches_generic_minimizer(rng):
    ds = random_dataset(rng, k=2, n_per=3, T=3, d=2)
    mats = rng.uniform(-0.5, 0.5, (2, 2, 2))
    lam = 0.05
    z = solve_exogenous(mats, ds, lam).z

    def residuals(flat):
        zz = flat.reshape(4, 2)
        parts = [np.sqrt(lam) * flat]
        for j in range(ds.n):
            x = ds.observations[j] - zz
            m = mats[ds.policies[j]]
            parts += [x[t + 1] - m @ x[t] for t in range(3)]
        return np.concatenate(parts)

    ref = optimize.least_squares(residuals, np.zeros(8), jac="3-point", xtol=1e-15, ftol=1e-15, gtol=1e-15).x
    np.testing.assert_allclose(z.ravel(), ref, atol=1e-6)


@given(st.integers(0, 2**31), st.floats(1e-3, 10.0))
def test_exogenous_first_order_optimality(seed, lam):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, k=2, n_per=4, T=3, d=2)
    mats = rng.uniform(-1, 1, (2, 2, 2))
    z = solve_exogenous(mats, ds, lam).z
    f = lambda zz: loss(mats, zz, ds, lam)
    g_hat = np.linalg.norm(central_gradient(f, z))
    g_zero = np.linalg.norm(central_gradient(f, np.zeros_like(z)))
    assert g_hat <= 1e-8 * g_zero


def test_normal_equations_against_dense_operator(rng):
    ds = random_dataset(rng, k=3, n_per=4, T=3, d=2)
    mats = rng.standard_normal((3, 2, 2))
    system, rhs = exogenous_normal_equations(mats, ds, 0.7)
    ref_sys = 0.7 * np.eye(8)
    ref_rhs = np.zeros(8)
    for j in range(ds.n):
        A = build_transition_operator(mats[ds.policies[j]], 3)
        ref_sys += A.T @ A
        ref_rhs += A.T @ A @ ds.observations[j].ravel()
    np.testing.assert_allclose(system, ref_sys, atol=1e-12)
    np.testing.assert_allclose(rhs, ref_rhs, atol=1e-12)


def test_shared_dynamics_without_penalty_is_singular(rng):
    ds = random_dataset(rng, k=2, n_per=4, T=3, d=2)
    m = np.array([[0.5, 0.1], [0.0, 0.3]])
    with pytest.raises(SingularMatrixError, match="lambda_z > 0"):
        solve_exogenous(np.stack([m, m]), ds, 0.0)


def test_banded_solver_agrees_with_dense(rng, monkeypatch):
    import longterm_effects.nonstationary as ns

    ds = random_dataset(rng, k=2, n_per=5, T=6, d=3)
    mats = rng.uniform(-0.5, 0.5, (2, 3, 3))
    dense = solve_exogenous(mats, ds, 0.1).z
    monkeypatch.setattr(ns, "DENSE_LIMIT", 1)
    banded = solve_exogenous(mats, ds, 0.1).z
    np.testing.assert_allclose(banded, dense, rtol=1e-10, atol=1e-12)


# -- M update ---------------------------------------------------------------


def test_transitions_at_zero_offset_equal_ols(rng):
    ds = random_dataset(rng, k=3, n_per=5, T=4, d=3)
    a = solve_transitions(np.zeros((5, 3)), ds)
    b = fit_stationary(ds).model.matrices
    assert np.max(np.abs(a - b)) <= 1e-12 * np.max(np.abs(b))


def test_heavy_identity_penalty_gives_identity(rng):
    ds = random_dataset(rng, k=2, n_per=5, T=4, d=2)
    mats = solve_transitions(np.zeros((5, 2)), ds, lambda_m=1e12)
    np.testing.assert_allclose(mats, np.broadcast_to(np.eye(2), mats.shape), atol=1e-9)


def test_transitions_recovered_at_true_offset():
    truth, ds = noiseless(alpha=3.0, seed=4)
    mats = solve_transitions(truth.exogenous()[: ds.T + 1], ds)
    assert np.max(np.linalg.norm(mats - truth.matrices, axis=(1, 2))) < 1e-8


@given(st.integers(0, 2**31), st.floats(0.0, 5.0))
def test_transitions_first_order_optimality(seed, lam_m):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, k=2, n_per=4, T=3, d=2)
    z = rng.standard_normal((4, 2))
    mats = solve_transitions(z, ds, lambda_m=lam_m)
    f = lambda mm: loss(mm, z, ds, 0.0, lam_m)
    g_hat = np.linalg.norm(central_gradient(f, mats))
    g_zero = np.linalg.norm(central_gradient(f, np.zeros_like(mats)))
    assert g_hat <= 1e-8 * g_zero


def test_singular_transition_gram():
    obs = np.ones((4, 3, 2))
    ds = ExperimentDataset(obs, np.array([0, 0, 1, 1]), tuple("abcd"), 2)
    with pytest.raises(SingularMatrixError):
        solve_transitions(np.zeros((3, 2)), ds)


# -- joint step --------------------------------------------------------------


def test_damped_step_slope_matches_gradient(rng):
    ds = random_dataset(rng, k=2, n_per=6, T=3, d=2)
    stats = _GroupStats(ds)
    mats, z = rng.uniform(-0.5, 0.5, (2, 2, 2)), rng.standard_normal((4, 2))
    mu = 0.5
    dm, dz, predicted = stats.damped_step(mats, z, 0.1, 0.2, 0.0, mu)
    assert predicted > 0
    f = lambda s: stats.loss(mats + s * dm, z + s * dz, 0.1, 0.2, 0.0)
    h = 1e-5
    slope = (f(h) - f(-h)) / (2 * h)
    g_dot = mu * (np.sum(dm**2) + np.sum(dz**2)) - predicted
    assert slope == pytest.approx(2 * g_dot, rel=1e-6)
    assert slope < 0


# -- values -----------------------------------------------------------------


def test_value_with_zero_offset_is_stationary_value(rng):
    ds = random_dataset(rng, k=2, n_per=5, T=3, d=2)
    model = TransitionModel(rng.uniform(-0.4, 0.4, (2, 2, 2)), 0.9)
    theta = RewardModel(np.array([1.0, -2.0]))
    start = ds.group(1)[:, 0].mean(axis=0)
    assert value_nonstationary(model, ExogenousSeries.zeros(3, 2), ds, theta, 1) == \
        value_stationary(model, 1, theta, start)


def test_value_is_zero_from_offset_start(rng):
    ds = random_dataset(rng, k=2, n_per=5, T=3, d=2)
    model = TransitionModel(rng.uniform(-0.4, 0.4, (2, 2, 2)), 0.9)
    z = np.zeros((4, 2))
    z[0] = ds.group(0)[:, 0].mean(axis=0)
    assert value_nonstationary(model, z, ds, RewardModel(np.ones(2)), 0) == pytest.approx(0.0, abs=1e-14)


def test_value_matches_rollout(rng):
    ds = random_dataset(rng, k=2, n_per=5, T=3, d=3)
    m = rng.standard_normal((3, 3))
    m *= 0.85 / np.max(np.abs(np.linalg.eigvals(m)))
    z = rng.standard_normal((4, 3))
    theta = rng.standard_normal(3)
    start = ds.group(1)[:, 0].mean(axis=0) - z[0]
    ref, x = 0.0, start.copy()
    for t in range(401):
        ref += 0.95**t * theta @ x
        x = m @ x
    got = value_nonstationary(np.stack([m, m]), z, ds, RewardModel(theta), 1, gamma=0.95)
    assert abs(got - ref) <= 1e-9 * abs(ref)


def test_value_needs_gamma_for_bare_arrays(rng):
    ds = random_dataset(rng)
    with pytest.raises(ValueError, match="gamma"):
        value_nonstationary(np.zeros((2, 2, 2)), np.zeros((5, 2)), ds, RewardModel(np.ones(2)), 0)


# -- alternating fit ----------------------------------------------------------


def test_noiseless_fit_recovers_effects():
    truth, ds = noiseless(d=4, k=3, n=200, T=10, alpha=1.0, seed=2)
    theta = RewardModel(np.full(4, 0.25))
    report = alternate_minimize(ds, theta, NonstationaryConfig(gamma=0.99, lambda_z=1e-6))
    true = ground_truth_delta(truth, theta, 0.99)
    np.testing.assert_allclose(report.effects, true, rtol=1e-4)
    fit_part = loss(report.matrices, report.z, ds)
    assert fit_part < 1e-10 * report.loss_trace[0]


def test_no_offset_matches_stationary():
    truth, ds = noiseless(d=3, k=3, n=80, T=8, alpha=0.0, seed=9)
    theta = RewardModel(np.array([1.0, 0.5, -0.5]))
    ns = alternate_minimize(ds, theta, NonstationaryConfig(gamma=0.95, lambda_z=1e-8)).effects
    st_ = estimate_effects_stationary(ds, theta, 0.95)
    np.testing.assert_allclose(ns, st_, rtol=1e-6)


def test_single_iteration_is_stationary_fit(rng):
    truth = make_truth(3, 2, 6, alpha=2.0, seed=1)
    ds = simulate_dataset(truth, 40, 6)
    report = alternate_minimize(ds, RewardModel(np.ones(3)), NonstationaryConfig(gamma=0.5, max_iters=1))
    np.testing.assert_allclose(report.matrices, fit_stationary(ds).model.matrices, rtol=1e-12, atol=1e-14)
    assert report.iterations == 1
    assert report.converged is False
    assert len(report.loss_trace) == 2


@given(st.integers(0, 2**31), st.booleans(), st.sampled_from([0.0, 0.5, 5.0]))
def test_loss_trace_nonincreasing(seed, accelerate, lam_m):
    truth = make_truth(2, 2, 5, alpha=2.0, seed=seed % 1000)
    ds = simulate_dataset(truth, 15, 5)
    cfg = NonstationaryConfig(gamma=0.5, lambda_m=lam_m, accelerate=accelerate, max_iters=60)
    trace = alternate_minimize(ds, RewardModel(np.ones(2)), cfg).loss_trace
    assert all(b <= a for a, b in zip(trace, trace[1:]))


def test_trace_matches_reported_state():
    truth = make_truth(3, 3, 6, alpha=1.0, seed=8)
    ds = simulate_dataset(truth, 30, 6)
    cfg = NonstationaryConfig(gamma=0.9, lambda_z=0.01, lambda_m=0.1)
    report = alternate_minimize(ds, RewardModel(np.ones(3)), cfg)
    final = loss(report.matrices, report.z, ds, 0.01, 0.1)
    assert final == pytest.approx(report.loss_trace[-1], rel=1e-9)


def test_first_step_of_paper_time_convention_runs():
    truth = make_truth(2, 2, 6, alpha=1.0, seed=3)
    ds = simulate_dataset(truth, 30, 6)
    report = alternate_minimize(ds, RewardModel(np.ones(2)), NonstationaryConfig(gamma=0.9, t_start=1))
    assert report.diagnostics["t_start"] == 1
    assert np.all(np.isfinite(report.effects))


def test_single_group_rejected(rng):
    ds = random_dataset(rng, k=1)
    with pytest.raises(EstimationError, match="k >= 2"):
        alternate_minimize(ds, RewardModel(np.ones(2)))


def test_divergence_carries_partial_report():
    truth = make_truth(2, 2, 6, alpha=0.0, seed=0, noise_std=0.0)
    ds = simulate_dataset(truth, 10, 6)
    grown = ds.with_observations(ds.observations * (1.3 ** np.arange(7))[None, :, None])
    with pytest.raises(DivergenceError) as info:
        alternate_minimize(grown, RewardModel(np.ones(2)), NonstationaryConfig(gamma=0.99, lambda_z=1e6))
    report = info.value.report
    assert np.all(np.isnan(report.effects))
    assert "error" in report.diagnostics
    back = FitReport.from_json(report.to_json())
    assert np.all(np.isnan(back.values))


def test_singular_iteration_is_named():
    obs = np.ones((4, 3, 2))
    ds = ExperimentDataset(obs, np.array([0, 0, 1, 1]), tuple("abcd"), 2)
    with pytest.raises(SingularMatrixError, match="iteration 1"):
        alternate_minimize(ds, RewardModel(np.ones(2)))


def test_report_json_roundtrip():
    truth = make_truth(2, 3, 5, alpha=1.0, seed=6)
    ds = simulate_dataset(truth, 20, 5)
    report = alternate_minimize(ds, RewardModel(np.ones(2)), NonstationaryConfig(gamma=0.9))
    text = report.to_json()
    obj = json.loads(text)
    for key in ("matrices", "z", "loss_trace", "values", "effects", "diagnostics"):
        assert key in obj
    back = FitReport.from_json(text)
    np.testing.assert_array_equal(back.matrices, report.matrices)
    np.testing.assert_array_equal(back.z, report.z)
    np.testing.assert_array_equal(back.effects, report.effects)
    assert back.loss_trace == report.loss_trace
    assert back.to_json() == text
    assert back.model.gamma == 0.9 and back.exogenous.T == 5


def test_config_validation():
    for bad in (dict(gamma=1.0), dict(tol=0.0), dict(max_iters=0), dict(lambda_z=-1.0), dict(t_start=2)):
        with pytest.raises(ValueError):
            NonstationaryConfig(**bad)
    with pytest.raises(ValueError, match="unknown"):
        NonstationaryConfig.from_dict({"gama": 0.9})


def test_default_penalty_scales_with_data_size(rng):
    ds = random_dataset(rng, k=2, n_per=5, T=4)
    assert default_lambda_z(ds) == pytest.approx(1e-6 * 10 * 4)
    assert NonstationaryConfig().resolve_lambda_z(ds) == default_lambda_z(ds)


# -- error identity for the offset estimate --------------------------------------


@pytest.mark.parametrize("seed, d, T, n", [(0, 2, 3, 10), (1, 3, 4, 20), (2, 1, 2, 5), (3, 3, 2, 12)])
def test_offset_error_equals_propagated_innovations(seed, d, T, n):
    truth = make_truth(d, 3, T, alpha=1.5, seed=seed)
    sim = simulate_dataset(truth, n, T, return_innovations=True)
    ds, eps = sim.dataset, sim.innovations
    z_true = truth.exogenous()[: T + 1].ravel()
    system, rhs = exogenous_normal_equations(truth.matrices, ds, 0.0)
    pinv = linalg.pinvh(system, rtol=1e-10)
    z_hat = pinv @ rhs
    forcing = np.zeros(d * (T + 1))
    for j in range(ds.n):
        A = build_transition_operator(truth.matrices[ds.policies[j]], T)
        forcing += A.T @ eps[j].ravel()
    projector = pinv @ system
    np.testing.assert_allclose(projector @ (z_hat - z_true), pinv @ forcing, atol=1e-8)
