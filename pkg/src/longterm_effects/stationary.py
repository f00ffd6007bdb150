"""Stationary linear-Markov baseline: OLS transition fit and closed-form value."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .core import (
    DivergenceError,
    ExperimentDataset,
    RewardModel,
    TransitionModel,
    check_gram,
    mean_initial_observation,
)


@dataclass(frozen=True)
class StationaryFit:
    model: TransitionModel
    condition_numbers: tuple[float, ...]
    residual_rms: tuple[float, ...]


def spectral_radius(matrix: np.ndarray) -> float:
    """Largest eigenvalue modulus of a square matrix."""
    m = np.asarray(matrix, dtype=float)
    if m.size == 0:
        return 0.0
    return float(np.max(np.abs(linalg.eigvals(m))))


def spectral_norm(matrix: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(matrix, dtype=float), 2))


def transition_moments(states: np.ndarray, t_start: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Cross and Gram moments of consecutive states.

    ``states`` has shape ``(n, T+1, d)``. Returns ``(C, S)`` with
    ``C = sum x_{t+1} x_t^T`` and ``S = sum x_t x_t^T`` over ``t = t_start..T-1``.
    """
    x0 = states[:, t_start:-1, :].reshape(-1, states.shape[2])
    x1 = states[:, t_start + 1 :, :].reshape(-1, states.shape[2])
    return x1.T @ x0, x0.T @ x0


def regularized_transition(cross: np.ndarray, gram: np.ndarray, lambda_m: float = 0.0, ridge: float = 0.0,
                           what: str = "transition Gram matrix") -> tuple[np.ndarray, float]:
    """Minimizer of ``sum ||y - M x||^2 + lambda_m ||M - I||_F^2 + ridge ||M||_F^2``.

    Closed form ``(C + lambda_m I)(S + (lambda_m + ridge) I)^{-1}``; returns the
    matrix and the condition number of the regularized Gram matrix.
    """
    d = gram.shape[0]
    eye = np.eye(d)
    reg_gram = gram + (lambda_m + ridge) * eye
    hint = "use ridge > 0" if lambda_m == 0 and ridge == 0 else ""
    cond = check_gram(reg_gram, what, hint)
    # M S' = C'  <=>  S' M^T = C'^T, with S' symmetric positive definite
    m = linalg.solve(reg_gram, (cross + lambda_m * eye).T, assume_a="pos").T
    return m, cond


def fit_stationary(dataset: ExperimentDataset, ridge: float = 0.0, gamma: float = 0.99) -> StationaryFit:
    """Per-policy OLS transition matrices from all observed transitions.

    With ``ridge=0`` this is ``M_i = (sum o_{t+1} o_t^T)(sum o_t o_t^T)^{-1}``.
    ``gamma`` only parameterizes the returned :class:`TransitionModel`.
    """
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    mats, conds, rms = [], [], []
    for i in range(dataset.k):
        obs = dataset.group(i)
        cross, gram = transition_moments(obs)
        m, cond = regularized_transition(cross, gram, 0.0, ridge, what=f"Gram matrix of policy {i}")
        resid = obs[:, 1:, :] - obs[:, :-1, :] @ m.T
        mats.append(m)
        conds.append(cond)
        rms.append(float(np.sqrt(np.mean(resid**2))))
    return StationaryFit(TransitionModel(np.stack(mats), gamma), tuple(conds), tuple(rms))


def discounted_value(matrix: np.ndarray, gamma: float, theta: np.ndarray, start: np.ndarray,
                     policy: int | None = None, model=None) -> float:
    """``theta^T (I - gamma M)^{-1} start``, refusing when the series diverges."""
    m = np.asarray(matrix, dtype=float)
    radius = spectral_radius(gamma * m)
    if radius >= 1.0:
        label = "" if policy is None else f" for policy {policy}"
        raise DivergenceError(
            f"discounted value diverges{label}: spectral radius of gamma*M is {radius:.6g} >= 1 "
            f"(the closed form needs the norm of M below 1/gamma; spectral norm of gamma*M is "
            f"{spectral_norm(gamma * m):.6g})",
            radius=radius,
            model=model,
            policy=policy,
        )
    d = m.shape[0]
    # (I - gamma M)^T x = theta, then v = x . start
    lu = linalg.lu_factor(np.eye(d) - gamma * m)
    x = linalg.lu_solve(lu, np.asarray(theta, dtype=float), trans=1)
    return float(x @ np.asarray(start, dtype=float))


def value_stationary(model: TransitionModel, policy: int, theta: RewardModel, o0_mean: np.ndarray) -> float:
    """Discounted long-term reward of ``policy`` started from mean observation ``o0_mean``.

    Raises
    ------
    DivergenceError
        When ``rho(gamma M_policy) >= 1``.
    """
    theta.check_dim(model.d)
    return discounted_value(model[policy], model.gamma, theta.theta, o0_mean, policy=policy, model=model)


def values_stationary(dataset: ExperimentDataset, theta: RewardModel, gamma: float,
                      ridge: float = 0.0) -> tuple[StationaryFit, np.ndarray]:
    theta.check_dim(dataset.d)
    fit = fit_stationary(dataset, ridge=ridge, gamma=gamma)
    values = np.array([
        value_stationary(fit.model, i, theta, mean_initial_observation(dataset, i))
        for i in range(dataset.k)
    ])
    return fit, values


def estimate_effects_stationary(dataset: ExperimentDataset, theta: RewardModel, gamma: float,
                                ridge: float = 0.0) -> np.ndarray:
    """Effects ``v_i - v_0`` for ``i = 1..k-1`` under the stationary model."""
    _, values = values_stationary(dataset, theta, gamma, ridge)
    return values[1:] - values[0]
