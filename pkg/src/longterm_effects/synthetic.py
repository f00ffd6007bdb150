"""Synthetic A/B experiments with policy-specific dynamics and a shared drifting offset.

Random streams
--------------
Every draw comes from a PCG64 generator seeded by
``SeedSequence(seed, spawn_key=key)``:

=================  ==========================
key                used for
=================  ==========================
``(0,)``           transition matrices
``(1,)``           exogenous walk and scales
``(2, i)``         individuals of policy ``i``
=================  ==========================

Each policy group is simulated from its own stream, so results do not depend
on the order (or concurrency) in which groups are generated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import ExperimentDataset, RewardModel
from .stationary import discounted_value

STREAM_TRANSITIONS = 0
STREAM_EXOGENOUS = 1
STREAM_INDIVIDUALS = 2

#: Variance of the walk increments and of the log-scale factors.
WALK_VARIANCE = 1.5
LOG_SCALE_VARIANCE = 0.5


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(key))))


def default_s0_mean(d: int) -> np.ndarray:
    """Non-constant initial mean with average 1 (``linspace(2, 0, d)``; ``[1]`` for ``d=1``).

    A constant vector is an eigenvector of every row-stochastic matrix, which
    would make every policy's value identical.
    """
    if d == 1:
        return np.ones(1)
    return np.linspace(2.0, 0.0, d)


def default_theta(d: int) -> RewardModel:
    return RewardModel(np.full(d, 1.0 / d))


def generate_transitions(d: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` matrices ``0.5 I + 0.5 R`` with ``R`` uniform(0,1) entries normalized to unit row sums."""
    if d < 1 or k < 1:
        raise ValueError("need d >= 1 and k >= 1")
    raw = rng.uniform(0.0, 1.0, size=(k, d, d))
    raw /= raw.sum(axis=2, keepdims=True)
    return 0.5 * np.eye(d) + 0.5 * raw


def generate_exogenous(T_total: int, d: int, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random walk ``z`` and lognormal per-coordinate scales.

    ``z_0 ~ N(0, 1.5 I)``, ``z_{t+1} = z_t + eta_t`` with ``eta_t ~ N(0, 1.5 I)``;
    ``scale_t = exp(beta_t)`` with ``beta_t ~ N(0, 0.5 I)``.

    Returns ``(raw, scales, scaled)``, each of shape ``(T_total+1, d)``, where
    ``scaled = scales * raw`` elementwise.
    """
    if T_total < 1:
        raise ValueError("T_total must be >= 1")
    steps = np.sqrt(WALK_VARIANCE) * np.asarray(rng.standard_normal((T_total + 1, d)))
    raw = np.cumsum(steps, axis=0)
    beta = np.sqrt(LOG_SCALE_VARIANCE) * np.asarray(rng.standard_normal((T_total + 1, d)))
    scales = np.exp(beta)
    return raw, scales, scales * raw


@dataclass(frozen=True)
class SyntheticTruth:
    """Ground-truth parameters of one synthetic experiment."""

    matrices: np.ndarray
    z_raw: np.ndarray
    z_scales: np.ndarray
    alpha: float
    s0_mean: np.ndarray
    noise_std: float = 1.0
    seed: int = 0
    exogenous_variant: str = "scaled"

    def __post_init__(self):
        if self.exogenous_variant not in ("scaled", "raw"):
            raise ValueError("exogenous_variant must be 'scaled' or 'raw'")

    @property
    def k(self) -> int:
        return self.matrices.shape[0]

    @property
    def d(self) -> int:
        return self.matrices.shape[1]

    @property
    def T_max(self) -> int:
        return self.z_raw.shape[0] - 1

    @property
    def z_scaled(self) -> np.ndarray:
        return self.z_scales * self.z_raw

    def exogenous(self, alpha: float | None = None) -> np.ndarray:
        """Additive offset ``alpha * z`` applied to observations (per the variant)."""
        a = self.alpha if alpha is None else alpha
        base = self.z_scaled if self.exogenous_variant == "scaled" else self.z_raw
        return a * base


def make_truth(d: int, k: int, T_max: int, alpha: float, seed: int, noise_std: float = 1.0,
               s0_mean: np.ndarray | None = None, exogenous_variant: str = "scaled") -> SyntheticTruth:
    mats = generate_transitions(d, k, derive_rng(seed, STREAM_TRANSITIONS))
    raw, scales, _ = generate_exogenous(T_max, d, derive_rng(seed, STREAM_EXOGENOUS))
    mu = default_s0_mean(d) if s0_mean is None else np.asarray(s0_mean, dtype=float)
    if mu.shape != (d,):
        raise ValueError(f"s0_mean must have length {d}")
    return SyntheticTruth(mats, raw, scales, float(alpha), mu, float(noise_std), int(seed), exogenous_variant)


@dataclass
class Simulation:
    dataset: ExperimentDataset
    innovations: np.ndarray | None = field(default=None)  # (n, T, d), in dataset order


def simulate_dataset(truth: SyntheticTruth, n_per_policy: int, T: int, alpha: float | None = None,
                     seed: int | None = None, center_initial: bool = False,
                     return_innovations: bool = False):
    """Simulate ``n_per_policy`` individuals per policy for ``T`` steps.

    ``s_0 = s0_mean + N(0, I)``, ``s_{t+1} = M_i s_t + noise_std * N(0, I)`` and
    ``o_t = s_t + alpha * z_t``. With ``center_initial`` each group's initial
    deviations are shifted to have sample mean exactly zero, removing
    Monte Carlo error in the initial mean (useful for noiseless checks).

    Returns an :class:`ExperimentDataset`, or a :class:`Simulation` carrying
    the transition innovations when ``return_innovations`` is set.
    """
    if T < 1 or T > truth.T_max:
        raise ValueError(f"T must be in [1, {truth.T_max}]")
    if n_per_policy < 1:
        raise ValueError("n_per_policy must be >= 1")
    seed = truth.seed if seed is None else seed
    offset = truth.exogenous(alpha)[: T + 1]
    k, d = truth.k, truth.d
    width = len(str(k * n_per_policy - 1))
    obs = np.empty((k * n_per_policy, T + 1, d))
    innov = np.empty((k * n_per_policy, T, d))
    for i in range(k):
        rng = derive_rng(seed, STREAM_INDIVIDUALS, i)
        dev = rng.standard_normal((n_per_policy, d))
        if center_initial:
            dev -= dev.mean(axis=0)
        eps = truth.noise_std * rng.standard_normal((n_per_policy, T, d))
        s = np.empty((n_per_policy, T + 1, d))
        s[:, 0] = truth.s0_mean + dev
        m_t = truth.matrices[i].T
        for t in range(T):
            s[:, t + 1] = s[:, t] @ m_t + eps[:, t]
        rows = slice(i * n_per_policy, (i + 1) * n_per_policy)
        obs[rows] = s + offset
        innov[rows] = eps
    ids = tuple(f"{j:0{width}d}" for j in range(k * n_per_policy))
    policies = np.repeat(np.arange(k), n_per_policy)
    ds = ExperimentDataset(obs, policies, ids, k)
    if return_innovations:
        return Simulation(ds, innov)
    return ds


def ground_truth_values(truth: SyntheticTruth, theta: RewardModel, gamma: float) -> np.ndarray:
    """``theta^T (I - gamma M_i)^{-1} s0_mean`` for every policy (exogenous part excluded)."""
    theta.check_dim(truth.d)
    return np.array([
        discounted_value(truth.matrices[i], gamma, theta.theta, truth.s0_mean, policy=i)
        for i in range(truth.k)
    ])


def ground_truth_delta(truth: SyntheticTruth, theta: RewardModel, gamma: float) -> np.ndarray:
    """True effects ``v_i - v_0``, ``i = 1..k-1``; independent of alpha and z."""
    v = ground_truth_values(truth, theta, gamma)
    return v[1:] - v[0]


def truth_to_dict(truth: SyntheticTruth, theta: RewardModel, gamma: float | None = None) -> dict:
    out = {
        "matrices": truth.matrices.tolist(),
        "z_scaled": truth.z_scaled.tolist(),
        "z_raw": truth.z_raw.tolist(),
        "alpha": truth.alpha,
        "s0_mean": truth.s0_mean.tolist(),
        "noise_std": truth.noise_std,
        "exogenous_variant": truth.exogenous_variant,
        "theta": theta.theta.tolist(),
        "seed": truth.seed,
    }
    if gamma is not None:
        out["gamma"] = gamma
        out["gamma_free_truth"] = {"delta": ground_truth_delta(truth, theta, gamma).tolist()}
    return out


def truth_to_json(truth: SyntheticTruth, theta: RewardModel, gamma: float | None = None) -> str:
    return json.dumps(truth_to_dict(truth, theta, gamma), indent=2)
