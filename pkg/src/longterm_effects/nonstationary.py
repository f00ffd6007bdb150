"""Linear dynamics plus a shared time-varying exogenous offset.

Observations are modelled as ``o_{j,t} = s_{j,t} + z_t`` where ``s`` follows
policy-specific linear dynamics ``s_{t+1} = M_i s_t + noise`` and ``z_t`` is
shared by every individual. ``(M_i, z)`` are fitted jointly by minimizing::

    L = sum_i sum_{j in I_i} sum_{t=0}^{T-1} ||o_{j,t+1} - z_{t+1} - M_i (o_{j,t} - z_t)||^2
        + lambda_z ||z||^2 + lambda_m sum_i ||M_i - I||_F^2

with exact block updates in ``M`` (per-policy least squares) and ``z`` (one
symmetric positive definite system of size ``d (T+1)``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .core import (
    RCOND_MIN,
    DivergenceError,
    EstimationError,
    ExperimentDataset,
    RewardModel,
    SingularMatrixError,
    TransitionModel,
    check_gram,
    mean_initial_observation,
)
from .stationary import discounted_value, regularized_transition, spectral_norm, spectral_radius


#: Above this system size the z solve switches to a banded Cholesky factorization.
DENSE_LIMIT = 2000


@dataclass(frozen=True)
class ExogenousSeries:
    """Shared offsets ``z_0..z_T``, shape ``(T+1, d)``."""

    z: np.ndarray

    def __post_init__(self):
        z = np.array(self.z, dtype=float)
        if z.ndim != 2 or z.shape[0] < 2:
            raise ValueError(f"z must have shape (T+1, d) with T >= 1, got {z.shape}")
        if not np.all(np.isfinite(z)):
            raise ValueError("z has non-finite entries")
        z.setflags(write=False)
        object.__setattr__(self, "z", z)

    @property
    def T(self) -> int:
        return self.z.shape[0] - 1

    @classmethod
    def zeros(cls, T: int, d: int) -> "ExogenousSeries":
        return cls(np.zeros((T + 1, d)))


@dataclass(frozen=True)
class NonstationaryConfig:
    """Settings for :func:`alternate_minimize`.

    ``lambda_z=None`` selects :func:`default_lambda_z`. ``accelerate`` adds a
    joint damped Gauss-Newton step (only when ``t_start == 0``) and a
    within-group restart to the block iterations. ``t_start=1`` drops
    the first transition from the ``M`` update, which is what the published
    algorithm box writes; that update no longer minimizes the loss, so the
    iterations can stall early (the trace stays nonincreasing).
    """

    gamma: float = 0.99
    lambda_z: float | None = None
    lambda_m: float = 0.0
    tol: float = 1e-9
    max_iters: int = 2000
    patience: int = 3
    ridge: float = 0.0
    accelerate: bool = True
    t_start: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.lambda_z is not None and self.lambda_z < 0:
            raise ValueError("lambda_z must be >= 0")
        if self.lambda_m < 0 or self.ridge < 0:
            raise ValueError("lambda_m and ridge must be >= 0")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.t_start not in (0, 1):
            raise ValueError("t_start must be 0 or 1")

    def resolve_lambda_z(self, dataset: ExperimentDataset) -> float:
        if self.lambda_z is not None:
            return float(self.lambda_z)
        return default_lambda_z(dataset)

    @classmethod
    def from_dict(cls, obj: dict) -> "NonstationaryConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)


def default_lambda_z(dataset: ExperimentDataset) -> float:
    """``1e-6 n T``.

    The loss and the penalty are both quadratic in the data, so the weight is
    unitless; the curvature of the data term in ``z`` grows like ``n``. A
    weight proportional to the squared observation norm would shrink ``z``
    harder the larger the drift, which is exactly when it must be free.
    """
    return 1e-6 * dataset.n * dataset.T


@dataclass
class FitReport:
    """Result of a fit; serializes to the stable JSON layout of :meth:`to_dict`."""

    method: str
    gamma: float
    matrices: np.ndarray | None
    z: np.ndarray | None
    loss_trace: list[float]
    iterations: int
    converged: bool
    values: np.ndarray
    effects: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def model(self) -> TransitionModel:
        return TransitionModel(self.matrices, self.gamma)

    @property
    def exogenous(self) -> ExogenousSeries:
        return ExogenousSeries(self.z)

    def to_dict(self) -> dict:
        def arr(a):
            if a is None:
                return None
            a = np.asarray(a, dtype=float)
            return np.where(np.isfinite(a), a, None).tolist()

        return {
            "method": self.method,
            "gamma": self.gamma,
            "matrices": arr(self.matrices),
            "z": arr(self.z),
            "loss_trace": [float(x) for x in self.loss_trace],
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "values": arr(self.values),
            "effects": arr(self.effects),
            "diagnostics": _jsonable(self.diagnostics),
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, obj: dict) -> "FitReport":
        def arr(a):
            return None if a is None else np.asarray(a, dtype=float)

        return cls(
            method=obj["method"],
            gamma=float(obj["gamma"]),
            matrices=arr(obj.get("matrices")),
            z=arr(obj.get("z")),
            loss_trace=[float(x) for x in obj.get("loss_trace", [])],
            iterations=int(obj.get("iterations", 0)),
            converged=bool(obj.get("converged", False)),
            values=arr(obj["values"]),
            effects=arr(obj["effects"]),
            diagnostics=obj.get("diagnostics", {}),
        )

    @classmethod
    def from_json(cls, text: str) -> "FitReport":
        return cls.from_dict(json.loads(text))


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


# ---------------------------------------------------------------------------
# Block transition operator


def build_transition_operator(M: np.ndarray, T: int) -> np.ndarray:
    """Dense ``dT x d(T+1)`` operator with ``(A x)_t = x_{t+1} - M x_t``.

    Block row ``t`` holds ``-M`` in block column ``t`` and ``I`` in column ``t+1``.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if T < 1:
        raise ValueError("T must be >= 1")
    d = M.shape[0]
    A = np.zeros((d * T, d * (T + 1)))
    eye = np.eye(d)
    for t in range(T):
        A[t * d:(t + 1) * d, t * d:(t + 1) * d] = -M
        A[t * d:(t + 1) * d, (t + 1) * d:(t + 2) * d] = eye
    return A


def apply_transition_operator(M: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Matrix-free ``A x`` for ``x`` of shape ``(..., T+1, d)``; returns ``(..., T, d)``."""
    return x[..., 1:, :] - x[..., :-1, :] @ np.asarray(M).T


def apply_transition_adjoint(M: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Matrix-free ``A^T r`` for ``r`` of shape ``(..., T, d)``; returns ``(..., T+1, d)``."""
    shape = r.shape[:-2] + (r.shape[-2] + 1, r.shape[-1])
    out = np.zeros(shape)
    out[..., :-1, :] -= r @ np.asarray(M)
    out[..., 1:, :] += r
    return out


def _gram_blocks(M: np.ndarray, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal and sub-diagonal blocks of ``A^T A`` (block tridiagonal)."""
    d = M.shape[0]
    mtm = M.T @ M
    diag = np.empty((T + 1, d, d))
    diag[0] = mtm
    diag[1:T] = mtm + np.eye(d)
    diag[T] = np.eye(d)
    lower = np.broadcast_to(-M, (T, d, d))  # block (t+1, t)
    return diag, lower


# ---------------------------------------------------------------------------
# Loss


def _as_matrices(models) -> np.ndarray:
    if isinstance(models, TransitionModel):
        return models.matrices
    return np.asarray(models, dtype=float)


def _as_z(z) -> np.ndarray:
    if isinstance(z, ExogenousSeries):
        return z.z
    return np.asarray(z, dtype=float)


def loss(models, z, dataset: ExperimentDataset, lambda_z: float = 0.0, lambda_m: float = 0.0,
         ridge: float = 0.0, form: str = "sum") -> float:
    """Regularized reconstruction loss.

    ``form="sum"`` loops over transitions; ``form="operator"`` evaluates
    ``sum_j ||A_i (o_j - z)||^2`` with the dense block operator. Both compute the
    same quantity. ``ridge`` adds ``ridge * sum_i ||M_i||_F^2`` (the Gram fallback
    used by :func:`solve_transitions`).
    """
    mats = _as_matrices(models)
    zz = _as_z(z)
    T, d = dataset.T, dataset.d
    if zz.shape != (T + 1, d) or mats.shape != (dataset.k, d, d):
        raise ValueError("model/exogenous dimensions do not match the dataset")
    total = 0.0
    for i in range(dataset.k):
        x = dataset.group(i) - zz
        if form == "sum":
            for t in range(T):
                r = x[:, t + 1, :] - x[:, t, :] @ mats[i].T
                total += float(np.sum(r * r))
        elif form == "operator":
            A = build_transition_operator(mats[i], T)
            r = x.reshape(x.shape[0], -1) @ A.T
            total += float(np.sum(r * r))
        else:
            raise ValueError(f"unknown loss form {form!r}")
    eye = np.eye(d)
    total += lambda_z * float(np.sum(zz * zz))
    total += lambda_m * float(sum(np.sum((m - eye) ** 2) for m in mats))
    total += ridge * float(np.sum(mats * mats))
    return total


# ---------------------------------------------------------------------------
# Sufficient statistics


class _GroupStats:
    """Per-group centered moments; updates and loss cost O(k T d^3), independent of n."""

    def __init__(self, dataset: ExperimentDataset, t_start: int = 0):
        self.k, self.T, self.d = dataset.k, dataset.T, dataset.d
        self.t_start = t_start
        self.sizes = dataset.group_sizes.astype(float)
        self.means = np.empty((self.k, self.T + 1, self.d))
        self.qsum = np.empty((self.k, self.d, self.d))    # sum_{t>=t_start, t<T} sum_j dev_t dev_t^T
        self.csum = np.empty((self.k, self.d, self.d))    # sum_{t>=t_start, t<T} sum_j dev_{t+1} dev_t^T
        self.qnext = np.empty((self.k, self.d, self.d))   # sum_{t=1..T} sum_j dev_t dev_t^T (loss only)
        self.q0 = np.empty((self.k, self.d, self.d))      # same as qsum with t_start=0
        self.c0 = np.empty((self.k, self.d, self.d))
        for i in range(self.k):
            obs = dataset.group(i)
            mean = obs.mean(axis=0)
            dev = obs - mean
            self.means[i] = mean
            x0 = dev[:, :-1, :]
            x1 = dev[:, 1:, :]
            q = np.einsum("jta,jtb->tab", x0, x0)
            c = np.einsum("jta,jtb->tab", x1, x0)
            self.q0[i] = q.sum(axis=0)
            self.c0[i] = c.sum(axis=0)
            self.qsum[i] = q[t_start:].sum(axis=0)
            self.csum[i] = c[t_start:].sum(axis=0)
            self.qnext[i] = np.einsum("jta,jtb->ab", x1, x1)
        self.weighted_means = self.sizes[:, None, None] * self.means

    def solve_m(self, z: np.ndarray, lambda_m: float, ridge: float) -> tuple[np.ndarray, list[float]]:
        mats = np.empty((self.k, self.d, self.d))
        conds = []
        ts = self.t_start
        for i in range(self.k):
            e = self.means[i] - z
            e0, e1 = e[ts:-1], e[ts + 1:]
            gram = self.qsum[i] + self.sizes[i] * (e0.T @ e0)
            cross = self.csum[i] + self.sizes[i] * (e1.T @ e0)
            m, cond = regularized_transition(cross, gram, lambda_m, ridge,
                                             what=f"Gram matrix of policy {i}")
            mats[i] = m
            conds.append(cond)
        return mats, conds

    def loss(self, mats: np.ndarray, z: np.ndarray, lambda_z: float, lambda_m: float, ridge: float) -> float:
        total = 0.0
        for i in range(self.k):
            m = mats[i]
            centered = np.trace(self.qnext[i]) - 2.0 * np.sum(m * self.c0[i]) + np.sum((m @ self.q0[i]) * m)
            r = apply_transition_operator(m, self.means[i] - z)
            total += centered + self.sizes[i] * float(np.sum(r * r))
        eye = np.eye(self.d)
        total += lambda_z * float(np.sum(z * z))
        total += lambda_m * float(np.sum((mats - eye) ** 2))
        total += ridge * float(np.sum(mats * mats))
        return float(total)

    def rhs(self, mats: np.ndarray) -> np.ndarray:
        b = np.zeros((self.T + 1, self.d))
        for i in range(self.k):
            b += apply_transition_adjoint(mats[i], apply_transition_operator(mats[i], self.weighted_means[i]))
        return b

    def apply_system(self, mats: np.ndarray, z: np.ndarray, lambda_z: float) -> np.ndarray:
        out = lambda_z * z
        for i in range(self.k):
            out = out + self.sizes[i] * apply_transition_adjoint(mats[i], apply_transition_operator(mats[i], z))
        return out

    def within_group_transitions(self, lambda_m: float, ridge: float) -> np.ndarray | None:
        """Transition fit from deviations about each group's mean trajectory.

        A sequence shared by all members of a group cancels in these
        deviations, so the fit ignores ``z`` entirely. Returns ``None`` when a
        group has too few members to determine its matrix.
        """
        mats = np.empty((self.k, self.d, self.d))
        for i in range(self.k):
            try:
                mats[i], _ = regularized_transition(self.csum[i], self.qsum[i], lambda_m, ridge)
            except SingularMatrixError:
                return None
        return mats

    def damped_step(self, mats: np.ndarray, z: np.ndarray, lambda_z: float, lambda_m: float,
                    ridge: float, mu: float) -> tuple[np.ndarray, np.ndarray, float]:
        """Levenberg-Marquardt step on the joint ``(M, z)`` least-squares problem.

        Each ``M_i`` enters the Gauss-Newton normal equations through a
        ``d x d`` Gram matrix, so the matrix unknowns are eliminated in closed
        form and only a ``d(T+1)`` system in ``z`` is solved. Returns the step
        ``(dM, dz)`` and the decrease predicted by the damped linear model.
        Requires ``t_start == 0``.
        """
        T, d = self.T, self.d
        N = d * (T + 1)
        eye = np.eye(d)
        hess = _dense_system(mats, self.sizes, T, lambda_z + mu)
        grad_z = lambda_z * z
        rhs_z = np.zeros((T + 1, d))
        parts = []
        for i in range(self.k):
            m, n_i = mats[i], self.sizes[i]
            e = self.means[i] - z
            e0 = e[:-1]
            resid = apply_transition_operator(m, e)
            gram = self.q0[i] + n_i * (e0.T @ e0)
            g_m = (m @ self.q0[i] - self.c0[i] - n_i * (resid.T @ e0)
                   + lambda_m * (m - eye) + ridge * m)
            damped = gram + (lambda_m + ridge + mu) * eye
            inv = linalg.inv(damped)
            inv = 0.5 * (inv + inv.T)
            grad_z -= n_i * apply_transition_adjoint(m, resid)
            # coupling: dM_i <- -(g_m + n_i P_i(dz)) damped^{-1}, P_i(dz) = sum_t (A_i dz)_t e_t^T
            rhs_z += n_i * apply_transition_adjoint(m, e0 @ (g_m @ inv).T)
            coup = np.zeros((d, d, T + 1, d))
            coup[:, :, 1:, :] += np.einsum("ac,tb->abtc", eye, e0)
            coup[:, :, :-1, :] -= np.einsum("ac,tb->abtc", m, e0)
            coup = coup.reshape(d, d, N)
            hess -= n_i**2 * np.einsum("abn,bc,acm->nm", coup, inv, coup, optimize=True)
            parts.append((g_m, inv, e0))
        hess = 0.5 * (hess + hess.T)
        rhs = (rhs_z - grad_z).ravel()
        try:
            dz = linalg.cho_solve(linalg.cho_factor(hess), rhs).reshape(T + 1, d)
        except linalg.LinAlgError:
            dz = linalg.lstsq(hess, rhs)[0].reshape(T + 1, d)
        dm = np.empty_like(mats)
        for i, (g_m, inv, e0) in enumerate(parts):
            coupled = apply_transition_operator(mats[i], dz).T @ e0
            dm[i] = -(g_m + self.sizes[i] * coupled) @ inv
        g_dot = float(np.sum(grad_z * dz)) + sum(float(np.sum(p[0] * dm[i])) for i, p in enumerate(parts))
        step_sq = float(np.sum(dz * dz) + np.sum(dm * dm))
        return dm, dz, mu * step_sq - g_dot

# ---------------------------------------------------------------------------
# z update


def exogenous_normal_equations(models, dataset: ExperimentDataset, lambda_z: float) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``(lambda_z I + sum_i n_i G_i, sum_i sum_j G_i o_j)`` with ``G_i = A_i^T A_i``.

    Unknowns are stacked time-major: ``z_0, z_1, .., z_T``.
    """
    mats = _as_matrices(models)
    stats = _GroupStats(dataset)
    return _dense_system(mats, stats.sizes, dataset.T, lambda_z), stats.rhs(mats).ravel()


def _dense_system(mats, sizes, T, lambda_z) -> np.ndarray:
    d = mats.shape[1]
    N = d * (T + 1)
    lam = lambda_z * np.eye(N)
    for m, n_i in zip(mats, sizes):
        diag, lower = _gram_blocks(m, T)
        for t in range(T + 1):
            lam[t * d:(t + 1) * d, t * d:(t + 1) * d] += n_i * diag[t]
        for t in range(T):
            blk = n_i * lower[t]
            lam[(t + 1) * d:(t + 2) * d, t * d:(t + 1) * d] += blk
            lam[t * d:(t + 1) * d, (t + 1) * d:(t + 2) * d] += blk.T
    return lam


def _banded_system(mats, sizes, T, lambda_z) -> np.ndarray:
    """Lower banded storage (``solveh_banded`` layout) of the block tridiagonal system."""
    d = mats.shape[1]
    N = d * (T + 1)
    lam = _dense_system_band_blocks(mats, sizes, T, lambda_z)
    ab = np.zeros((2 * d, N))
    diag_blocks, low_blocks = lam
    for t in range(T + 1):
        blk = diag_blocks[t]
        for a in range(d):
            for b in range(a + 1):
                ab[a - b, t * d + b] = blk[a, b]
    for t in range(T):
        blk = low_blocks[t]  # rows of block t+1, columns of block t
        for a in range(d):
            for b in range(d):
                ab[d + a - b, t * d + b] = blk[a, b]
    return ab


def _dense_system_band_blocks(mats, sizes, T, lambda_z):
    d = mats.shape[1]
    diag = np.broadcast_to(lambda_z * np.eye(d), (T + 1, d, d)).copy()
    low = np.zeros((T, d, d))
    for m, n_i in zip(mats, sizes):
        dg, lw = _gram_blocks(m, T)
        diag += n_i * dg
        low += n_i * lw
    return diag, low


def _eig_bound(mats, sizes, lambda_z) -> float:
    return lambda_z + float(sum(n_i * (1.0 + spectral_norm(m)) ** 2 for m, n_i in zip(mats, sizes)))


_Z_HINT = "set lambda_z > 0 (z is not identified along this direction)"


def _solve_z(mats: np.ndarray, stats: _GroupStats, lambda_z: float) -> tuple[np.ndarray, float]:
    """Exact z minimizer for fixed matrices; returns ``(z, rcond)``."""
    T, d = stats.T, stats.d
    N = d * (T + 1)
    b = stats.rhs(mats).ravel()
    bound = _eig_bound(mats, stats.sizes, lambda_z)
    certified = lambda_z > 0 and lambda_z / bound >= RCOND_MIN
    if N <= DENSE_LIMIT:
        system = _dense_system(mats, stats.sizes, T, lambda_z)
        if certified:
            rcond = lambda_z / bound
        else:
            w, v = np.linalg.eigh(system)
            rcond = max(w[0], 0.0) / w[-1] if w[-1] > 0 else 0.0
            if rcond < RCOND_MIN:
                raise SingularMatrixError(
                    f"exogenous system is singular (reciprocal condition {rcond:.3e}); {_Z_HINT}",
                    rcond=rcond, direction=v[:, 0])
        try:
            z = linalg.cho_solve(linalg.cho_factor(system, lower=True), b)
        except linalg.LinAlgError as exc:
            raise SingularMatrixError(f"exogenous system is not positive definite; {_Z_HINT}", rcond=0.0) from exc
    else:
        ab = _banded_system(mats, stats.sizes, T, lambda_z)
        if certified:
            rcond = lambda_z / bound
        else:
            lo = linalg.eigvals_banded(ab, lower=True, select="i", select_range=(0, 0))[0]
            hi = linalg.eigvals_banded(ab, lower=True, select="i", select_range=(N - 1, N - 1))[0]
            rcond = max(lo, 0.0) / hi if hi > 0 else 0.0
            if rcond < RCOND_MIN:
                raise SingularMatrixError(
                    f"exogenous system is singular (reciprocal condition {rcond:.3e}); {_Z_HINT}", rcond=rcond)
        try:
            z = linalg.solveh_banded(ab, b, lower=True)
        except linalg.LinAlgError as exc:
            raise SingularMatrixError(f"exogenous system is not positive definite; {_Z_HINT}", rcond=0.0) from exc
    return z.reshape(T + 1, d), rcond


def solve_exogenous(models, dataset: ExperimentDataset, lambda_z: float) -> ExogenousSeries:
    """Closed-form minimizer of :func:`loss` over ``z`` with the matrices held fixed.

    Solves ``(lambda_z I + sum_i n_i G_i) z = sum_i sum_j G_i o_j`` by Cholesky.

    Raises
    ------
    SingularMatrixError
        When the system's reciprocal condition number is below 1e-12, e.g.
        ``lambda_z = 0`` with identical dynamics in every group.
    """
    if lambda_z < 0:
        raise ValueError("lambda_z must be >= 0")
    mats = _as_matrices(models)
    z, _ = _solve_z(mats, _GroupStats(dataset), lambda_z)
    return ExogenousSeries(z)


def solve_transitions(z, dataset: ExperimentDataset, lambda_m: float = 0.0, ridge: float = 0.0,
                      t_start: int = 0) -> np.ndarray:
    """Per-policy minimizer of :func:`loss` over ``M_i`` with ``z`` held fixed.

    Returns an array of shape ``(k, d, d)``. With ``z = 0`` and no
    regularization this is the stationary OLS fit.
    """
    stats = _GroupStats(dataset, t_start)
    mats, _ = stats.solve_m(_as_z(z), lambda_m, ridge)
    return mats


# ---------------------------------------------------------------------------
# Evaluation


def value_nonstationary(models, exogenous, dataset: ExperimentDataset, theta: RewardModel, policy: int,
                        gamma: float | None = None) -> float:
    """``theta^T (I - gamma M_i)^{-1} (mean o_0 of group i - z_0)``.

    The contribution of the exogenous sequence itself is excluded; it is common
    to all groups and cancels in effects. ``gamma`` defaults to the model's.
    """
    if gamma is None:
        if not isinstance(models, TransitionModel):
            raise ValueError("gamma is required when models is a bare array")
        gamma = models.gamma
    mats = _as_matrices(models)
    theta.check_dim(dataset.d)
    start = mean_initial_observation(dataset, policy) - _as_z(exogenous)[0]
    return discounted_value(mats[policy], gamma, theta.theta, start, policy=policy,
                            model=models if isinstance(models, TransitionModel) else None)


def _z0_sensitivity(mats: np.ndarray, gamma: float, theta: np.ndarray) -> list[float]:
    """Norm of d(effect_i)/d(z_0) for each treatment."""
    d = mats.shape[1]
    betas = [linalg.solve((np.eye(d) - gamma * m).T, theta) for m in mats]
    return [float(np.linalg.norm(betas[i] - betas[0])) for i in range(1, len(mats))]


# ---------------------------------------------------------------------------
# Alternating minimization


_MAX_DAMPING_TRIALS = 12


@dataclass
class _Minimum:
    mats: np.ndarray
    z: np.ndarray
    trace: list
    iterations: int
    converged: bool
    conds: list
    rcond: float


def _minimize(stats: _GroupStats, cfg: NonstationaryConfig, lam_z: float,
              initial_z: np.ndarray | None = None) -> _Minimum:
    T, d = stats.T, stats.d
    lam_m, ridge = cfg.lambda_m, cfg.ridge

    def m_step(z, it):
        try:
            return stats.solve_m(z, lam_m, ridge)
        except SingularMatrixError as exc:
            raise SingularMatrixError(f"iteration {it}: {exc}", exc.rcond, exc.direction) from exc

    def z_step(mats, it):
        try:
            return _solve_z(mats, stats, lam_z)
        except SingularMatrixError as exc:
            raise SingularMatrixError(f"iteration {it}: {exc}", exc.rcond, exc.direction) from exc

    def objective(mats, z):
        return stats.loss(mats, z, lam_z, lam_m, ridge)

    z = np.zeros((T + 1, d)) if initial_z is None else _as_z(initial_z).copy()
    mats, conds = m_step(z, 1)
    trace = [objective(mats, z)]
    z, rcond = z_step(mats, 1)
    trace.append(objective(mats, z))
    iterations = 1
    converged = False
    tiny = np.finfo(float).tiny
    streak = 0

    def small(prev, new):
        nonlocal streak
        streak = streak + 1 if (prev - new) / max(new, tiny) < cfg.tol else 0
        return streak >= cfg.patience

    mu, nu = None, 2.0
    while iterations < cfg.max_iters:
        it = iterations + 1
        if small(trace[-2], trace[-1]):
            converged = True
            break
        cand_mats, cand_z, cand_val = mats, z, trace[-1]
        if cfg.accelerate and cfg.t_start == 0:
            if mu is None:
                mu = 1e-3 * float(np.mean(np.trace(stats.q0, axis1=1, axis2=2))) / d
            for _ in range(_MAX_DAMPING_TRIALS):
                dm, dz, predicted = stats.damped_step(mats, z, lam_z, lam_m, ridge, mu)
                trial_val = objective(mats + dm, z + dz)
                gain = (trace[-1] - trial_val) / predicted if predicted > 0 else -1.0
                if gain > 0:
                    cand_mats, cand_z, cand_val = mats + dm, z + dz, trial_val
                    mu *= max(1.0 / 3.0, 1.0 - (2.0 * gain - 1.0) ** 3)
                    nu = 2.0
                    break
                mu *= nu
                nu *= 2.0
        if it == 2 and cfg.accelerate:
            # the within-group fit is unaffected by the offset, so it lands in the right basin
            start = stats.within_group_transitions(lam_m, ridge)
            if start is not None:
                try:
                    start_z, _ = _solve_z(start, stats, lam_z)
                except SingularMatrixError:
                    start_z = None
                if start_z is not None:
                    start_val = objective(start, start_z)
                    if start_val < cand_val:
                        cand_mats, cand_z, cand_val = start, start_z, start_val
        # exact block sweep from the candidate; kept only if it does not raise the loss
        new_mats, _ = m_step(cand_z, it)
        new_z, _ = z_step(new_mats, it)
        val = objective(new_mats, new_z)
        if val > cand_val:
            new_mats, new_z, val = cand_mats, cand_z, cand_val
        if val >= trace[-1]:
            converged = True
            break
        mats, z = new_mats, new_z
        iterations = it
        trace.append(val)

    conds = m_step(z, iterations)[1]
    rcond = z_step(mats, iterations)[1]
    return _Minimum(mats, z, trace, iterations, converged, conds, rcond)


def alternate_minimize(dataset: ExperimentDataset, theta: RewardModel,
                       config: NonstationaryConfig | None = None,
                       initial_z: np.ndarray | None = None) -> FitReport:
    """Fit ``(M_i, z)`` by alternating exact block minimization and report effects.

    Starts from ``z = 0``, so the first ``M`` update is the stationary fit.
    Iteration 1 is always an exact (M, z) sweep. Every later iteration ends
    with such a sweep too; with ``config.accelerate`` it is preceded by a
    damped Gauss-Newton (Levenberg-Marquardt) step on all unknowns jointly,
    which crosses the flat valleys where plain alternation crawls. Iteration
    stops after ``patience`` consecutive iterations with
    ``(L_{k-1} - L_k) / L_k < tol``, when no step lowers the loss, or after
    ``max_iters`` iterations. The loss trace is nonincreasing.

    Raises
    ------
    EstimationError
        ``k < 2``.
    SingularMatrixError
        A block subproblem is singular; the message names the iteration.
    DivergenceError
        A fitted ``gamma M_i`` has spectral radius >= 1; ``exc.model`` holds the fit.
    """
    cfg = config or NonstationaryConfig()
    if dataset.k < 2:
        raise EstimationError("need a control group and at least one treatment group (k >= 2)")
    theta.check_dim(dataset.d)
    lam_z = cfg.resolve_lambda_z(dataset)
    stats = _GroupStats(dataset, cfg.t_start)
    fit = _minimize(stats, cfg, lam_z, initial_z)
    mats, z = fit.mats, fit.z

    model = TransitionModel(mats, cfg.gamma)
    diagnostics = {
        "lambda_z": lam_z,
        "lambda_m": cfg.lambda_m,
        "ridge": cfg.ridge,
        "t_start": cfg.t_start,
        "gram_condition": fit.conds,
        "exogenous_rcond_lower_bound": fit.rcond,
        "spectral_radius_gamma_m": [spectral_radius(cfg.gamma * m) for m in mats],
        "spectral_norm_gamma_m": [spectral_norm(cfg.gamma * m) for m in mats],
        "z_regularization_dependent": True,
        "effect_z0_sensitivity": _z0_sensitivity(mats, cfg.gamma, theta.theta),
    }
    try:
        values = np.array([
            value_nonstationary(model, ExogenousSeries(z), dataset, theta, i) for i in range(dataset.k)
        ])
    except DivergenceError as exc:
        nan = np.full(dataset.k, np.nan)
        exc.report = FitReport("nonstationary", cfg.gamma, mats, z, fit.trace, fit.iterations, fit.converged,
                               nan, nan[1:], {**diagnostics, "error": str(exc)})
        raise
    return FitReport(
        method="nonstationary",
        gamma=cfg.gamma,
        matrices=mats,
        z=z,
        loss_trace=fit.trace,
        iterations=fit.iterations,
        converged=fit.converged,
        values=values,
        effects=values[1:] - values[0],
        diagnostics=diagnostics,
    )


def estimate_effects_nonstationary(dataset: ExperimentDataset, theta: RewardModel,
                                   config: NonstationaryConfig | None = None) -> np.ndarray:
    return alternate_minimize(dataset, theta, config).effects

