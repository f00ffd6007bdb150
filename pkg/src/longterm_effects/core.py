"""Domain types, CSV ingestion and reward-coefficient estimation.

Dataset CSV layout::

    individual_id,policy_id,t,f0,f1,...,f{d-1}[,r]

One row per (individual, step), ``t`` running over ``0..T`` for every
individual. The optional ``r`` column carries the observed per-step reward.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence, Union

import numpy as np

PathOrStream = Union[str, os.PathLike, bytes, IO]

#: Reciprocal condition number below which a Gram matrix is treated as singular.
RCOND_MIN = 1e-12


class DatasetError(ValueError):
    """Malformed or inconsistent experiment data.

    ``row`` is the 1-based CSV line number (header is line 1) when the problem
    can be pinned to a line, otherwise ``None``.
    """

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class EstimationError(RuntimeError):
    """Base class for failures inside an estimator."""


class SingularMatrixError(EstimationError):
    """A linear system was too ill-conditioned to solve reliably.

    Attributes
    ----------
    rcond : float
        Reciprocal condition number of the offending matrix.
    direction : ndarray or None
        Unit eigenvector of the smallest eigenvalue (the near-null direction).
    """

    def __init__(self, message: str, rcond: float, direction: np.ndarray | None = None):
        self.rcond = rcond
        self.direction = direction
        super().__init__(message)


class DivergenceError(EstimationError):
    """The discounted value series does not converge (rho(gamma M) >= 1)."""

    def __init__(self, message: str, radius: float, model=None, policy: int | None = None):
        self.radius = radius
        self.model = model
        self.policy = policy
        super().__init__(message)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def symmetric_rcond(gram: np.ndarray) -> tuple[float, np.ndarray]:
    """Reciprocal condition number of a symmetric PSD matrix and its weakest direction."""
    w, v = np.linalg.eigh(gram)
    top = w[-1]
    if top <= 0:
        return 0.0, v[:, 0]
    return max(w[0], 0.0) / top, v[:, 0]


def check_gram(gram: np.ndarray, what: str, hint: str = "") -> float:
    """Raise :class:`SingularMatrixError` if ``gram`` is numerically singular.

    Returns the condition number (>= 1) on success.
    """
    rcond, direction = symmetric_rcond(gram)
    if not np.isfinite(rcond) or rcond < RCOND_MIN:
        msg = (
            f"{what} is singular (reciprocal condition {rcond:.3e} < {RCOND_MIN:g}); "
            f"near-null direction {np.array2string(direction, precision=4)}"
        )
        if hint:
            msg += f"; {hint}"
        raise SingularMatrixError(msg, rcond=rcond, direction=direction)
    return 1.0 / rcond


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class ObservationTrajectory:
    """One individual's in-experiment observations ``o_0..o_T``."""

    individual_id: str
    policy_id: int
    observations: np.ndarray
    rewards: np.ndarray | None = None

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=float)
        if obs.ndim != 2 or obs.shape[1] < 1:
            raise DatasetError(f"individual {self.individual_id}: observations must be (T+1, d) with d >= 1")
        if obs.shape[0] < 2:
            raise DatasetError(f"individual {self.individual_id}: need T >= 1 (at least two steps)")
        object.__setattr__(self, "observations", _frozen(obs))
        if self.rewards is not None:
            r = np.asarray(self.rewards, dtype=float)
            if r.shape != (obs.shape[0],):
                raise DatasetError(f"individual {self.individual_id}: rewards length {r.shape} != T+1={obs.shape[0]}")
            object.__setattr__(self, "rewards", _frozen(r))

    @property
    def T(self) -> int:
        return self.observations.shape[0] - 1

    @property
    def d(self) -> int:
        return self.observations.shape[1]


@dataclass(frozen=True)
class ExperimentDataset:
    """Trajectories of ``n`` individuals split across ``k`` policy groups.

    Stored column-wise: ``observations`` has shape ``(n, T+1, d)``, ``policies``
    shape ``(n,)``. Group 0 is the control. Arrays are read-only.
    """

    observations: np.ndarray
    policies: np.ndarray
    individual_ids: tuple[str, ...]
    k: int
    rewards: np.ndarray | None = None

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=float)
        if obs.ndim != 3:
            raise DatasetError(f"observations must have shape (n, T+1, d), got {obs.shape}")
        n, steps, d = obs.shape
        if d < 1:
            raise DatasetError("dimension d must be >= 1")
        if steps < 2:
            raise DatasetError("horizon T must be >= 1")
        if not np.all(np.isfinite(obs)):
            raise DatasetError("observations contain non-finite values")
        pol = np.asarray(self.policies)
        if pol.shape != (n,) or (n and not np.issubdtype(pol.dtype, np.integer)):
            raise DatasetError("policies must be an integer vector of length n")
        k = int(self.k)
        if k < 1:
            raise DatasetError("k must be >= 1")
        if n and (pol.min() < 0 or pol.max() >= k):
            raise DatasetError(f"policy_id out of range [0, {k})")
        counts = np.bincount(pol.astype(np.int64), minlength=k)
        missing = [i for i in range(k) if counts[i] == 0]
        if missing:
            raise DatasetError(f"policy groups without individuals: {missing}")
        ids = tuple(str(x) for x in self.individual_ids)
        if len(ids) != n:
            raise DatasetError("individual_ids length must equal n")
        if len(set(ids)) != n:
            raise DatasetError("individual_id values must be unique")
        object.__setattr__(self, "observations", _frozen(obs))
        p = np.array(pol, dtype=np.int64)
        p.setflags(write=False)
        object.__setattr__(self, "policies", p)
        object.__setattr__(self, "individual_ids", ids)
        object.__setattr__(self, "k", k)
        if self.rewards is not None:
            r = np.asarray(self.rewards, dtype=float)
            if r.shape != (n, steps):
                raise DatasetError(f"rewards must have shape {(n, steps)}, got {r.shape}")
            if not np.all(np.isfinite(r)):
                raise DatasetError("rewards contain non-finite values")
            object.__setattr__(self, "rewards", _frozen(r))

    @classmethod
    def from_trajectories(cls, trajectories: Iterable[ObservationTrajectory], k: int | None = None):
        trajs = list(trajectories)
        if not trajs:
            raise DatasetError("dataset has no trajectories")
        shapes = {tr.observations.shape for tr in trajs}
        if len(shapes) != 1:
            raise DatasetError(f"trajectories disagree on (T+1, d): {sorted(shapes)}")
        has_r = [tr.rewards is not None for tr in trajs]
        if any(has_r) and not all(has_r):
            raise DatasetError("rewards must be present on all trajectories or none")
        pol = np.array([tr.policy_id for tr in trajs], dtype=np.int64)
        if k is None:
            k = int(pol.max()) + 1
        return cls(
            observations=np.stack([tr.observations for tr in trajs]),
            policies=pol,
            individual_ids=tuple(tr.individual_id for tr in trajs),
            k=k,
            rewards=np.stack([tr.rewards for tr in trajs]) if all(has_r) else None,
        )

    @property
    def n(self) -> int:
        return self.observations.shape[0]

    @property
    def T(self) -> int:
        return self.observations.shape[1] - 1

    @property
    def d(self) -> int:
        return self.observations.shape[2]

    @property
    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.policies, minlength=self.k)

    def group(self, policy: int) -> np.ndarray:
        """Observations of policy group ``policy``, shape ``(n_i, T+1, d)``."""
        return self.observations[self.policies == policy]

    @property
    def trajectories(self) -> list[ObservationTrajectory]:
        return [
            ObservationTrajectory(
                individual_id=self.individual_ids[j],
                policy_id=int(self.policies[j]),
                observations=self.observations[j],
                rewards=None if self.rewards is None else self.rewards[j],
            )
            for j in range(self.n)
        ]

    def validate(self) -> "ExperimentDataset":
        """Re-run validation; returns an equal dataset."""
        return ExperimentDataset(self.observations, self.policies, self.individual_ids, self.k, self.rewards)

    def with_observations(self, observations: np.ndarray) -> "ExperimentDataset":
        return ExperimentDataset(observations, self.policies, self.individual_ids, self.k, self.rewards)

    def __eq__(self, other):
        if not isinstance(other, ExperimentDataset):
            return NotImplemented
        if (self.rewards is None) != (other.rewards is None):
            return False
        return (
            self.k == other.k
            and self.individual_ids == other.individual_ids
            and np.array_equal(self.policies, other.policies)
            and np.array_equal(self.observations, other.observations)
            and (self.rewards is None or np.array_equal(self.rewards, other.rewards))
        )

    __hash__ = None


@dataclass(frozen=True)
class RewardModel:
    """Linear reward ``r(o) = theta . o``."""

    theta: np.ndarray
    residual_rms: float | None = field(default=None, compare=False)

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=float)
        if th.ndim != 1 or th.size < 1:
            raise ValueError("theta must be a non-empty vector")
        if not np.all(np.isfinite(th)):
            raise ValueError("theta has non-finite entries")
        object.__setattr__(self, "theta", _frozen(th))

    @property
    def d(self) -> int:
        return self.theta.size

    def __eq__(self, other):
        if not isinstance(other, RewardModel):
            return NotImplemented
        return np.array_equal(self.theta, other.theta)

    __hash__ = None

    @classmethod
    def one_hot(cls, d: int, index: int) -> "RewardModel":
        if not 0 <= index < d:
            raise ValueError(f"reward feature {index} out of range for d={d}")
        theta = np.zeros(d)
        theta[index] = 1.0
        return cls(theta)

    def check_dim(self, d: int) -> None:
        if self.d != d:
            raise ValueError(f"reward coefficients have dimension {self.d}, data has d={d}")

    def to_json(self) -> str:
        return json.dumps({"theta": [float(x) for x in self.theta]})

    @classmethod
    def from_json(cls, text: str) -> "RewardModel":
        obj = json.loads(text)
        if not isinstance(obj, dict) or "theta" not in obj:
            raise ValueError('reward file must be a JSON object {"theta": [...]}')
        return cls(np.asarray(obj["theta"], dtype=float))

    @classmethod
    def load(cls, path) -> "RewardModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


@dataclass(frozen=True)
class TransitionModel:
    """Per-policy transition matrices ``M_0..M_{k-1}`` and the discount."""

    matrices: np.ndarray
    gamma: float

    def __post_init__(self):
        m = np.asarray(self.matrices, dtype=float)
        if m.ndim != 3 or m.shape[1] != m.shape[2]:
            raise ValueError(f"matrices must have shape (k, d, d), got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("transition matrices have non-finite entries")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        object.__setattr__(self, "matrices", _frozen(m))
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def k(self) -> int:
        return self.matrices.shape[0]

    @property
    def d(self) -> int:
        return self.matrices.shape[1]

    def __getitem__(self, i: int) -> np.ndarray:
        return self.matrices[i]


# ---------------------------------------------------------------------------
# CSV I/O


def _open_text(source: PathOrStream):
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8")), True
    if isinstance(source, (str, os.PathLike)):
        return open(source, newline="", encoding="utf-8"), True
    if isinstance(source, io.TextIOBase):
        return source, False
    # binary stream
    return io.TextIOWrapper(source, encoding="utf-8", newline=""), False


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise DatasetError(f"non-numeric value {cell!r} in column {col}", row) from None
    if not math.isfinite(value):
        raise DatasetError(f"non-finite value {cell!r} in column {col}", row)
    return value


def _parse_int(cell: str, row: int, col: str) -> int:
    try:
        return int(cell)
    except ValueError:
        raise DatasetError(f"non-integer value {cell!r} in column {col}", row) from None


def _parse_header(header: Sequence[str]) -> tuple[int, bool]:
    header = [h.strip() for h in header]
    if header[:3] != ["individual_id", "policy_id", "t"]:
        raise DatasetError("header must start with individual_id,policy_id,t", 1)
    rest = header[3:]
    has_r = bool(rest) and rest[-1] == "r"
    feats = rest[:-1] if has_r else rest
    if not feats:
        raise DatasetError("no feature columns (expected f0..f{d-1})", 1)
    for i, name in enumerate(feats):
        if name != f"f{i}":
            raise DatasetError(f"expected feature column f{i}, found {name!r}", 1)
    return len(feats), has_r


def load_dataset(source: PathOrStream, k: int | None = None) -> ExperimentDataset:
    """Parse and validate a dataset CSV.

    Parameters
    ----------
    source : path, bytes, or file object
        CSV text in the layout described in the module docstring.
    k : int, optional
        Number of policy groups. Inferred as ``max(policy_id) + 1`` when omitted.

    Raises
    ------
    DatasetError
        On any schema or consistency violation, with the offending line number
        where one exists.
    """
    fh, owned = _open_text(source)
    try:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError("empty CSV") from None
        d, has_r = _parse_header(header)
        width = 3 + d + int(has_r)

        # individual -> (policy, first row, {t: (row, features, reward)})
        individuals: dict[str, tuple[int, int, dict]] = {}
        for row_no, cells in enumerate(reader, start=2):
            if not cells or (len(cells) == 1 and not cells[0].strip()):
                continue
            if len(cells) != width:
                raise DatasetError(f"expected {width} columns, found {len(cells)}", row_no)
            ind = cells[0].strip()
            if not ind:
                raise DatasetError("empty individual_id", row_no)
            pol = _parse_int(cells[1], row_no, "policy_id")
            if pol < 0 or (k is not None and pol >= k):
                raise DatasetError(f"policy_id {pol} out of range", row_no)
            t = _parse_int(cells[2], row_no, "t")
            if t < 0:
                raise DatasetError(f"negative time index {t}", row_no)
            feats = [_parse_float(cells[3 + i], row_no, f"f{i}") for i in range(d)]
            rew = _parse_float(cells[-1], row_no, "r") if has_r else None
            if ind not in individuals:
                individuals[ind] = (pol, row_no, {})
            first_pol, first_row, steps = individuals[ind]
            if pol != first_pol:
                raise DatasetError(
                    f"individual {ind} has policy_id {pol} but row {first_row} says {first_pol}", row_no
                )
            if t in steps:
                raise DatasetError(f"duplicate row for individual {ind} at t={t} (first at row {steps[t][0]})", row_no)
            steps[t] = (row_no, feats, rew)
    finally:
        if owned:
            fh.close()

    if not individuals:
        raise DatasetError("CSV has no data rows")

    horizon = None
    ids, pols, obs, rews = [], [], [], []
    for ind, (pol, first_row, steps) in individuals.items():
        T_i = max(steps)
        missing = sorted(set(range(T_i + 1)) - set(steps))
        if missing:
            raise DatasetError(f"individual {ind}: gap in time index (missing t={missing[0]})", first_row)
        if horizon is None:
            horizon = T_i
        elif T_i != horizon:
            raise DatasetError(f"individual {ind}: horizon T={T_i} differs from T={horizon}", first_row)
        ids.append(ind)
        pols.append(pol)
        obs.append([steps[t][1] for t in range(T_i + 1)])
        if has_r:
            rews.append([steps[t][2] for t in range(T_i + 1)])
    if horizon < 1:
        raise DatasetError("horizon T must be >= 1 (need t=0 and t=1)")
    if k is None:
        k = max(pols) + 1
    return ExperimentDataset(
        observations=np.asarray(obs, dtype=float),
        policies=np.asarray(pols, dtype=np.int64),
        individual_ids=tuple(ids),
        k=k,
        rewards=np.asarray(rews, dtype=float) if has_r else None,
    )


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dataset_to_csv(dataset: ExperimentDataset) -> str:
    buf = io.StringIO()
    header = ["individual_id", "policy_id", "t"] + [f"f{i}" for i in range(dataset.d)]
    if dataset.rewards is not None:
        header.append("r")
    lines = [",".join(header)]
    for j in range(dataset.n):
        prefix = f"{dataset.individual_ids[j]},{int(dataset.policies[j])},"
        for t in range(dataset.T + 1):
            cells = [_fmt(x) for x in dataset.observations[j, t]]
            if dataset.rewards is not None:
                cells.append(_fmt(dataset.rewards[j, t]))
            lines.append(prefix + f"{t}," + ",".join(cells))
    buf.write("\n".join(lines) + "\n")
    return buf.getvalue()


def save_dataset(dataset: ExperimentDataset, target) -> None:
    """Write ``dataset`` as CSV with floats at 17 significant digits."""
    text = dataset_to_csv(dataset)
    if isinstance(target, (str, os.PathLike)):
        with open(target, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        target.write(text)


# ---------------------------------------------------------------------------
# Estimation helpers


def estimate_reward_coefficients(dataset: ExperimentDataset) -> RewardModel:
    """Least-squares fit of ``r_{j,t} ~ theta . o_{j,t}`` over every step.

    Raises
    ------
    DatasetError
        If the dataset has no reward column.
    SingularMatrixError
        If the observation Gram matrix has reciprocal condition below 1e-12.
    """
    if dataset.rewards is None:
        raise DatasetError("dataset has no reward column; supply theta explicitly")
    X = dataset.observations.reshape(-1, dataset.d)
    y = dataset.rewards.reshape(-1)
    gram = X.T @ X
    check_gram(gram, "observation Gram matrix", "reward is not identifiable along this direction")
    theta = np.linalg.solve(gram, X.T @ y)
    resid = y - X @ theta
    return RewardModel(theta, residual_rms=float(np.sqrt(np.mean(resid**2))))


def mean_initial_observation(dataset: ExperimentDataset, policy: int) -> np.ndarray:
    """Monte Carlo mean of ``o_{j,0}`` over the individuals assigned to ``policy``."""
    if not 0 <= policy < dataset.k:
        raise ValueError(f"policy {policy} out of range [0, {dataset.k})")
    return dataset.group(policy)[:, 0, :].mean(axis=0)
