"""Baselines, error metrics and replicated synthetic sweeps.

Cell seeds
----------
A sweep over ``values`` with ``reps`` replications gives cell
``(value_index, rep)`` the integer seed

    SeedSequence(master_seed, spawn_key=(value_index, rep)).generate_state(1)[0]

which then seeds :func:`synthetic.make_truth` and the simulation. Each cell can
be recomputed alone, and results do not depend on worker count or order.
"""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import linalg

from .core import EstimationError, ExperimentDataset, RewardModel, TransitionModel
from .nonstationary import (
    ExogenousSeries,
    NonstationaryConfig,
    _dense_system,
    estimate_effects_nonstationary,
    exogenous_normal_equations,
    value_nonstationary,
)
from .stationary import estimate_effects_stationary
from .synthetic import (
    default_theta,
    ground_truth_delta,
    make_truth,
    simulate_dataset,
)

METHODS = ("naive", "stationary", "nonstationary")
SWEEP_PARAMS = ("n", "T", "d", "alpha")
APE_FLOOR = 1e-12

RESULT_COLUMNS = ("param", "value", "rep", "method", "policy", "delta_hat", "delta_true",
                  "sq_err", "ape", "wall_ms", "seed", "error")
SUMMARY_COLUMNS = ("param", "value", "method", "rows", "failed", "log10_mse", "median_mse",
                   "median_ape", "ape_iqr")

DEFAULT_GRIDS = {
    "n": [50, 100, 200, 500, 1000, 2000, 5000],
    "T": [4, 6, 10, 20, 40],
    "d": [2, 4, 8, 16, 32],
    "alpha": [0.0, 0.5, 1.0, 2.0, 4.0],
}


class ConfigError(ValueError):
    pass


def naive_average_estimate(dataset: ExperimentDataset, theta: RewardModel, gamma: float,
                           scaled: bool = True) -> np.ndarray:
    """Difference of average per-step rewards ``theta . o`` against policy 0.

    With ``scaled`` the difference is divided by ``1 - gamma`` so it sits on
    the discounted-return scale of the other estimators.
    """
    theta.check_dim(dataset.d)
    rewards = dataset.observations @ theta.theta
    means = np.array([rewards[dataset.policies == i].mean() for i in range(dataset.k)])
    diff = means[1:] - means[0]
    return diff / (1.0 - gamma) if scaled else diff


def run_method(dataset: ExperimentDataset, method: str, theta: RewardModel, gamma: float,
               config: NonstationaryConfig | None = None, ridge: float = 0.0,
               naive_scaled: bool = True) -> np.ndarray:
    """Effects ``Delta_i``, ``i = 1..k-1``, from the named estimator."""
    if method == "naive":
        return naive_average_estimate(dataset, theta, gamma, scaled=naive_scaled)
    if method == "stationary":
        return estimate_effects_stationary(dataset, theta, gamma, ridge=ridge)
    if method == "nonstationary":
        cfg = replace(config or NonstationaryConfig(), gamma=gamma)
        return estimate_effects_nonstationary(dataset, theta, cfg)
    raise ConfigError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")


@dataclass(frozen=True)
class SweepConfig:
    """Synthetic environment and estimator settings shared by every cell.

    ``n`` is the number of individuals per policy.
    """

    d: int = 8
    k: int = 4
    n: int = 500
    T: int = 10
    alpha: float = 1.0
    gamma: float = 0.99
    noise_std: float = 1.0
    exogenous_variant: str = "scaled"
    s0_mean: tuple | None = None
    methods: tuple = METHODS
    naive_scaled: bool = True
    ridge: float = 0.0
    nonstationary: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.d < 1 or self.k < 2 or self.n < 1 or self.T < 1:
            raise ConfigError("need d >= 1, k >= 2, n >= 1 and T >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown method(s) {bad}; expected a subset of {list(METHODS)}")
        self.estimator()

    def estimator(self) -> NonstationaryConfig:
        try:
            return NonstationaryConfig.from_dict({**self.nonstationary, "gamma": self.gamma})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid nonstationary settings: {exc}") from exc

    def with_param(self, param: str, value) -> "SweepConfig":
        if param not in SWEEP_PARAMS:
            raise ConfigError(f"unknown sweep parameter {param!r}; expected one of {', '.join(SWEEP_PARAMS)}")
        value = float(value) if param == "alpha" else _as_int(param, value)
        return replace(self, **{param: value})

    @classmethod
    def from_dict(cls, obj: dict) -> "SweepConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown sweep settings: {sorted(unknown)}")
        obj = dict(obj)
        for key in ("methods", "s0_mean"):
            if obj.get(key) is not None:
                obj[key] = tuple(obj[key])
        return cls(**obj)

    def to_dict(self) -> dict:
        return asdict(self)


def _as_int(name, value) -> int:
    v = float(value)
    if v != int(v):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    return int(v)


def cell_seed(master_seed: int, value_index: int, rep: int) -> int:
    ss = np.random.SeedSequence(master_seed, spawn_key=(value_index, rep))
    return int(ss.generate_state(1, np.uint32)[0])


@dataclass(frozen=True)
class ResultRow:
    param: str
    value: float
    rep: int
    method: str
    policy: int
    delta_hat: float
    delta_true: float
    sq_err: float
    ape: float
    wall_ms: float | None
    seed: int
    error: str = ""


def _row(param, value, rep, method, policy, hat, true, wall_ms, seed, error="") -> ResultRow:
    sq = (hat - true) ** 2
    ape = abs(hat - true) / max(abs(true), APE_FLOOR)
    return ResultRow(param, float(value), rep, method, policy, float(hat), float(true),
                     float(sq), float(ape), wall_ms, seed, error)


def run_cell(param: str, value, value_index: int, rep: int, config: SweepConfig,
             master_seed: int, timing: bool = False) -> list[ResultRow]:
    """All methods on one freshly generated experiment; failures become rows with ``error``."""
    cfg = config.with_param(param, value)
    seed = cell_seed(master_seed, value_index, rep)
    truth = make_truth(cfg.d, cfg.k, cfg.T, cfg.alpha, seed, noise_std=cfg.noise_std,
                       s0_mean=None if cfg.s0_mean is None else np.asarray(cfg.s0_mean, dtype=float),
                       exogenous_variant=cfg.exogenous_variant)
    dataset = simulate_dataset(truth, cfg.n, cfg.T)
    theta = default_theta(cfg.d)
    true = ground_truth_delta(truth, theta, cfg.gamma)
    est = cfg.estimator()
    rows = []
    for method in cfg.methods:
        start = time.perf_counter()
        try:
            hat = run_method(dataset, method, theta, cfg.gamma, est, ridge=cfg.ridge,
                             naive_scaled=cfg.naive_scaled)
            error = ""
        except (EstimationError, ValueError, np.linalg.LinAlgError) as exc:
            hat = np.full(cfg.k - 1, np.nan)
            error = f"{type(exc).__name__}: {exc}"
        wall = (time.perf_counter() - start) * 1e3 if timing else None
        for p in range(cfg.k - 1):
            if error:
                rows.append(ResultRow(param, float(value), rep, method, p + 1, math.nan, float(true[p]),
                                      math.inf, math.inf, wall, seed, error))
            else:
                rows.append(_row(param, value, rep, method, p + 1, hat[p], true[p], wall, seed))
    return rows


def _run_cell_args(args):
    return run_cell(*args)


def sweep(param: str, values, reps: int, base_config: SweepConfig | None = None,
          master_seed: int = 0, workers: int = 1, timing: bool = False) -> list[ResultRow]:
    """Replicated comparison of the estimators while one parameter varies.

    Rows are ordered by (value index, rep, method, policy) whatever the
    worker count. A failed estimator yields rows with ``sq_err = ape = inf``
    and the error text. ``wall_ms`` is recorded only with ``timing``, since
    it would otherwise make outputs differ between runs.
    """
    cfg = base_config or SweepConfig()
    values = list(values)
    if not values:
        raise ConfigError("values must be nonempty")
    if reps < 1:
        raise ConfigError("reps must be >= 1")
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    for v in values:
        cfg.with_param(param, v)
    jobs = [(param, v, vi, r, cfg, master_seed, timing) for vi, v in enumerate(values) for r in range(reps)]
    if workers == 1:
        chunks = [run_cell(*job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_cell_args, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    return [row for chunk in chunks for row in chunk]


# ---------------------------------------------------------------------------
# results files


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def results_to_csv(rows: list[ResultRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    for r in rows:
        writer.writerow([_fmt(getattr(r, c)) for c in RESULT_COLUMNS])
    return buf.getvalue()


def read_results(source) -> list[ResultRow]:
    """Parse a results CSV written by :func:`results_to_csv`."""
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, newline="") as fh:
            text = fh.read()
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != RESULT_COLUMNS:
        raise ValueError(f"results header must be {','.join(RESULT_COLUMNS)}")
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if len(rec) != len(RESULT_COLUMNS):
            raise ValueError(f"line {lineno}: expected {len(RESULT_COLUMNS)} fields, got {len(rec)}")
        try:
            rows.append(ResultRow(rec[0], float(rec[1]), int(rec[2]), rec[3], int(rec[4]), float(rec[5]),
                                  float(rec[6]), float(rec[7]), float(rec[8]),
                                  float(rec[9]) if rec[9] else None, int(rec[10]), rec[11]))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
    return rows


# ---------------------------------------------------------------------------
# summary


@dataclass(frozen=True)
class SummaryRow:
    param: str
    value: float
    method: str
    rows: int
    failed: int
    log10_mse: float
    median_mse: float
    median_ape: float
    ape_iqr: float


def summarize(rows: list[ResultRow]) -> list[SummaryRow]:
    """Per (param, value, method): log10 of the mean squared error over all
    rows, the median over replications of each replication's mean squared
    error, and the median and inter-quartile range of the absolute
    percentage error. Failed rows count as infinite error.
    """
    if not rows:
        raise ValueError("no results to summarize")
    groups: dict[tuple, list[ResultRow]] = {}
    for r in rows:
        groups.setdefault((r.param, r.value, r.method), []).append(r)
    method_rank = {m: i for i, m in enumerate(METHODS)}
    out = []
    for key in sorted(groups, key=lambda k: (k[0], k[1], method_rank.get(k[2], len(METHODS)), k[2])):
        grp = groups[key]
        sq = np.array([r.sq_err for r in grp])
        ape = np.array([r.ape for r in grp])
        per_rep: dict[int, list[float]] = {}
        for r in grp:
            per_rep.setdefault(r.rep, []).append(r.sq_err)
        rep_mse = np.array([np.mean(v) for _, v in sorted(per_rep.items())])
        mse = float(np.mean(sq))
        log_mse = float(np.log10(mse)) if mse > 0 else -math.inf
        q25, q50, q75 = (_quantile(ape, q) for q in (0.25, 0.5, 0.75))
        iqr = math.inf if math.isinf(q75) else q75 - q25
        out.append(SummaryRow(key[0], key[1], key[2], len(grp), sum(1 for r in grp if r.error),
                              log_mse, _quantile(rep_mse, 0.5), q50, iqr))
    return out


def _quantile(x: np.ndarray, q: float) -> float:
    """Linear-interpolation quantile where any infinite neighbour gives ``inf``."""
    v = np.sort(np.asarray(x, dtype=float))
    pos = q * (len(v) - 1)
    lo, hi = int(math.floor(pos)), int(math.ceil(pos))
    if math.isinf(v[hi]):
        return math.inf
    return float(v[lo] + (v[hi] - v[lo]) * (pos - lo))


def summary_to_csv(summary: list[SummaryRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_COLUMNS)
    for s in summary:
        writer.writerow([_fmt(getattr(s, c)) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def summary_table(summary: list[SummaryRow]) -> str:
    """Fixed-width text rendering of :func:`summarize` output."""
    header = list(SUMMARY_COLUMNS)
    body = []
    for s in summary:
        body.append([s.param, f"{s.value:g}", s.method, str(s.rows), str(s.failed),
                     f"{s.log10_mse:.4f}", f"{s.median_mse:.6g}", f"{s.median_ape:.6g}", f"{s.ape_iqr:.6g}"])
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(header)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(c.rjust(w) for c, w in zip(b, widths)) for b in body)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# sampling rate with known dynamics


def oracle_exogenous(models, dataset: ExperimentDataset) -> np.ndarray:
    """Minimum-norm ``z`` minimizing the unregularized loss with ``M_i`` held fixed."""
    lam, b = exogenous_normal_equations(models, dataset, 0.0)
    z = linalg.pinvh(lam, rtol=1e-10) @ b
    return z.reshape(dataset.T + 1, dataset.d)


def identifiable_values(truth, theta: RewardModel, gamma: float, T: int) -> np.ndarray:
    """Values the oracle estimator targets.

    Without regularization, ``z`` is identified only up to the null space of
    the normal matrix (for row-stochastic dynamics, the constant sequence).
    The minimum-norm solution converges to the projection of the true offset
    onto the identifiable subspace, so the estimator targets
    ``theta^T (I - gamma M_i)^{-1} (mu + w_0)`` where ``w`` is the unidentified
    remainder. Differences between policies are unaffected.
    """
    mats = truth.matrices
    z_true = truth.exogenous()[: T + 1]
    lam = _dense_system(mats, np.ones(truth.k), T, 0.0)
    w, v = linalg.eigh(lam)
    null = v[:, w <= 1e-10 * w.max()]
    rest = (null @ (null.T @ z_true.ravel())).reshape(T + 1, truth.d)
    start = truth.s0_mean + rest[0]
    eye = np.eye(truth.d)
    return np.array([theta.theta @ linalg.solve(eye - gamma * m, start) for m in mats])


@dataclass(frozen=True)
class RateResult:
    ns: tuple
    rmse: tuple
    slope: float
    intercept: float


def oracle_rate_experiment(ns=(100, 316, 1000, 3162, 10000), reps: int = 50, d: int = 4, k: int = 4,
                           T: int = 10, alpha: float = 1.0, gamma: float = 0.99,
                           master_seed: int = 0) -> RateResult:
    """RMSE of plug-in values with the true dynamics and only ``z`` estimated.

    ``n`` is individuals per policy. Returns per-``n`` RMSE over reps and
    policies and the least-squares slope of ``log RMSE`` against ``log n``.
    """
    theta = default_theta(d)
    rmse = []
    for ni, n in enumerate(ns):
        errs = []
        for rep in range(reps):
            seed = cell_seed(master_seed, ni, rep)
            truth = make_truth(d, k, T, alpha, seed)
            ds = simulate_dataset(truth, int(n), T)
            z = oracle_exogenous(truth.matrices, ds)
            target = identifiable_values(truth, theta, gamma, T)
            model = TransitionModel(truth.matrices, gamma)
            hat = np.array([value_nonstationary(model, ExogenousSeries(z), ds, theta, i) for i in range(k)])
            errs.extend(hat - target)
        rmse.append(float(np.sqrt(np.mean(np.square(errs)))))
    slope, intercept = np.polyfit(np.log(ns), np.log(rmse), 1)
    return RateResult(tuple(int(n) for n in ns), tuple(rmse), float(slope), float(intercept))
