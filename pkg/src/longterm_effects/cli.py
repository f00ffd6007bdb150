"""Command line: ``gen-synthetic``, ``estimate``, ``sweep`` and ``report``."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np

from .core import (
    DatasetError,
    DivergenceError,
    EstimationError,
    RewardModel,
    estimate_reward_coefficients,
    load_dataset,
    mean_initial_observation,
    save_dataset,
)
from .harness import (
    DEFAULT_GRIDS,
    METHODS,
    SWEEP_PARAMS,
    ConfigError,
    SweepConfig,
    naive_average_estimate,
    read_results,
    results_to_csv,
    summarize,
    summary_table,
    summary_to_csv,
    sweep,
)
from .nonstationary import FitReport, NonstationaryConfig, alternate_minimize
from .stationary import spectral_radius, values_stationary
from .synthetic import default_theta, ground_truth_delta, make_truth, simulate_dataset, truth_to_json


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _discount(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"gamma must lie in (0, 1), got {v}")
    return v


def _nonneg_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v >= 0.0 or math.isinf(v):
        raise argparse.ArgumentTypeError(f"must be a finite number >= 0, got {text}")
    return v


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _write_text(path, text: str) -> None:
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _same_file(a, b) -> bool:
    return os.path.abspath(a) == os.path.abspath(b)


# ---------------------------------------------------------------------------
# gen-synthetic


def cmd_gen_synthetic(args) -> int:
    s0 = None
    if args.s0_mean is not None:
        s0 = np.asarray(_float_list(args.s0_mean), dtype=float)
        if s0.shape != (args.d,):
            raise UsageError(f"--s0-mean needs {args.d} values, got {s0.size}")
    truth_path = args.truth_out or str(Path(args.out).with_suffix("")) + ".truth.json"
    if _same_file(args.out, truth_path):
        raise UsageError("--out and --truth-out must differ")
    truth = make_truth(args.d, args.k, args.T, args.alpha, args.seed, noise_std=args.noise_std,
                       s0_mean=s0, exogenous_variant="raw" if args.raw_exogenous else "scaled")
    dataset = simulate_dataset(truth, args.n, args.T)
    theta = default_theta(args.d)
    save_dataset(dataset, args.out)
    _write_text(truth_path, truth_to_json(truth, theta, args.gamma) + "\n")
    delta = ground_truth_delta(truth, theta, args.gamma)
    print(f"dataset: {args.out}")
    print(f"truth:   {truth_path}")
    for i, v in enumerate(delta, start=1):
        print(f"delta[{i}] = {v:.10g}")
    return 0


# ---------------------------------------------------------------------------
# estimate


def _reward(args, dataset) -> RewardModel:
    if args.reward_feature is not None:
        return RewardModel.one_hot(dataset.d, args.reward_feature)
    if args.reward_coef is not None:
        return RewardModel.load(args.reward_coef)
    return estimate_reward_coefficients(dataset)


def _nonstationary_config(args) -> NonstationaryConfig:
    settings = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            settings = json.load(fh)
        if not isinstance(settings, dict):
            raise UsageError("--config must hold a JSON object")
    flags = {
        "lambda_z": args.lambda_z,
        "lambda_m": args.lambda_m,
        "tol": args.tol,
        "max_iters": args.max_iters,
        "ridge": args.ridge,
    }
    settings.update({k: v for k, v in flags.items() if v is not None})
    if args.no_accelerate:
        settings["accelerate"] = False
    settings["gamma"] = args.gamma
    try:
        return NonstationaryConfig.from_dict(settings)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid estimator settings: {exc}") from exc


def _naive_report(dataset, theta, gamma, scaled) -> FitReport:
    rewards = dataset.observations @ theta.theta
    means = np.array([rewards[dataset.policies == i].mean() for i in range(dataset.k)])
    values = means / (1.0 - gamma) if scaled else means
    effects = naive_average_estimate(dataset, theta, gamma, scaled=scaled)
    return FitReport("naive", gamma, None, None, [], 0, True, values, effects,
                     {"discount_scaled": scaled})


def _stationary_report(dataset, theta, gamma, ridge) -> FitReport:
    fit, values = values_stationary(dataset, theta, gamma, ridge=ridge)
    mats = fit.model.matrices
    diagnostics = {
        "ridge": ridge,
        "gram_condition": list(fit.condition_numbers),
        "residual_rms": list(fit.residual_rms),
        "spectral_radius_gamma_m": [spectral_radius(gamma * m) for m in mats],
        "initial_mean": [mean_initial_observation(dataset, i) for i in range(dataset.k)],
    }
    return FitReport("stationary", gamma, mats, None, [], 1, True, values, values[1:] - values[0], diagnostics)


def cmd_estimate(args) -> int:
    if _same_file(args.data, args.out):
        raise UsageError("--data and --out must differ")
    dataset = load_dataset(args.data, k=args.k)
    theta = _reward(args, dataset)
    theta.check_dim(dataset.d)
    if args.method == "naive":
        report = _naive_report(dataset, theta, args.gamma, not args.naive_unscaled)
    elif args.method == "stationary":
        report = _stationary_report(dataset, theta, args.gamma, args.ridge or 0.0)
    else:
        try:
            report = alternate_minimize(dataset, theta, _nonstationary_config(args))
        except DivergenceError as exc:
            partial = getattr(exc, "report", None)
            if partial is not None:
                _write_text(args.out, partial.to_json() + "\n")
                print(f"partial report (no values): {args.out}", file=sys.stderr)
            raise
    if theta.residual_rms is not None:
        report.diagnostics["reward_residual_rms"] = theta.residual_rms
        report.diagnostics["reward_theta"] = theta.theta
    _write_text(args.out, report.to_json() + "\n")
    print(f"method: {report.method}  gamma: {report.gamma:g}")
    for i, v in enumerate(report.effects, start=1):
        print(f"delta[{i}] = {v:.10g}")
    if report.method == "nonstationary":
        state = "converged" if report.converged else "not converged"
        print(f"{state} after {report.iterations} iterations; final loss {report.loss_trace[-1]:.10g}")
    print(f"report: {args.out}")
    return 0


# ---------------------------------------------------------------------------
# sweep and report


def _sweep_config(args) -> SweepConfig:
    settings = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            settings = json.load(fh)
        if not isinstance(settings, dict):
            raise UsageError("--config must hold a JSON object")
    for key in ("d", "k", "n", "T", "alpha", "gamma", "noise_std", "ridge"):
        v = getattr(args, key)
        if v is not None:
            settings[key] = v
    if args.methods:
        settings["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    if args.naive_unscaled:
        settings["naive_scaled"] = False
    if args.raw_exogenous:
        settings["exogenous_variant"] = "raw"
    est = dict(settings.get("nonstationary", {}))
    if args.lambda_z is not None:
        est["lambda_z"] = args.lambda_z
    if args.lambda_m is not None:
        est["lambda_m"] = args.lambda_m
    settings["nonstationary"] = est
    return SweepConfig.from_dict(settings)


def render_svg(summary, param: str, width: int = 640, height: int = 400) -> str:
    """Line chart of log10 MSE against the swept value, one polyline per method."""
    colors = {"naive": "#1f77b4", "stationary": "#ff7f0e", "nonstationary": "#2ca02c"}
    methods = [m for m in METHODS]
    pts = {m: [(s.value, s.log10_mse) for s in summary if s.method == m and math.isfinite(s.log10_mse)]
           for m in methods}
    xs = sorted({s.value for s in summary})
    ys = [y for p in pts.values() for _, y in p]
    log_x = len(xs) > 1 and xs[0] > 0 and xs[-1] / xs[0] >= 10
    fx = (lambda v: math.log10(v)) if log_x else (lambda v: v)
    x_lo, x_hi = (fx(xs[0]), fx(xs[-1])) if xs else (0.0, 1.0)
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    y_lo, y_hi = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    left, right, top, bottom = 70, 150, 20, 50
    pw, ph = width - left - right, height - top - bottom

    def sx(v):
        return left + (fx(v) - x_lo) / (x_hi - x_lo) * pw

    def sy(v):
        return top + (y_hi - v) / (y_hi - y_lo) * ph

    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(width), height=str(height),
                     viewBox=f"0 0 {width} {height}")
    ET.SubElement(svg, "rect", x="0", y="0", width=str(width), height=str(height), fill="white")
    axes = ET.SubElement(svg, "g", stroke="black", fill="none")
    ET.SubElement(axes, "line", x1=str(left), y1=str(top + ph), x2=str(left + pw), y2=str(top + ph))
    ET.SubElement(axes, "line", x1=str(left), y1=str(top), x2=str(left), y2=str(top + ph))
    labels = ET.SubElement(svg, "g", fill="black", **{"font-family": "sans-serif", "font-size": "11"})
    for v in xs:
        t = ET.SubElement(labels, "text", x=f"{sx(v):.2f}", y=str(top + ph + 15), **{"text-anchor": "middle"})
        t.text = f"{v:g}"
    for v in np.linspace(y_lo, y_hi, 5):
        t = ET.SubElement(labels, "text", x=str(left - 6), y=f"{sy(v) + 4:.2f}", **{"text-anchor": "end"})
        t.text = f"{v:.2f}"
    t = ET.SubElement(labels, "text", x=str(left + pw / 2), y=str(height - 10), **{"text-anchor": "middle"})
    t.text = f"{param} (log scale)" if log_x else param
    t = ET.SubElement(labels, "text", x="15", y=str(top + ph / 2),
                      transform=f"rotate(-90 15 {top + ph / 2})", **{"text-anchor": "middle"})
    t.text = "log10 MSE"
    for row, m in enumerate(methods):
        points = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts[m])
        ET.SubElement(svg, "polyline", points=points, fill="none", stroke=colors[m],
                      **{"stroke-width": "2", "data-method": m})
        ly = top + 15 + 18 * row
        ET.SubElement(svg, "line", x1=str(left + pw + 15), y1=str(ly), x2=str(left + pw + 40), y2=str(ly),
                      stroke=colors[m], **{"stroke-width": "2"})
        t = ET.SubElement(labels, "text", x=str(left + pw + 45), y=str(ly + 4))
        t.text = m
    return ET.tostring(svg, encoding="unicode") + "\n"


def _emit_summary(rows, args, param) -> None:
    summary = summarize(rows)
    sys.stdout.write(summary_table(summary))
    if args.summary_out:
        _write_text(args.summary_out, summary_to_csv(summary))
    if args.svg:
        _write_text(args.svg, render_svg(summary, param))


def cmd_sweep(args) -> int:
    outputs = [p for p in (args.out, args.summary_out, args.svg) if p]
    if len({os.path.abspath(p) for p in outputs}) != len(outputs):
        raise UsageError("output paths must differ")
    config = _sweep_config(args)
    values = args.values if args.values is not None else DEFAULT_GRIDS[args.param]
    rows = sweep(args.param, values, args.reps, config, master_seed=args.seed, workers=args.workers,
                 timing=args.timing)
    _write_text(args.out, results_to_csv(rows))
    failed = sum(1 for r in rows if r.error)
    if failed:
        print(f"{failed} of {len(rows)} result rows record an estimator failure (see the error column)",
              file=sys.stderr)
    _emit_summary(rows, args, args.param)
    return 0


def cmd_report(args) -> int:
    path = args.input
    if path.endswith(".json"):
        with open(path, encoding="utf-8") as fh:
            report = FitReport.from_json(fh.read())
        print(f"method: {report.method}  gamma: {report.gamma:g}")
        for i, v in enumerate(report.values):
            print(f"value[{i}] = {v:.10g}")
        for i, v in enumerate(report.effects, start=1):
            print(f"delta[{i}] = {v:.10g}")
        if report.loss_trace:
            print(f"iterations: {report.iterations}  converged: {str(report.converged).lower()}  "
                  f"loss: {report.loss_trace[0]:.10g} -> {report.loss_trace[-1]:.10g}")
        sens = report.diagnostics.get("effect_z0_sensitivity")
        if sens is not None:
            print("effect sensitivity to z_0 (norm per treatment): " + ", ".join(f"{s:.4g}" for s in sens))
        return 0
    rows = read_results(path)
    params = sorted({r.param for r in rows})
    _emit_summary(rows, args, params[0] if len(params) == 1 else "value")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="longterm-effects",
                                     description="Long-term treatment effects from short A/B trajectories.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="simulate an experiment and write dataset CSV plus truth JSON")
    g.add_argument("--d", type=_positive_int, default=4)
    g.add_argument("--k", type=_positive_int, default=4)
    g.add_argument("--n", type=_positive_int, default=200, help="individuals per policy")
    g.add_argument("--T", type=_positive_int, default=10)
    g.add_argument("--alpha", type=float, default=1.0)
    g.add_argument("--seed", type=_nonneg_int, default=0)
    g.add_argument("--gamma", type=_discount, default=0.99, help="discount used for the reported truth")
    g.add_argument("--noise-std", type=_nonneg_float, default=1.0)
    g.add_argument("--s0-mean", default=None, help="comma-separated initial mean (length d)")
    g.add_argument("--raw-exogenous", action="store_true", help="offset by alpha * raw walk instead of scaled walk")
    g.add_argument("--out", default="synthetic.csv")
    g.add_argument("--truth-out", default=None, help="default: <out>.truth.json")
    g.set_defaults(func=cmd_gen_synthetic)

    e = sub.add_parser("estimate", help="fit one estimator and write a JSON report")
    e.add_argument("--method", choices=METHODS, required=True)
    e.add_argument("--gamma", type=_discount, default=0.99)
    e.add_argument("--data", required=True)
    e.add_argument("--k", type=_positive_int, default=None, help="number of policies (default: inferred)")
    reward = e.add_mutually_exclusive_group(required=True)
    reward.add_argument("--reward-feature", type=_nonneg_int, help="reward is this observation coordinate")
    reward.add_argument("--reward-coef", help='JSON file {"theta": [...]}')
    reward.add_argument("--reward-fit", action="store_true", help="fit coefficients on the reward column")
    e.add_argument("--out", required=True)
    e.add_argument("--config", help="JSON object of nonstationary settings")
    e.add_argument("--lambda-z", type=_nonneg_float)
    e.add_argument("--lambda-m", type=_nonneg_float)
    e.add_argument("--ridge", type=_nonneg_float)
    e.add_argument("--tol", type=_nonneg_float)
    e.add_argument("--max-iters", type=_positive_int)
    e.add_argument("--no-accelerate", action="store_true", help="plain alternation only")
    e.add_argument("--naive-unscaled", action="store_true", help="naive effect without the 1/(1-gamma) factor")
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("sweep", help="replicated synthetic comparison of all estimators")
    s.add_argument("--param", choices=SWEEP_PARAMS, required=True)
    s.add_argument("--values", type=_float_list, default=None, help="comma-separated grid")
    s.add_argument("--reps", type=_positive_int, default=20)
    s.add_argument("--seed", type=_nonneg_int, default=0)
    s.add_argument("--workers", type=_positive_int, default=1)
    s.add_argument("--out", required=True, help="results CSV")
    s.add_argument("--summary-out", help="summary CSV")
    s.add_argument("--svg", help="log-MSE line chart")
    s.add_argument("--config", help="JSON object of sweep settings")
    s.add_argument("--d", type=_positive_int)
    s.add_argument("--k", type=_positive_int)
    s.add_argument("--n", type=_positive_int)
    s.add_argument("--T", type=_positive_int)
    s.add_argument("--alpha", type=float)
    s.add_argument("--gamma", type=_discount)
    s.add_argument("--noise-std", type=_nonneg_float)
    s.add_argument("--ridge", type=_nonneg_float)
    s.add_argument("--lambda-z", type=_nonneg_float)
    s.add_argument("--lambda-m", type=_nonneg_float)
    s.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    s.add_argument("--naive-unscaled", action="store_true")
    s.add_argument("--raw-exogenous", action="store_true")
    s.add_argument("--timing", action="store_true", help="record wall_ms (outputs then vary between runs)")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="summarize a results CSV or print a fit report JSON")
    r.add_argument("input")
    r.add_argument("--summary-out")
    r.add_argument("--svg")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EstimationError as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
