"""Command-line harness: train, unlearn, bench, verify.

Configs are JSON with a fixed schema; hyperparameter keys mirror the
benchmark's standard names (eta, lambda_ga, lambda_reg, sigma, t_gd,
gamma_reg, t_proj, n_pert).  All emitted floats use 17 significant digits so
artifacts are byte-stable, and trial seeds derive as base_seed + trial
index.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import logging
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from unlearn_kit import tasks, verify
from unlearn_kit.models import (
    LabeledDataset,
    NetworkSpec,
    ParamVector,
    TrainingDiverged,
    dumps_json_17g,
    forward_batch,
    load_checkpoint,
    save_checkpoint,
    train,
)
from unlearn_kit.unlearners import (
    METHODS,
    UnlearnConfig,
    UnlearnConfigError,
    UnlearnDiverged,
    run_unlearn,
)

logger = logging.getLogger(__name__)

USAGE_EXIT = 2


class ConfigError(ValueError):
    """Invalid or missing config field; the message names the field."""


def _require(cfg: dict, fieldname: str, where: str = "config"):
    if fieldname not in cfg:
        raise ConfigError(f"missing field {fieldname!r} in {where}")
    return cfg[fieldname]


# ---------------------------------------------------------------------------
# Task plumbing
# ---------------------------------------------------------------------------

TASKS = ("poison", "erasure", "collapse")

# Offset added to the trial seed when drawing held-out evaluation data.
EVAL_SEED_OFFSET = 7919


@dataclass
class TaskBundle:
    name: str
    spec: NetworkSpec
    dataset: LabeledDataset
    loss_kind: str
    eval_fn: object  # (spec, theta) -> dict of metric name -> float
    metric_names: tuple[str, ...]


def build_task(task: str, data_cfg: dict, seed: int, model_cfg: dict | None = None) -> TaskBundle:
    if task == "poison":
        n_retain = int(data_cfg.get("n_retain", 50))
        n_forget = int(data_cfg.get("n_forget", 5))
        dataset = tasks.gen_sine_poison(n_retain, n_forget, seed)
        spec = _spec_from_cfg(model_cfg) if model_cfg else NetworkSpec.mlp([1, 300, 300, 1], "silu")
        def evaluate(spec_, theta):
            return {"sup_deviation": tasks.sup_deviation(spec_, theta)}
        return TaskBundle(task, spec, dataset, "mse", evaluate, ("sup_deviation",))
    if task == "erasure":
        n_per_class = int(data_cfg.get("n_per_class", 60))
        n_eval = int(data_cfg.get("n_eval_per_class", 100))
        dataset = tasks.gen_label_erasure_toy(n_per_class, seed)
        testset = tasks.gen_label_erasure_toy(n_eval, seed + EVAL_SEED_OFFSET)
        spec = _spec_from_cfg(model_cfg) if model_cfg else tasks.erasure_spec()
        def evaluate(spec_, theta):
            acc, mse = tasks.erasure_metrics(spec_, theta, testset)
            return {"retain_acc": acc, "gray_mse": mse}
        return TaskBundle(task, spec, dataset, "cross_entropy", evaluate, ("retain_acc", "gray_mse"))
    if task == "collapse":
        n_per_class = int(data_cfg.get("n_per_class", 200))
        forget_frac = float(data_cfg.get("forget_frac", 0.1))
        dataset, relabeled = tasks.gen_representation_collapse_toy(n_per_class, forget_frac, seed)
        spec = _spec_from_cfg(model_cfg) if model_cfg else tasks.collapse_spec()
        def evaluate(spec_, theta):
            return {"color_accuracy": tasks.color_accuracy(spec_, theta, relabeled)}
        return TaskBundle(task, spec, dataset, "cross_entropy", evaluate, ("color_accuracy",))
    raise ConfigError(f"unknown value for field 'task': {task!r}")


def _spec_from_cfg(model_cfg: dict) -> NetworkSpec:
    kind = _require(model_cfg, "kind", "model")
    if kind == "mlp":
        return NetworkSpec.mlp(
            _require(model_cfg, "widths", "model"),
            model_cfg.get("activation", "silu"),
            model_cfg.get("head_sizes"),
        )
    if kind == "linear":
        return NetworkSpec.linear(int(_require(model_cfg, "input_dim", "model")))
    if kind == "deep_linear":
        return NetworkSpec.deep_linear(_require(model_cfg, "widths", "model"))
    if kind == "perceptron":
        return NetworkSpec.perceptron(
            int(_require(model_cfg, "input_dim", "model")),
            int(_require(model_cfg, "hidden", "model")),
            model_cfg.get("activation", "relu"),
        )
    raise ConfigError(f"unknown value for field 'model.kind': {kind!r}")


def _train_initial(bundle: TaskBundle, train_cfg: dict, seed: int, on_epoch=None) -> ParamVector:
    return train(
        bundle.spec,
        bundle.dataset,
        train_cfg.get("loss", bundle.loss_kind),
        epochs=int(_require(train_cfg, "epochs", "train")),
        batch_size=int(train_cfg.get("batch_size", 64)),
        lr=float(_require(train_cfg, "eta", "train")),
        seed=seed,
        weight_decay=float(train_cfg.get("weight_decay", 0.0)),
        target_loss=train_cfg.get("target_loss"),
        lr_min=train_cfg.get("lr_min"),
        beta1=float(train_cfg.get("beta1", 0.9)),
        beta2=float(train_cfg.get("beta2", 0.999)),
        eps=float(train_cfg.get("eps", 1e-8)),
        on_epoch=on_epoch,
    )


def _unlearn_config(unlearn_cfg: dict, method: str, seed: int, loss_kind: str) -> UnlearnConfig:
    known = {
        "epochs", "eta", "lambda_ga", "lambda_reg", "sigma", "t_gd", "gamma_reg",
        "t_proj", "n_pert", "batch_size", "p_retain", "weight_decay",
    }
    unknown = set(unlearn_cfg) - known - {"method", "seed", "loss_kind"}
    if unknown:
        raise ConfigError(f"unknown field {sorted(unknown)[0]!r} in unlearn")
    cfg = UnlearnConfig(
        method=method,
        epochs=int(_require(unlearn_cfg, "epochs", "unlearn")),
        eta=float(unlearn_cfg.get("eta", 1e-3)),
        lambda_ga=float(unlearn_cfg.get("lambda_ga", 1.0)),
        lambda_reg=float(unlearn_cfg.get("lambda_reg", 1.0)),
        sigma=float(unlearn_cfg.get("sigma", 0.0)),
        t_gd=int(unlearn_cfg.get("t_gd", 0)),
        gamma_reg=float(unlearn_cfg.get("gamma_reg", 1.0)),
        t_proj=int(unlearn_cfg.get("t_proj", 1)),
        n_pert=int(unlearn_cfg.get("n_pert", 1)),
        batch_size=int(unlearn_cfg.get("batch_size", 32)),
        p_retain=float(unlearn_cfg.get("p_retain", 1.0)),
        seed=seed,
        weight_decay=float(unlearn_cfg.get("weight_decay", 0.01)),
        loss_kind=loss_kind,
    )
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# train / unlearn commands
# ---------------------------------------------------------------------------

def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}")


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply --set dotted.path=value pairs; values parse as JSON, else strings."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return cfg


def cmd_train(config_path: str, out_dir: str, seed: int | None = None, overrides=None) -> str:
    """Train the initial model on the full dataset; returns the checkpoint path."""
    cfg = apply_overrides(load_config(config_path), overrides)
    task = _require(cfg, "task")
    base_seed = int(seed if seed is not None else _require(cfg, "seed"))
    bundle = build_task(task, cfg.get("data", {}), base_seed, cfg.get("model"))
    train_cfg = _require(cfg, "train")
    os.makedirs(out_dir, exist_ok=True)

    trace: list[float] = []
    start = time.perf_counter()
    theta = _train_initial(bundle, train_cfg, base_seed, on_epoch=lambda e, loss, th: trace.append(loss))
    wall = time.perf_counter() - start

    ckpt_path = os.path.join(out_dir, "checkpoint.json")
    save_checkpoint(ckpt_path, bundle.spec, theta, base_seed, len(trace))
    tasks.dataset_to_csv(bundle.dataset, os.path.join(out_dir, "dataset.csv"))
    report = {
        "task": task,
        "seed": base_seed,
        "epochs_run": len(trace),
        "final_loss": trace[-1] if trace else None,
        "loss_trace": trace[:: max(1, len(trace) // 200)],
        "metrics": bundle.eval_fn(bundle.spec, theta),
        "wall_seconds": wall,
        "checkpoint_path": ckpt_path,
    }
    with open(os.path.join(out_dir, "train_report.json"), "w") as fh:
        fh.write(dumps_json_17g(report) + "\n")
    logger.info("trained %s: final loss %.3e (%d epochs)", task, report["final_loss"], len(trace))
    return ckpt_path


def cmd_unlearn(config_path: str, checkpoint: str, method: str, out_dir: str,
                seed: int | None = None, overrides=None) -> str:
    """Run one unlearning method from a checkpoint; returns the report path."""
    cfg = apply_overrides(load_config(config_path), overrides)
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r} (choose from {', '.join(METHODS)})")
    task = _require(cfg, "task")
    base_seed = int(seed if seed is not None else _require(cfg, "seed"))
    bundle = build_task(task, cfg.get("data", {}), base_seed, cfg.get("model"))
    spec, theta_star, _, _ = load_checkpoint(checkpoint)
    if spec.to_dict() != bundle.spec.to_dict():
        raise ConfigError("field 'model': checkpoint spec does not match the config")
    ucfg = _unlearn_config(_require(cfg, "unlearn"), method, base_seed, bundle.loss_kind)
    os.makedirs(out_dir, exist_ok=True)

    report = run_unlearn(spec, theta_star, bundle.dataset, ucfg)
    report.metrics = bundle.eval_fn(spec, report.theta)
    ckpt_path = os.path.join(out_dir, f"unlearned_{method}.json")
    save_checkpoint(ckpt_path, spec, report.theta, base_seed, ucfg.epochs)
    report.checkpoint_path = ckpt_path
    report_path = os.path.join(out_dir, f"report_{method}.json")
    with open(report_path, "w") as fh:
        fh.write(dumps_json_17g(report.to_dict()) + "\n")
    logger.info("unlearned with %s: %s", method, report.metrics)
    return report_path


# ---------------------------------------------------------------------------
# Benchmark suites
# ---------------------------------------------------------------------------

# Data poisoning, 1000-epoch budget: per-method settings from the benchmark's
# published best hyperparameters at that budget.  The bench trains a narrower
# net than the single-run default so 20 seeded trials stay desk-scale.
POISON_SUITE = {
    "task": "poison",
    "data": {"n_retain": 50, "n_forget": 5},
    "model": {"kind": "mlp", "widths": [1, 64, 64, 1], "activation": "silu"},
    "train": {"epochs": 25000, "batch_size": 64, "eta": 3e-3, "weight_decay": 0.0,
              "beta2": 0.95, "lr_min": 1e-4, "target_loss": 1e-3, "loss": "mse"},
    "common": {"epochs": 1000, "batch_size": 64, "p_retain": 1.0, "weight_decay": 0.01},
    "methods": {
        "ga": {"eta": 1e-4},
        "gd": {"eta": 1e-2},
        "ngd": {"eta": 1e-2, "sigma": 0.1},
        "ngp": {"eta": 1e-2, "lambda_ga": 1e-3},
        "minnorm-og": {"eta": 1e-2, "lambda_reg": 0.3, "t_gd": 0, "gamma_reg": 0.3,
                       "t_proj": 200, "n_pert": 50},
        "ridge": {"eta": 1e-2, "lambda_reg": 3.0, "gamma_reg": 1.0},
    },
}

# Toy representation collapse: 10 unlearning epochs with 10% retain access.
COLLAPSE_SUITE = {
    "task": "collapse",
    "data": {"n_per_class": 200, "forget_frac": 0.1},
    "train": {"epochs": 300, "batch_size": 64, "eta": 3e-3, "weight_decay": 0.01,
              "loss": "cross_entropy"},
    "common": {"epochs": 10, "batch_size": 40, "p_retain": 0.1, "weight_decay": 0.01},
    "methods": {
        "gd": {"eta": 3e-3},
        "ga": {"eta": 1e-3},
        "ngd": {"eta": 3e-3, "sigma": 0.5},
        "ngp": {"eta": 3e-3, "lambda_ga": 0.1},
        "npo": {"eta": 3e-3, "lambda_ga": 1.0},
        "scrub": {"eta": 3e-3, "lambda_reg": 0.5, "lambda_ga": 0.1, "t_gd": 2},
        "minnorm-og": {"eta": 3e-3, "lambda_reg": 0.3, "t_gd": 4, "gamma_reg": 0.9,
                       "t_proj": 1, "n_pert": 40},
        "ridge": {"eta": 3e-3, "lambda_reg": 0.5, "gamma_reg": 0.6},
    },
}

# Toy label erasure: matched 12-point sweep for the projection method and the
# descent baseline, mirroring the Pareto-frontier protocol.
ERASURE_SWEEP = [
    {"config_id": i, "eta": eta, "lambda_reg": lam, "gamma_reg": gam}
    for i, (eta, lam, gam) in enumerate(
        (eta, lam, gam)
        for eta in (3e-3, 1e-2)
        for lam in (0.1, 0.3, 1.0)
        for gam in (0.3, 0.9)
    )
]

ERASURE_SUITE = {
    "task": "erasure",
    "data": {"n_per_class": 60, "n_eval_per_class": 100},
    "train": {"epochs": 300, "batch_size": 64, "eta": 3e-3, "weight_decay": 0.01,
              "loss": "cross_entropy"},
    "common": {"epochs": 8, "batch_size": 40, "p_retain": 0.2, "weight_decay": 0.01,
               "t_gd": 2, "t_proj": 1, "n_pert": 40},
    "methods": ("minnorm-og", "gd"),
    "sweep": ERASURE_SWEEP,
}

SUITES = {"poison": POISON_SUITE, "collapse": COLLAPSE_SUITE, "erasure": ERASURE_SUITE}


def _poison_fit_curve(spec, theta, path):
    grid = np.linspace(tasks.SINE_DOMAIN[0], tasks.SINE_DOMAIN[1], 601)
    out = forward_batch(spec, theta, grid[:, None])[:, 0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "f", "sin"])
        for x, f in zip(grid, out):
            writer.writerow([format(x, ".17g"), format(f, ".17g"), format(np.sin(x), ".17g")])


def run_bench_trial(suite_name: str, trial: int, base_seed: int, out_dir: str) -> list[dict]:
    """One seeded trial: initial training plus every method in the suite."""
    suite = SUITES[suite_name]
    seed = base_seed + trial
    bundle = build_task(suite["task"], suite["data"], seed, suite.get("model"))
    theta0 = _train_initial(bundle, suite["train"], seed)
    save_checkpoint(os.path.join(out_dir, f"initial_trial{trial}.json"), bundle.spec, theta0, seed, 0)

    rows = []
    if suite_name == "erasure":
        combos = [(m, dict(v)) for m in suite["methods"] for v in suite["sweep"]]
    else:
        combos = [(m, dict(v) | {"config_id": 0}) for m, v in suite["methods"].items()]
    for method, overrides in combos:
        config_id = overrides.pop("config_id")
        ucfg = _unlearn_config({**suite["common"], **overrides}, method, seed, bundle.loss_kind)
        report = run_unlearn(bundle.spec, theta0, bundle.dataset, ucfg)
        metrics = bundle.eval_fn(bundle.spec, report.theta)
        row = {"method": method, "config_id": config_id, "trial": trial, "seed": seed,
               "wall_seconds": report.wall_seconds}
        row.update(metrics)
        rows.append(row)
        if suite_name == "poison" and trial == 0:
            _poison_fit_curve(bundle.spec, report.theta, os.path.join(out_dir, f"fit_{method}.csv"))
    return rows


def central_range(values, k_keep: int | None = None):
    """(median, lo, hi) where [lo, hi] spans the central ceil(k/2) sorted values."""
    vals = sorted(float(v) for v in values)
    k = len(vals)
    keep = k_keep if k_keep is not None else (k + 1) // 2
    start = (k - keep) // 2
    central = vals[start : start + keep]
    return float(np.median(vals)), central[0], central[-1]


def summarize_rows(rows: list[dict], metric_names) -> list[dict]:
    keys = sorted({(r["method"], r["config_id"]) for r in rows})
    out = []
    for method, config_id in keys:
        group = [r for r in rows if r["method"] == method and r["config_id"] == config_id]
        for metric in metric_names:
            med, lo, hi = central_range([r[metric] for r in group])
            out.append({
                "method": method, "config_id": config_id, "metric": metric,
                "n_trials": len(group), "median": med, "central_lo": lo, "central_hi": hi,
            })
    return out


def _write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            rendered = []
            for col in columns:
                v = row[col]
                rendered.append(format(v, ".17g") if isinstance(v, float) else str(v))
            writer.writerow(rendered)


def cmd_bench(suite_name: str, trials: int, out_dir: str, base_seed: int = 0, jobs: int | None = None) -> str:
    """Run a benchmark suite; returns the summary CSV path."""
    if suite_name not in SUITES:
        raise ConfigError(f"unknown suite {suite_name!r} (choose from {', '.join(SUITES)})")
    if trials < 1:
        raise ConfigError("field 'trials' must be >= 1")
    suite = SUITES[suite_name]
    os.makedirs(out_dir, exist_ok=True)

    env_cap = os.environ.get("UNLEARN_KIT_THREADS")
    if jobs is None:
        jobs = int(env_cap) if env_cap else 1
    jobs = max(1, min(jobs, trials))

    rows: list[dict] = []
    if jobs == 1:
        for trial in range(trials):
            rows.extend(run_bench_trial(suite_name, trial, base_seed, out_dir))
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_bench_trial, suite_name, t, base_seed, out_dir) for t in range(trials)]
            for fut in futures:
                rows.extend(fut.result())
    rows.sort(key=lambda r: (r["method"], r["config_id"], r["trial"]))

    bundle_metrics = {"poison": ("sup_deviation",), "collapse": ("color_accuracy",),
                      "erasure": ("retain_acc", "gray_mse")}[suite_name]
    trial_cols = ["method", "config_id", "trial", "seed", *bundle_metrics, "wall_seconds"]
    _write_csv(os.path.join(out_dir, "trials.csv"), rows, trial_cols)

    summary = summarize_rows(rows, bundle_metrics)
    summary_path = os.path.join(out_dir, "summary.csv")
    _write_csv(summary_path, summary,
               ["method", "config_id", "metric", "n_trials", "median", "central_lo", "central_hi"])
    return summary_path


def read_summary(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return [dict(r) for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unlearn-kit",
                                     description="Unlearning solvers and benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train the initial model from a config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", default="out")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE")

    p_unlearn = sub.add_parser("unlearn", help="run one unlearning method from a checkpoint")
    p_unlearn.add_argument("--config", required=True)
    p_unlearn.add_argument("--checkpoint", required=True)
    p_unlearn.add_argument("--method", required=True)
    p_unlearn.add_argument("--out", default="out")
    p_unlearn.add_argument("--seed", type=int, default=None)
    p_unlearn.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE")

    p_bench = sub.add_parser("bench", help="run a benchmark suite")
    p_bench.add_argument("--suite", required=True, choices=sorted(SUITES))
    p_bench.add_argument("--trials", type=int, required=True)
    p_bench.add_argument("--out", default="bench_out")
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--jobs", type=int, default=None)

    sub.add_parser("verify", help="run the theorem-oracle verification suite")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("UNLEARN_KIT_LOG", "WARNING"))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            path = cmd_train(args.config, args.out, args.seed, args.overrides)
            print(path)
            return 0
        if args.command == "unlearn":
            path = cmd_unlearn(args.config, args.checkpoint, args.method, args.out,
                               args.seed, args.overrides)
            print(path)
            return 0
        if args.command == "bench":
            path = cmd_bench(args.suite, args.trials, args.out, args.seed, args.jobs)
            print(path)
            return 0
        if args.command == "verify":
            results = verify.run_all()
            return 0 if all(r.passed for r in results) else 1
    except (ConfigError, UnlearnConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return USAGE_EXIT
    except (TrainingDiverged, UnlearnDiverged) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
