"""Experiment orchestration: config files, subcommands, CSV outputs.

A config is one flat JSON object per experiment; list-valued keys turn into
a cartesian sweep. Subcommands: ``train``, ``eval``, ``diagnostics``,
``reference``, ``sweep``. Outputs are plain CSV files with stable headers
(metrics.csv / eval.csv / variance.csv), a run manifest, and binary
checkpoint / reference-table files. The exit status is nonzero exactly when
a run produced an error row.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import multiprocessing
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, evaluation, losses, nets, sde, train

METRICS_COLUMNS = ["step", "wall_time_s", "loss_kind", "batch_size", "dt",
                   "loss_mean", "loss_std", "grad_std_max", "mse", "mse_grad", "seed"]
EVAL_COLUMNS = ["step", "loss_kind", "mse", "mse_grad", "n_samples", "seed"]
VARIANCE_COLUMNS = ["loss_kind", "batch_size", "n_batches", "loss_mean",
                    "loss_std", "grad_std_max", "seed"]

_PROBLEM_KEYS = ("d", "horizon", "nu", "strike", "drift_rate", "beta",
                 "well", "decay", "x_low", "x_high")


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str = "heat"
    overrides: dict = field(default_factory=dict)
    loss: str = "FK"
    steps: int = 1000
    batch_size: int = 128
    lr_before: float = 5e-4
    lr_after: float = 5e-6
    dt_before: float = 1e-2
    dt_after: float = 1e-3
    milestone: float = 0.9
    seed: int = 0
    metrics_every: int = 250
    levels: int = 3
    q: int = 3
    residual: bool = True
    eval_samples: int = 1 << 15
    eval_inner: int = 1 << 12
    checkpoint_every: int = 0
    diag_batches: int = 30
    diag_batch_sizes: tuple[int, ...] = (128,)
    fd_half_width: float = 6.0
    fd_n_x: int = 1000
    fd_n_t: int = 1000
    time_limit: float | None = None
    element_budget: int = 1 << 27

    def to_dict(self) -> dict:
        out = {"problem": self.problem}
        out.update(self.overrides)
        for f in dataclasses.fields(self):
            if f.name in ("problem", "overrides"):
                continue
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        kwargs = {"problem": raw.pop("problem", "heat")}
        overrides = {k: raw.pop(k) for k in list(raw) if k in _PROBLEM_KEYS}
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = [k for k in raw if k not in names]
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if "diag_batch_sizes" in raw:
            raw["diag_batch_sizes"] = tuple(raw["diag_batch_sizes"])
        kwargs["overrides"] = overrides
        kwargs.update(raw)
        return cls(**kwargs)


def load_config(path) -> dict:
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be one flat JSON object")
    return raw


def expand_sweep(raw: dict) -> list[tuple[str, ExperimentConfig]]:
    """Cartesian expansion of list-valued keys into labeled run configs.

    diag_batch_sizes is inherently list-valued and never swept over.
    """
    sweep_keys = sorted(k for k, v in raw.items()
                        if isinstance(v, list) and k != "diag_batch_sizes")
    if not sweep_keys:
        return [("run", ExperimentConfig.from_dict(raw))]
    out = []
    for combo in itertools.product(*(raw[k] for k in sweep_keys)):
        point = dict(raw)
        point.update(dict(zip(sweep_keys, combo)))
        label = ",".join(f"{k}={v}" for k, v in zip(sweep_keys, combo))
        out.append((label, ExperimentConfig.from_dict(point)))
    return out


def build_problem(config: ExperimentConfig) -> sde.Problem:
    return sde.make_problem(config.problem, **config.overrides)


def model_specs(config: ExperimentConfig, problem: sde.Problem):
    spec = nets.multilevel(problem.d, levels=config.levels, q=config.q,
                           residual=config.residual, horizon=problem.horizon)
    rspec = None
    if config.loss in losses.GRADNET_KINDS:
        rspec = nets.gradient_multilevel(problem.d, levels=config.levels, q=config.q,
                                         residual=config.residual,
                                         horizon=problem.horizon)
    return spec, rspec


def build_reference(config: ExperimentConfig, problem: sde.Problem,
                    table_path=None) -> evaluation.Reference:
    table = evaluation.load_table(table_path) if table_path else None
    if problem.reference_kind == "fd-tensor-product" and table is None:
        grid = evaluation.GridSpec(config.fd_half_width, config.fd_n_x, config.fd_n_t)
        table = evaluation.fd_reference_1d(evaluation.doublewell_psi1(problem),
                                           evaluation.doublewell_g1(problem),
                                           problem.horizon, grid)
    return evaluation.make_reference(problem, config.eval_inner, config.seed, table)


# -- csv plumbing --------------------------------------------------------------
def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def append_rows(path, columns, rows) -> None:
    """Append dict rows, writing the header only when the file starts empty."""
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in columns])


def read_rows(path, columns) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != columns:
            raise ValueError(f"{path}: header mismatch, got {reader.fieldnames}")
        out = []
        for raw in reader:
            row = {}
            for key, value in raw.items():
                if value == "":
                    row[key] = None
                elif key in ("step", "batch_size", "n_batches", "seed", "n_samples"):
                    row[key] = int(value)
                elif key in ("loss_kind",):
                    row[key] = value
                else:
                    row[key] = float(value)
            out.append(row)
        return out


def metrics_equal(path_a, path_b) -> bool:
    """Determinism comparison; wall time is the one column allowed to differ."""
    a = read_rows(path_a, METRICS_COLUMNS)
    b = read_rows(path_b, METRICS_COLUMNS)
    for row in a + b:
        row.pop("wall_time_s")
    return a == b


def _metrics_row(record: train.MetricsRecord) -> dict:
    row = dataclasses.asdict(record)
    row["wall_time_s"] = round(row["wall_time_s"], 3)
    return row


# -- subcommands -----------------------------------------------------------------
def run_train(config: ExperimentConfig, out_dir, reference_path=None) -> int:
    """One training run: metrics.csv, checkpoints, manifest. 0 on success."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    problem = build_problem(config)
    spec, rspec = model_specs(config, problem)
    try:
        reference = build_reference(config, problem, reference_path)
    except ValueError:
        reference = None

    def evaluator(model, rmodel):
        if reference is None:
            return None, None
        mse = evaluation.mse_eval(problem, model, reference,
                                  config.eval_samples, config.seed)
        mse_grad = None
        if reference.grad is not None:
            target = rmodel if rmodel is not None else model
            mse_grad = evaluation.mse_grad_eval(problem, target, reference,
                                                config.eval_samples, config.seed)
        return mse, mse_grad

    tconf = train.TrainConfig(
        loss_kind=config.loss, model=spec, grad_model=rspec, steps=config.steps,
        batch_size=config.batch_size, lr=(config.lr_before, config.lr_after),
        dt=(config.dt_before, config.dt_after), milestone=config.milestone,
        seed=config.seed, metrics_every=config.metrics_every,
        checkpoint_every=config.checkpoint_every,
        time_limit=config.time_limit, element_budget=config.element_budget)
    result = train.train(problem, tconf, evaluator)
    for step, theta, theta_r in result.checkpoints:
        nets.save_checkpoint(out / f"checkpoint_{step}.bin", spec, theta,
                             seed=config.seed, step=step)
        if theta_r is not None:
            nets.save_checkpoint(out / f"checkpoint_r_{step}.bin", rspec, theta_r,
                                 seed=config.seed, step=step)

    append_rows(out / "metrics.csv", METRICS_COLUMNS,
                [_metrics_row(r) for r in result.metrics])
    nets.save_checkpoint(out / "checkpoint.bin", spec, result.model.theta,
                         seed=config.seed, step=config.steps)
    if result.grad_model is not None:
        nets.save_checkpoint(out / "checkpoint_r.bin", rspec,
                             result.grad_model.theta, seed=config.seed,
                             step=config.steps)
    manifest = {"config": config.to_dict(), "version": __version__,
                "seed": config.seed, "failed": result.failed,
                "failure": result.failure}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return 1 if result.failed else 0


def run_eval(config: ExperimentConfig, checkpoint_path, out_dir,
             reference_path=None) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    problem = build_problem(config)
    spec, theta, meta = nets.load_checkpoint(checkpoint_path)
    if spec.input_dim != problem.d + 1:
        raise ValueError("checkpoint dimension does not match the configured problem")
    model = nets.Model(spec, theta)
    reference = build_reference(config, problem, reference_path)
    mse = mse_grad = None
    if nets.is_scalar(spec):
        mse = evaluation.mse_eval(problem, model, reference,
                                  config.eval_samples, config.seed)
    if reference.grad is not None:
        mse_grad = evaluation.mse_grad_eval(problem, model, reference,
                                            config.eval_samples, config.seed)
    append_rows(out / "eval.csv", EVAL_COLUMNS, [{
        "step": meta["step"], "loss_kind": config.loss, "mse": mse,
        "mse_grad": mse_grad, "n_samples": config.eval_samples,
        "seed": config.seed}])
    return 0


def run_diagnostics(config: ExperimentConfig, checkpoint_path, out_dir,
                    zero_noise: bool = False) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    problem = build_problem(config)
    spec, theta, _ = nets.load_checkpoint(checkpoint_path)
    if spec.input_dim != problem.d + 1:
        raise ValueError("checkpoint dimension does not match the configured problem")
    model = nets.Model(spec, theta)
    rmodel = None
    if config.loss in losses.GRADNET_KINDS:
        _, rspec = model_specs(config, problem)
        rmodel = nets.Model(rspec, nets.init_params(rspec, config.seed, stream=1))
    rows = []
    for k in config.diag_batch_sizes:
        diag = evaluation.variance_diagnostics(
            losses.LossSpec(config.loss, config.dt_after, int(k)), problem,
            model, rmodel, config.diag_batches, config.seed, zero_noise=zero_noise)
        rows.append({"loss_kind": diag.loss_kind, "batch_size": diag.batch_size,
                     "n_batches": diag.n_batches, "loss_mean": diag.loss_mean,
                     "loss_std": diag.loss_std, "grad_std_max": diag.grad_std_max,
                     "seed": config.seed})
    append_rows(out / "variance.csv", VARIANCE_COLUMNS, rows)
    return 0


def _sweep_worker(raw_config: dict, out_dir: str, reference_path) -> int:
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    return run_train(ExperimentConfig.from_dict(raw_config), out_dir, reference_path)


def run_sweep(raw: dict, out_root, reference_path=None, workers: int = 1) -> int:
    """Expand list-valued keys and run every point; each run owns a
    subdirectory. Runs are independent, so they may execute in parallel
    worker processes."""
    runs = expand_sweep(raw)
    out_root = Path(out_root)
    if workers <= 1 or len(runs) == 1:
        status = 0
        for label, config in runs:
            code = run_train(config, out_root / label, reference_path)
            print(f"{label}: {'failed' if code else 'ok'}")
            status = status or code
        return status
    # fork: child processes must not re-import the caller's __main__
    ctx = multiprocessing.get_context("fork")
    status = 0
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        futures = {pool.submit(_sweep_worker, config.to_dict(),
                               str(out_root / label), reference_path): label
                   for label, config in runs}
        for future, label in futures.items():
            code = future.result()
            print(f"{label}: {'failed' if code else 'ok'}")
            status = status or code
    return status


def run_reference(config: ExperimentConfig, out_dir) -> int:
    """Build or validate the problem's reference; FD tables are persisted."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    problem = build_problem(config)
    if problem.reference_kind == "closed-form":
        print("reference: closed-form (no table written)")
        return 0
    if problem.reference_kind == "mc-feynman-kac":
        print(f"reference: mc-feynman-kac with {config.eval_inner} inner samples "
              "(no table written)")
        return 0
    grid = evaluation.GridSpec(config.fd_half_width, config.fd_n_x, config.fd_n_t)
    table = evaluation.fd_reference_1d(evaluation.doublewell_psi1(problem),
                                       evaluation.doublewell_g1(problem),
                                       problem.horizon, grid)
    path = out / "reference.bin"
    evaluation.save_table(path, table)
    # 1-D benchmark: pure diffusion with the same grid against the closed form
    bench = evaluation.fd_reference_1d(lambda x: np.zeros_like(x),
                                       lambda x: x * x, problem.horizon, grid)
    err = abs(bench.value1(0.0, 0.0) - problem.horizon)
    print(f"reference: fd-tensor-product table written to {path} "
          f"(n_x={grid.n_x}, half_width={grid.half_width}); "
          f"1-D heat benchmark error {err:.2e}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="kolsde",
                                     description="SDE-based losses for linear "
                                     "Kolmogorov PDEs: train, evaluate, diagnose.")
    parser.add_argument("command",
                        choices=["train", "eval", "diagnostics", "reference", "sweep"])
    parser.add_argument("--config", required=True, help="flat JSON experiment file")
    parser.add_argument("--out", default=None,
                        help="output directory (default: $KOLSDE_OUT or ./runs)")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--checkpoint", default=None)
    parser.add_argument("--reference", default=None, help="reference table file")
    parser.add_argument("--workers", type=int, default=1,
                        help="parallel runs for the sweep command")
    args = parser.parse_args(argv)

    raw = load_config(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    out_root = Path(args.out or os.environ.get("KOLSDE_OUT", "runs"))

    if args.command == "sweep":
        return run_sweep(raw, out_root, args.reference, workers=args.workers)

    runs = expand_sweep(raw)
    if len(runs) > 1:
        raise SystemExit(f"config sweeps over {len(runs)} runs; use the sweep command")
    config = runs[0][1]
    if args.command == "train":
        return run_train(config, out_root, args.reference)
    if args.command == "eval":
        if not args.checkpoint:
            raise SystemExit("eval needs --checkpoint")
        return run_eval(config, args.checkpoint, out_root, args.reference)
    if args.command == "diagnostics":
        if not args.checkpoint:
            raise SystemExit("diagnostics needs --checkpoint")
        return run_diagnostics(config, args.checkpoint, out_root)
    return run_reference(config, out_root)


if __name__ == "__main__":
    sys.exit(main())
