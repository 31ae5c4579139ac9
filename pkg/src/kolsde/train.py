"""Optimization loop: Adam updates, piecewise-constant schedules, metrics.

One run samples a fresh batch per step, evaluates the configured loss
gradient, and applies bias-corrected Adam. The learning rate and the SDE
step size both drop once, at the milestone fraction of the budget (step
count, or elapsed time under the wall-clock schedule). Everything is
reproducible from (config, seed); wall time is recorded but is the one
column excluded from determinism comparisons.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import losses, nets, sde
from .autodiff import METER


class NonFiniteGradientError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite gradient at optimizer step {step}")
        self.step = step


@dataclass(frozen=True)
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(n: int, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> OptimizerState:
    return OptimizerState(np.zeros(n), np.zeros(n), 0, beta1, beta2, eps)


def adam_step(state: OptimizerState, theta: np.ndarray, grad: np.ndarray,
              lr: float) -> tuple[OptimizerState, np.ndarray]:
    """Standard bias-corrected Adam update; aborts on non-finite gradients."""
    if theta.shape != grad.shape or theta.shape != state.m.shape:
        raise ValueError("parameter/gradient/moment shapes disagree")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError(state.step)
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_theta = theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, step=t), new_theta


@dataclass(frozen=True)
class TrainConfig:
    loss_kind: str
    model: nets.ModelSpec
    grad_model: nets.ModelSpec | None = None
    steps: int = 1000
    batch_size: int = 128
    lr: tuple[float, float] = (5e-4, 5e-6)
    dt: tuple[float, float] = (1e-2, 1e-3)
    milestone: float = 0.9
    seed: int = 0
    metrics_every: int = 250
    checkpoint_every: int = 0                # 0: final checkpoint only
    time_limit: float | None = None          # seconds; switches to the wall-clock schedule
    element_budget: int = 1 << 27            # live tape elements allowed (memory stand-in)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if not 0.0 < self.milestone < 1.0:
            raise ValueError("milestone must lie in (0, 1)")
        if min(self.lr) <= 0 or min(self.dt) <= 0:
            raise ValueError("learning rates and step sizes must be positive")
        if self.loss_kind in losses.GRADNET_KINDS and self.grad_model is None:
            raise ValueError(f"loss '{self.loss_kind}' needs a grad_model spec")


def schedule(config: TrainConfig, step: int, elapsed: float = 0.0) -> tuple[float, float]:
    """(learning rate, step size) for optimizer step `step`.

    Piecewise constant with a single drop at floor(milestone * steps); under
    a time limit the milestone applies to elapsed seconds instead.
    """
    if not 0 <= step < config.steps:
        raise ValueError("step outside the configured range")
    if config.time_limit is not None:
        late = elapsed >= config.milestone * config.time_limit
    else:
        late = step >= math.floor(config.milestone * config.steps)
    return (config.lr[1], config.dt[1]) if late else (config.lr[0], config.dt[0])


@dataclass
class MetricsRecord:
    step: int
    wall_time_s: float
    loss_kind: str
    batch_size: int
    dt: float
    loss_mean: float
    loss_std: float | None
    grad_std_max: float | None
    mse: float | None
    mse_grad: float | None
    seed: int


@dataclass
class TrainResult:
    model: nets.Model
    grad_model: nets.Model | None
    metrics: list[MetricsRecord] = field(default_factory=list)
    checkpoints: list[tuple[int, np.ndarray, np.ndarray | None]] = field(default_factory=list)
    failed: bool = False
    failure: str | None = None


Evaluator = Callable[[nets.Model, "nets.Model | None"], tuple[float, float | None]]


def train(problem: sde.Problem, config: TrainConfig,
          evaluator: Evaluator | None = None) -> TrainResult:
    """Run the gradient-descent loop of the configured estimator.

    ``evaluator`` (optional) maps the current models to (mse, mse_grad) on
    held-out data; it is called at the metrics cadence and on the final step.
    A diverged loss/gradient or a blown memory budget marks the run failed
    and stops it, leaving the failure row in the metrics log.
    """
    theta = nets.init_params(config.model, config.seed)
    model = nets.Model(config.model, theta)
    rmodel = None
    if config.grad_model is not None:
        rmodel = nets.Model(config.grad_model, nets.init_params(config.grad_model,
                                                                config.seed, stream=1))
    opt_u = adam_init(model.theta.size)
    opt_r = adam_init(rmodel.theta.size) if rmodel is not None else None

    METER.reset()
    result = TrainResult(model, rmodel)
    start = time.perf_counter()

    def emit(step, dt, loss_value, failed=False):
        mse = mse_grad = None
        if evaluator is not None and not failed:
            mse, mse_grad = evaluator(result.model, result.grad_model)
        result.metrics.append(MetricsRecord(
            step=step, wall_time_s=time.perf_counter() - start,
            loss_kind=config.loss_kind, batch_size=config.batch_size, dt=dt,
            loss_mean=loss_value, loss_std=None, grad_std_max=None,
            mse=mse, mse_grad=mse_grad, seed=config.seed))

    for step in range(config.steps):
        elapsed = time.perf_counter() - start
        if config.time_limit is not None and elapsed >= config.time_limit:
            break
        lr, dt = schedule(config, step, elapsed)
        spec = losses.LossSpec(config.loss_kind, dt, config.batch_size)
        try:
            report = losses.gradient_step(spec, problem, result.model,
                                          result.grad_model, step, config.seed)
        except (sde.SimulationDivergedError, NonFiniteGradientError) as exc:
            result.failed, result.failure = True, str(exc)
            emit(step, dt, float("nan"), failed=True)
            break
        grads = [report.grad] + ([report.grad_r] if report.grad_r is not None else [])
        if not np.isfinite(report.loss) or not all(np.all(np.isfinite(g)) for g in grads):
            result.failed, result.failure = True, f"non-finite loss at step {step}"
            emit(step, dt, float("nan"), failed=True)
            break
        if METER.peak_elements > config.element_budget:
            result.failed, result.failure = (True,
                f"tape element budget exceeded at step {step} "
                f"({METER.peak_elements} > {config.element_budget})")
            emit(step, dt, float("nan"), failed=True)
            break
        if step % config.metrics_every == 0:
            emit(step, dt, report.loss)
        opt_u, theta = adam_step(opt_u, result.model.theta, report.grad, lr)
        result.model = nets.Model(config.model, theta)
        if rmodel is not None:
            opt_r, theta_r = adam_step(opt_r, result.grad_model.theta, report.grad_r, lr)
            result.grad_model = nets.Model(config.grad_model, theta_r)
        if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            result.checkpoints.append(
                (step + 1, result.model.theta.copy(),
                 result.grad_model.theta.copy() if result.grad_model else None))
        if step == config.steps - 1:
            final_spec = losses.LossSpec(config.loss_kind, dt, config.batch_size)
            final = losses.loss_estimate(
                final_spec, problem, result.model,
                losses._replay_batch(problem, final_spec, config.steps, config.seed,
                                     False, "train"),
                result.grad_model)
            emit(config.steps, dt, final)
    return result
