"""The six loss/gradient estimators over simulated path batches.

Per sample the estimators combine a terminal mismatch
``delta = g(X_T) - u(xi, tau)`` with a discretized stochastic integral:
the left-endpoint Ito sum of the model's spatial gradient against the
Brownian increments (or of the paired gradient network for the grad
variants). The plain squared terminal mismatch is the Feynman-Kac loss;
subtracting the integral gives the backward-SDE losses, whose residual
``err = delta - integral`` drives every gradient formula here.

Gradients are exact: reverse sweeps are seeded per sample with
``-2/K err`` so the sum over samples happens inside one backward pass.
The one-pass estimators deliberately keep the whole step-by-step
recording alive (memory grows with the number of steps); the two-pass
variants recompute the batch from its random key and sweep one time step
at a time, so their peak tape size is step-count independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets, rng, sde
from .autodiff.tape import Tape

KINDS = ("FK", "BSDE", "BSDE-detach", "BSDE-grad", "BSDE-eff", "BSDE-grad-eff")
GRADNET_KINDS = ("BSDE-grad", "BSDE-grad-eff")
TWO_PASS_KINDS = ("BSDE-eff", "BSDE-grad-eff")


class InternalConsistencyError(RuntimeError):
    """Replayed randomness failed to reproduce the cached batch."""


@dataclass(frozen=True)
class LossSpec:
    kind: str
    dt: float
    batch_size: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind '{self.kind}'")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")


@dataclass(frozen=True)
class SampleTerms:
    delta: np.ndarray      # terminal mismatch per sample
    integral: np.ndarray   # discretized stochastic integral (zero for FK)

    @property
    def err(self) -> np.ndarray:
        return self.delta - self.integral


@dataclass
class GradientReport:
    loss: float
    grad: np.ndarray
    grad_r: np.ndarray | None = None
    g1: np.ndarray | None = None          # direct term -2/K sum err grad_theta u
    terms: SampleTerms | None = None


def delta_hat(model: nets.Model, problem: sde.Problem, batch: sde.PathBatch) -> np.ndarray:
    """g at the terminal state minus the model at the initial point, per path."""
    return problem.terminal(batch.terminal_states) - model.value(batch.xi, batch.tau)


def _step_direction(problem, batch, j, idx):
    """sigma(X_j, t_j) applied to the j-th Brownian increment, active rows only."""
    return problem.sigma_apply(batch.states[idx, j], batch.times[idx, j],
                               batch.incs[idx, j])


def _active_rows(problem: sde.Problem, batch: sde.PathBatch):
    """All live (sample, step) pairs flattened into one row batch.

    Rows come out sample-major with ascending steps inside each sample, so
    per-sample sums accumulate in step order.
    """
    k_idx, j_idx = np.nonzero(batch.dts > 0.0)
    x = batch.states[k_idx, j_idx]
    t = batch.times[k_idx, j_idx]
    w = problem.sigma_apply(x, t, batch.incs[k_idx, j_idx])
    return k_idx, j_idx, x, t, w


def s_hat(model: nets.Model, problem: sde.Problem, batch: sde.PathBatch) -> np.ndarray:
    """Left-endpoint Ito sum of (sigma^T grad_x u) . dW along each path."""
    k_idx, _, x, t, w = _active_rows(problem, batch)
    if k_idx.size == 0:
        return np.zeros(batch.size)
    _, dd = model.directional(x, t, w)
    return np.bincount(k_idx, weights=dd, minlength=batch.size)


def s_hat_gradnet(rmodel: nets.Model, problem: sde.Problem, batch: sde.PathBatch) -> np.ndarray:
    """Same sum with the gradient network's output in place of grad_x u."""
    k_idx, _, x, t, w = _active_rows(problem, batch)
    if k_idx.size == 0:
        return np.zeros(batch.size)
    rv = rmodel.value(x, t)
    return np.bincount(k_idx, weights=np.sum(rv * w, axis=1), minlength=batch.size)


def sample_terms(kind: str, problem: sde.Problem, model: nets.Model,
                 batch: sde.PathBatch, rmodel: nets.Model | None = None) -> SampleTerms:
    delta = delta_hat(model, problem, batch)
    if kind == "FK":
        return SampleTerms(delta, np.zeros_like(delta))
    if kind in GRADNET_KINDS:
        if rmodel is None:
            raise ValueError(f"loss kind '{kind}' needs a paired gradient network")
        return SampleTerms(delta, s_hat_gradnet(rmodel, problem, batch))
    return SampleTerms(delta, s_hat(model, problem, batch))


def loss_estimate(spec: LossSpec, problem: sde.Problem, model: nets.Model,
                  batch: sde.PathBatch, rmodel: nets.Model | None = None) -> float:
    """Monte Carlo loss value: mean over the batch of err^2."""
    if batch.size < 1:
        raise ValueError("empty batch")
    terms = sample_terms(spec.kind, problem, model, batch, rmodel)
    return float(np.mean(terms.err ** 2))


def grad_fk(model: nets.Model, problem: sde.Problem, batch: sde.PathBatch) -> GradientReport:
    """-2/K sum delta^(k) grad_theta u at the initial points; one reverse sweep."""
    terms = sample_terms("FK", problem, model, batch)
    k = batch.size
    with Tape() as tape:
        params = nets.bind_params(tape, model.spec, model.theta)
        u_var = nets.tape_value(tape, model.spec, params, batch.xi, batch.tau)
        grad = tape.backward([(u_var, (-2.0 / k) * terms.delta)], model.theta.size)
    return GradientReport(float(np.mean(terms.delta ** 2)), grad,
                          g1=grad.copy(), terms=terms)


def grad_bsde_detach(model: nets.Model, problem: sde.Problem,
                     batch: sde.PathBatch) -> GradientReport:
    """Direct term only: the integral stays inside err but is not differentiated."""
    terms = sample_terms("BSDE", problem, model, batch)
    err = terms.err
    k = batch.size
    with Tape() as tape:
        params = nets.bind_params(tape, model.spec, model.theta)
        u_var = nets.tape_value(tape, model.spec, params, batch.xi, batch.tau)
        grad = tape.backward([(u_var, (-2.0 / k) * err)], model.theta.size)
    return GradientReport(float(np.mean(err ** 2)), grad, g1=grad.copy(), terms=terms)


def grad_bsde(model: nets.Model, problem: sde.Problem, batch: sde.PathBatch) -> GradientReport:
    """Full gradient including the mixed second-order term of the integral.

    Every per-step directional derivative is recorded on one tape
    (forward-over-reverse), so tape size grows with the number of steps; the
    two-pass variant below trades compute to avoid that.
    """
    k = batch.size
    with Tape() as tape:
        params = nets.bind_params(tape, model.spec, model.theta)
        u_var = nets.tape_value(tape, model.spec, params, batch.xi, batch.tau)
        integral = np.zeros(k)
        step_vars = []
        for j in range(batch.dts.shape[1]):
            idx = np.flatnonzero(batch.dts[:, j] > 0.0)
            if idx.size == 0:
                continue
            w = _step_direction(problem, batch, j, idx)
            _, s_var = nets.tape_directional(tape, model.spec, params,
                                             batch.states[idx, j],
                                             batch.times[idx, j], w)
            integral[idx] += s_var.value
            step_vars.append((idx, s_var))
        delta = problem.terminal(batch.terminal_states) - u_var.value
        err = delta - integral
        seeds = [(u_var, (-2.0 / k) * err)]
        seeds += [(s_var, (-2.0 / k) * err[idx]) for idx, s_var in step_vars]
        grad = tape.backward(seeds, model.theta.size)
        g1 = tape.backward([(u_var, (-2.0 / k) * err)], model.theta.size)
    return GradientReport(float(np.mean(err ** 2)), grad, g1=g1,
                          terms=SampleTerms(delta, integral))


def grad_bsde_grad(model: nets.Model, rmodel: nets.Model, problem: sde.Problem,
                   batch: sde.PathBatch) -> GradientReport:
    """Gradients of the two-network loss w.r.t. both parameter vectors.

    The integral uses the gradient network's values directly, so no
    second-order derivatives appear anywhere.
    """
    k = batch.size
    p_u = model.theta.size
    with Tape() as tape:
        params_u = nets.bind_params(tape, model.spec, model.theta)
        params_r = nets.bind_params(tape, rmodel.spec, rmodel.theta, base_offset=p_u)
        u_var = nets.tape_value(tape, model.spec, params_u, batch.xi, batch.tau)
        integral = np.zeros(k)
        step_vars = []
        for j in range(batch.dts.shape[1]):
            idx = np.flatnonzero(batch.dts[:, j] > 0.0)
            if idx.size == 0:
                continue
            w = _step_direction(problem, batch, j, idx)
            r_var = nets.tape_value(tape, rmodel.spec, params_r,
                                    batch.states[idx, j], batch.times[idx, j])
            s_var = tape.inner_const(r_var, w)
            integral[idx] += s_var.value
            step_vars.append((idx, s_var))
        delta = problem.terminal(batch.terminal_states) - u_var.value
        err = delta - integral
        seeds = [(u_var, (-2.0 / k) * err)]
        seeds += [(s_var, (-2.0 / k) * err[idx]) for idx, s_var in step_vars]
        both = tape.backward(seeds, p_u + rmodel.theta.size)
    return GradientReport(float(np.mean(err ** 2)), both[:p_u], grad_r=both[p_u:],
                          g1=both[:p_u].copy(), terms=SampleTerms(delta, integral))


def _replay_batch(problem: sde.Problem, spec: LossSpec, step: int, seed: int,
                  zero_noise: bool, stream: str) -> sde.PathBatch:
    init_purpose, path_purpose = ("init", "path") if stream == "train" else \
        ("diag-init", "diag-path")
    initials = sde.sample_initial(problem, spec.batch_size,
                                  rng.generator(seed, init_purpose, step))
    return sde.simulate(problem, initials, spec.dt,
                        rng.generator(seed, path_purpose, step),
                        zero_noise=zero_noise, key=(seed, stream, step))


PASS2_ROW_BUDGET = 4096


def _pass2_chunks(k_idx, j_idx, batch_size):
    """Row slices for the second pass, ascending in step index.

    Each chunk carries at most max(batch, PASS2_ROW_BUDGET) rows, so peak tape
    size never grows with the number of steps, only with the batch.
    """
    order = np.argsort(j_idx, kind="stable")
    budget = max(batch_size, PASS2_ROW_BUDGET)
    return [order[lo:lo + budget] for lo in range(0, order.size, budget)]


def grad_bsde_eff(model: nets.Model, problem: sde.Problem, spec: LossSpec,
                  step: int, seed: int, zero_noise: bool = False,
                  stream: str = "train") -> GradientReport:
    """Two-pass gradient: cache errors, replay the batch, sweep stepwise.

    Pass 1 simulates, computes the sample errors with plain forward mode and
    the direct term with one small tape. Pass 2 re-simulates from the same
    random key (terminal states must match bit-for-bit) and accumulates the
    per-step integral gradients in ascending step order, recording only a
    bounded number of rows per tape; peak tape memory is therefore
    independent of the step count.
    """
    batch = _replay_batch(problem, spec, step, seed, zero_noise, stream)
    terms = sample_terms("BSDE", problem, model, batch)
    err = terms.err
    k = batch.size
    arrays = nets.unpack(model.spec, model.theta)
    with Tape() as tape:
        params = nets.bind_arrays(tape, model.spec, arrays)
        u_var = nets.tape_value(tape, model.spec, params, batch.xi, batch.tau)
        grad = tape.backward([(u_var, (-2.0 / k) * err)], model.theta.size)
    g1 = grad.copy()

    cached_terminal = batch.terminal_states.copy()
    replay = _replay_batch(problem, spec, step, seed, zero_noise, stream)
    if not (np.array_equal(replay.terminal_states, cached_terminal)
            and np.array_equal(replay.xi, batch.xi)):
        raise InternalConsistencyError(
            "replayed batch does not reproduce pass-1 states; rng keying is broken")
    k_idx, j_idx, x, t, w = _active_rows(problem, replay)
    for rows in _pass2_chunks(k_idx, j_idx, k):
        with Tape() as tape:
            params = nets.bind_arrays(tape, model.spec, arrays)
            _, s_var = nets.tape_directional(tape, model.spec, params,
                                             x[rows], t[rows], w[rows])
            grad += tape.backward([(s_var, (-2.0 / k) * err[k_idx[rows]])],
                                  model.theta.size)
    return GradientReport(float(np.mean(err ** 2)), grad, g1=g1, terms=terms)


def grad_bsde_grad_eff(model: nets.Model, rmodel: nets.Model, problem: sde.Problem,
                       spec: LossSpec, step: int, seed: int,
                       zero_noise: bool = False, stream: str = "train") -> GradientReport:
    """Two-pass version of the two-network gradient."""
    batch = _replay_batch(problem, spec, step, seed, zero_noise, stream)
    terms = sample_terms("BSDE-grad", problem, model, batch, rmodel)
    err = terms.err
    k = batch.size
    with Tape() as tape:
        params = nets.bind_params(tape, model.spec, model.theta)
        u_var = nets.tape_value(tape, model.spec, params, batch.xi, batch.tau)
        grad_u = tape.backward([(u_var, (-2.0 / k) * err)], model.theta.size)
    g1 = grad_u.copy()
    grad_r = np.zeros(rmodel.theta.size)

    cached_terminal = batch.terminal_states.copy()
    replay = _replay_batch(problem, spec, step, seed, zero_noise, stream)
    if not (np.array_equal(replay.terminal_states, cached_terminal)
            and np.array_equal(replay.xi, batch.xi)):
        raise InternalConsistencyError(
            "replayed batch does not reproduce pass-1 states; rng keying is broken")
    r_arrays = nets.unpack(rmodel.spec, rmodel.theta)
    k_idx, j_idx, x, t, w = _active_rows(problem, replay)
    for rows in _pass2_chunks(k_idx, j_idx, k):
        with Tape() as tape:
            params_r = nets.bind_arrays(tape, rmodel.spec, r_arrays)
            r_var = nets.tape_value(tape, rmodel.spec, params_r, x[rows], t[rows])
            s_var = tape.inner_const(r_var, w[rows])
            grad_r += tape.backward([(s_var, (-2.0 / k) * err[k_idx[rows]])],
                                    rmodel.theta.size)
    return GradientReport(float(np.mean(err ** 2)), grad_u, grad_r=grad_r,
                          g1=g1, terms=terms)


def gradient_step(spec: LossSpec, problem: sde.Problem, model: nets.Model,
                  rmodel: nets.Model | None, step: int, seed: int,
                  zero_noise: bool = False, stream: str = "train") -> GradientReport:
    """Sample a batch for (seed, step) and evaluate the configured estimator."""
    if spec.kind in GRADNET_KINDS and rmodel is None:
        raise ValueError(f"loss kind '{spec.kind}' needs a paired gradient network")
    if spec.kind == "BSDE-eff":
        return grad_bsde_eff(model, problem, spec, step, seed, zero_noise, stream)
    if spec.kind == "BSDE-grad-eff":
        return grad_bsde_grad_eff(model, rmodel, problem, spec, step, seed,
                                  zero_noise, stream)
    batch = _replay_batch(problem, spec, step, seed, zero_noise, stream)
    if spec.kind == "FK":
        return grad_fk(model, problem, batch)
    if spec.kind == "BSDE":
        return grad_bsde(model, problem, batch)
    if spec.kind == "BSDE-detach":
        return grad_bsde_detach(model, problem, batch)
    return grad_bsde_grad(model, rmodel, problem, batch)
