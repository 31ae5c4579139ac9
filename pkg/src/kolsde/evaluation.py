"""Reference solutions, evaluation metrics and variance diagnostics.

References come in three kinds. The heat problem has a closed form. The
Black-Scholes problem is evaluated pointwise by an inner Monte Carlo mean
over the exact terminal law. Separable problems (the double-well one) use a
tensor product of one-dimensional Crank-Nicolson solutions on a truncated
interval, with frozen Dirichlet boundaries; the truncation is justified by
how strongly the drift confines the paths.

Metrics follow the held-out protocol: fresh (xi, tau) from a dedicated
evaluation stream, squared value error (or squared gradient error) averaged
over them. Variance diagnostics rerun a loss estimator over independent
batches without touching the parameters and report loss mean/std plus the
per-coordinate gradient standard deviation and its maximum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import solve_banded

from . import _storage, losses, nets, rng, sde


class ConfigurationError(ValueError):
    """FD grid fails the stability heuristic or is otherwise unusable."""


@dataclass(frozen=True)
class Reference:
    """Pointwise evaluator for a problem's reference solution."""

    kind: str                                    # closed-form | mc-feynman-kac | fd-tensor-product | model
    value: Callable[[np.ndarray, np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    meta: dict = field(default_factory=dict)


def closed_form_heat(problem: sde.Problem) -> Reference:
    nu, d, horizon = problem.params["nu"], problem.d, problem.horizon

    def value(x, t):
        x = np.atleast_2d(x)
        return np.sum(x * x, axis=1) + d * nu ** 2 * (horizon - np.asarray(t))

    def grad(x, t):
        return 2.0 * np.atleast_2d(x)

    return Reference("closed-form", value, grad)


def _terminal_payoffs(problem: sde.Problem, x: np.ndarray, t: np.ndarray,
                      n_inner: int, gen: np.random.Generator) -> np.ndarray:
    """(B, n_inner) draws of g(X_T) from the exact terminal law given (x, t)."""
    x = np.atleast_2d(x)
    t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
    remaining = problem.horizon - t
    z = gen.standard_normal((x.shape[0], n_inner, problem.d))
    if problem.exact_kind == "heat":
        nu = problem.params["nu"]
        terminal = x[:, None, :] + nu * np.sqrt(remaining)[:, None, None] * z
    elif problem.exact_kind == "black-scholes":
        beta = problem.params["beta"]
        chol = problem.params["chol"]
        rate = problem.params["drift_rate"]
        noise = np.sqrt(remaining)[:, None, None] * (z @ chol.T)
        log_part = (rate - 0.5 * beta ** 2) * remaining[:, None, None] + beta * noise
        terminal = x[:, None, :] * np.exp(log_part)
    else:
        raise ValueError(f"no exact terminal law for problem '{problem.name}'")
    return problem.terminal(terminal.reshape(-1, problem.d)).reshape(x.shape[0], n_inner)


def mc_reference(problem: sde.Problem, n_inner: int = 1 << 12, seed: int = 0) -> Reference:
    """Pointwise inner Monte Carlo mean of g(X_T); no gradient evaluator."""

    def value(x, t):
        x = np.atleast_2d(x)
        out = np.empty(x.shape[0])
        chunk = max(1, (1 << 20) // max(n_inner, 1))
        for lo in range(0, x.shape[0], chunk):
            hi = min(lo + chunk, x.shape[0])
            gen = rng.generator(seed, "ref", lo)
            payoff = _terminal_payoffs(problem, x[lo:hi],
                                       np.asarray(t)[lo:hi] if np.ndim(t) else t,
                                       n_inner, gen)
            out[lo:hi] = payoff.mean(axis=1)
        return out

    return Reference("mc-feynman-kac", value, None, {"n_inner": n_inner, "seed": seed})


# -- one-dimensional Crank-Nicolson reference --------------------------------
@dataclass(frozen=True)
class GridSpec:
    half_width: float = 6.0
    n_x: int = 1000
    n_t: int = 1000

    def __post_init__(self):
        if self.half_width <= 0 or self.n_x < 4 or self.n_t < 1:
            raise ConfigurationError("degenerate FD grid")


@dataclass(frozen=True)
class Fd1dTable:
    """Time-indexed table of the 1-D solution with bilinear interpolation."""

    xs: np.ndarray          # (n_x + 1,)
    ts: np.ndarray          # (n_t + 1,) forward time, ascending to the horizon
    vals: np.ndarray        # (n_t + 1, n_x + 1)
    horizon: float

    def _locate(self, grid, q):
        q = np.clip(q, grid[0], grid[-1])
        i = np.clip(np.searchsorted(grid, q, side="right") - 1, 0, len(grid) - 2)
        w = (q - grid[i]) / (grid[i + 1] - grid[i])
        return i, w

    def _interp(self, table, x, t):
        ix, wx = self._locate(self.xs, np.asarray(x, dtype=float))
        it, wt = self._locate(self.ts, np.asarray(t, dtype=float))
        v00 = table[it, ix]
        v01 = table[it, ix + 1]
        v10 = table[it + 1, ix]
        v11 = table[it + 1, ix + 1]
        return ((1 - wt) * ((1 - wx) * v00 + wx * v01)
                + wt * ((1 - wx) * v10 + wx * v11))

    def value1(self, x, t):
        return self._interp(self.vals, x, t)

    def deriv1(self, x, t):
        return self._interp(self._dvals, x, t)

    @property
    def _dvals(self):
        if not hasattr(self, "_dvals_cache"):
            object.__setattr__(self, "_dvals_cache", np.gradient(self.vals, self.xs, axis=1))
        return self._dvals_cache

    def tensor_value(self, x, t):
        """Product over coordinates, for separable problems."""
        x = np.atleast_2d(x)
        t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        parts = self.value1(x, t[:, None])
        return np.prod(parts, axis=1)

    def tensor_grad(self, x, t):
        x = np.atleast_2d(x)
        t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        parts = self.value1(x, t[:, None])
        derivs = self.deriv1(x, t[:, None])
        prod = np.prod(parts, axis=1)
        return derivs * (prod[:, None] / parts)


def fd_reference_1d(psi: Callable[[np.ndarray], np.ndarray],
                    g1: Callable[[np.ndarray], np.ndarray],
                    horizon: float, grid: GridSpec = GridSpec()) -> Fd1dTable:
    """Crank-Nicolson solve of  d_t V + 1/2 d_xx V - psi'(x) d_x V = 0
    backward from V(., T) = g1 on [-M, M] with frozen Dirichlet boundaries.

    psi' is taken by central differences of the supplied potential. The grid
    must keep the cell Peclet number |psi'| dx below 2 or the advection term
    would produce spurious oscillations (raises ConfigurationError).
    """
    xs = np.linspace(-grid.half_width, grid.half_width, grid.n_x + 1)
    dx = xs[1] - xs[0]
    psi_vals = np.asarray(psi(xs), dtype=float)
    psi_prime = np.gradient(psi_vals, xs)
    peclet = np.max(np.abs(psi_prime)) * dx
    if peclet > 2.0:
        raise ConfigurationError(
            f"grid too coarse: cell Peclet {peclet:.2f} > 2; raise n_x or shrink the domain")

    n = grid.n_x + 1
    dt_back = horizon / grid.n_t
    diff = 0.5 / dx ** 2
    adv = psi_prime / (2.0 * dx)
    lower = diff + adv          # coefficient of V_{i-1}
    center = np.full(n, -2.0 * diff)
    upper = diff - adv          # coefficient of V_{i+1}

    # banded (I - dt/2 A) with identity boundary rows
    ab = np.zeros((3, n))
    ab[0, 2:] = -0.5 * dt_back * upper[1:-1]
    ab[1, :] = 1.0 - 0.5 * dt_back * center
    ab[1, 0] = ab[1, -1] = 1.0
    ab[2, :-2] = -0.5 * dt_back * lower[1:-1]

    levels = np.empty((grid.n_t + 1, n))
    v = np.asarray(g1(xs), dtype=float)
    levels[grid.n_t] = v
    for k in range(grid.n_t - 1, -1, -1):
        rhs = v.copy()
        rhs[1:-1] += 0.5 * dt_back * (lower[1:-1] * v[:-2]
                                      + center[1:-1] * v[1:-1]
                                      + upper[1:-1] * v[2:])
        v = solve_banded((1, 1), ab, rhs)
        levels[k] = v
    ts = np.linspace(0.0, horizon, grid.n_t + 1)
    return Fd1dTable(xs, ts, levels, horizon)


def save_table(path, table: Fd1dTable) -> None:
    header = {"kind": "fd-table", "half_width": float(table.xs[-1]),
              "n_x": len(table.xs) - 1, "n_t": len(table.ts) - 1,
              "horizon": table.horizon}
    _storage.write_array(path, header, table.vals)


def load_table(path) -> Fd1dTable:
    header, vals = _storage.read_array(path)
    if header.get("kind") != "fd-table":
        raise ValueError(f"{path}: not an FD reference table")
    xs = np.linspace(-header["half_width"], header["half_width"], header["n_x"] + 1)
    ts = np.linspace(0.0, header["horizon"], header["n_t"] + 1)
    return Fd1dTable(xs, ts, vals, header["horizon"])


def doublewell_psi1(problem: sde.Problem) -> Callable[[np.ndarray], np.ndarray]:
    well = problem.params["well"]
    return lambda x: well * (x * x - 1.0) ** 2


def doublewell_g1(problem: sde.Problem) -> Callable[[np.ndarray], np.ndarray]:
    decay = problem.params["decay"]
    return lambda x: np.exp(-decay * (x - 1.0) ** 2)


def doublewell_potential(problem: sde.Problem) -> Callable[[np.ndarray], np.ndarray]:
    well = problem.params["well"]
    return lambda x: well * np.sum((np.atleast_2d(x) ** 2 - 1.0) ** 2, axis=1)


def fd_tensor_reference(problem: sde.Problem, table: Fd1dTable | None = None,
                        grid: GridSpec = GridSpec()) -> Reference:
    if table is None:
        table = fd_reference_1d(doublewell_psi1(problem), doublewell_g1(problem),
                                problem.horizon, grid)
    return Reference("fd-tensor-product", table.tensor_value, table.tensor_grad,
                     {"table": table})


def make_reference(problem: sde.Problem, n_inner: int = 1 << 12, seed: int = 0,
                   table: Fd1dTable | None = None) -> Reference:
    """The reference kind the problem declares, built with desk-scale defaults."""
    if problem.reference_kind == "closed-form":
        return closed_form_heat(problem)
    if problem.reference_kind == "mc-feynman-kac":
        return mc_reference(problem, n_inner, seed)
    return fd_tensor_reference(problem, table)


def model_reference(model: nets.Model) -> Reference:
    """Adapt a trained model to the evaluator interface used downstream."""
    if not nets.is_scalar(model.spec):
        return Reference("model", model.value, None)
    return Reference("model", model.value, lambda x, t: model.grad_x(x, t))


# -- metrics ------------------------------------------------------------------
def _eval_points(problem: sde.Problem, n_samples: int, seed: int):
    return sde.sample_initial(problem, n_samples, rng.generator(seed, "eval", 0))


def mse_eval(problem: sde.Problem, model: nets.Model, reference: Reference,
             n_samples: int, seed: int) -> float:
    """Mean squared value error on fresh evaluation points."""
    x, t = _eval_points(problem, n_samples, seed)
    return float(np.mean((reference.value(x, t) - model.value(x, t)) ** 2))


def mse_grad_eval(problem: sde.Problem, model: nets.Model, reference: Reference,
                  n_samples: int, seed: int) -> float:
    """Mean squared spatial-gradient error; gradient networks are compared
    by their values, scalar models by their forward-mode gradient."""
    if reference.grad is None:
        raise ValueError(f"reference kind '{reference.kind}' has no gradient evaluator")
    x, t = _eval_points(problem, n_samples, seed)
    if nets.is_scalar(model.spec):
        approx = model.grad_x(x, t)
    else:
        approx = model.value(x, t)
    return float(np.mean(np.sum((reference.grad(x, t) - approx) ** 2, axis=1)))


def eval_loss_mc(problem: sde.Problem, model: nets.Model, n_samples: int,
                 n_inner: int, seed: int, dt: float = 1e-2,
                 control_variate: bool = False) -> tuple[float, float]:
    """Monte Carlo estimate of the squared-conditional-mean loss.

    Per evaluation point the inner mean of the terminal mismatch is taken
    over `n_inner` paths; with ``control_variate`` the discretized stochastic
    integral of the model is subtracted inside the inner mean (zero-mean, so
    the estimate stays unbiased while the inner variance shrinks when the
    model is close). Returns (value, standard error of the outer mean).
    """
    x, t = _eval_points(problem, n_samples, seed)
    u_vals = model.value(x, t)
    per_point = np.empty(n_samples)
    chunk = max(1, (1 << 16) // max(n_inner, 1))
    for lo in range(0, n_samples, chunk):
        hi = min(lo + chunk, n_samples)
        rows = hi - lo
        rep_x = np.repeat(x[lo:hi], n_inner, axis=0)
        rep_t = np.repeat(t[lo:hi], n_inner)
        batch = sde.simulate(problem, (rep_x, rep_t), dt,
                             rng.generator(seed, "ref", lo))
        delta = problem.terminal(batch.terminal_states) - np.repeat(u_vals[lo:hi], n_inner)
        if control_variate:
            delta = delta - losses.s_hat(model, problem, batch)
        per_point[lo:hi] = delta.reshape(rows, n_inner).mean(axis=1)
    sq = per_point ** 2
    return float(sq.mean()), float(sq.std(ddof=1) / np.sqrt(n_samples))


@dataclass
class VarianceDiagnostics:
    loss_kind: str
    batch_size: int
    n_batches: int
    loss_mean: float
    loss_std: float
    grad_std: np.ndarray
    grad_std_max: float
    grad_r_std_max: float | None = None


def variance_diagnostics(spec: losses.LossSpec, problem: sde.Problem,
                         model: nets.Model, rmodel: nets.Model | None,
                         n_batches: int, seed: int,
                         batch_order: list[int] | None = None,
                         zero_noise: bool = False) -> VarianceDiagnostics:
    """Loss and gradient spread over independent batches, parameters frozen.

    Batches are keyed individually, so any execution order gives identical
    results; ``batch_order`` exists to let tests check exactly that.
    """
    if n_batches < 2:
        raise ValueError("need at least two batches for a standard deviation")
    order = list(range(n_batches)) if batch_order is None else list(batch_order)
    loss_values = np.empty(n_batches)
    grads = np.empty((n_batches, model.theta.size))
    grads_r = np.empty((n_batches, rmodel.theta.size)) if rmodel is not None else None
    for b in order:
        report = losses.gradient_step(spec, problem, model, rmodel, b, seed,
                                      zero_noise=zero_noise, stream="diag")
        loss_values[b] = report.loss
        grads[b] = report.grad
        if grads_r is not None:
            grads_r[b] = report.grad_r
    grad_std = grads.std(axis=0, ddof=1)
    return VarianceDiagnostics(
        loss_kind=spec.kind, batch_size=spec.batch_size, n_batches=n_batches,
        loss_mean=float(loss_values.mean()),
        loss_std=float(loss_values.std(ddof=1)),
        grad_std=grad_std,
        grad_std_max=float(grad_std.max()),
        grad_r_std_max=(float(grads_r.std(axis=0, ddof=1).max())
                        if grads_r is not None else None),
    )


# -- tilted potential and optimal control -------------------------------------
def hjb_postprocess(evaluator: Reference, problem: sde.Problem):
    """Tilted potential and optimal control from a positive value evaluator.

    With unit noise the log transform gives  Psi*(x, t) = Psi(x) - log V(x, t)
    and the control grad log V = grad V / V. Queries where V <= 0 raise,
    since the log transform is only defined there.
    """
    potential = doublewell_potential(problem)

    def values(x, t):
        v = evaluator.value(np.atleast_2d(x), t)
        if np.any(v <= 0.0):
            raise ValueError("value evaluator is not positive; log transform undefined")
        return v

    def psi_star(x, t):
        return potential(x) + (-np.log(values(x, t)))

    if evaluator.grad is None:
        return psi_star, None

    def control(x, t):
        v = values(x, t)
        return evaluator.grad(np.atleast_2d(x), t) / v[:, None]

    return psi_star, control


def heat_integral_closed_form(problem: sde.Problem, batch: sde.PathBatch) -> np.ndarray:
    """Exact stochastic integral of the heat solution from total increments."""
    nu, d = problem.params["nu"], problem.d
    dw = batch.incs.sum(axis=1)
    remaining = problem.horizon - batch.tau
    return (2.0 * nu * np.sum(batch.xi * dw, axis=1)
            + nu ** 2 * (np.sum(dw * dw, axis=1) - d * remaining))
