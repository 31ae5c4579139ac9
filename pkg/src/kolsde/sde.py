"""Problem definitions and the Euler-Maruyama path simulator.

A :class:`Problem` bundles the coefficients of one linear Kolmogorov PDE,
its terminal condition, the initial-point distribution and which kind of
reference solution exists for it. :func:`simulate` discretizes the forward
SDE on a per-sample grid anchored at the random initial time, with interior
steps of fixed length and a shrunken final step that lands on the horizon
exactly. All randomness is drawn in one tensor per (seed, purpose, step)
key, so a batch replays bit-for-bit and samples are independent of
scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng

DIVERGENCE_LIMIT = 1e8


class SimulationDivergedError(RuntimeError):
    def __init__(self, sample: int, step: int):
        super().__init__(f"state blew up past {DIVERGENCE_LIMIT:g} "
                         f"(sample {sample}, step {step})")
        self.sample = sample
        self.step = step


@dataclass(frozen=True)
class Problem:
    name: str
    d: int
    horizon: float
    drift: Callable[[np.ndarray, np.ndarray], np.ndarray] | None   # None: zero drift
    sigma_apply: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    terminal: Callable[[np.ndarray], np.ndarray]
    sample_initial_fn: Callable[[int, np.random.Generator], tuple[np.ndarray, np.ndarray]]
    reference_kind: str                  # closed-form | mc-feynman-kac | fd-tensor-product
    exact_kind: str | None = None        # heat | black-scholes when closed-form paths exist
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PathBatch:
    """K discretized trajectories plus everything needed to recompute them."""

    xi: np.ndarray        # (K, d)
    tau: np.ndarray       # (K,)
    n_steps: np.ndarray   # (K,) number of steps J per sample
    times: np.ndarray     # (K, J_max + 1), frozen at the horizon past J
    dts: np.ndarray       # (K, J_max), zero past J
    states: np.ndarray    # (K, J_max + 1, d), frozen at the terminal state past J
    incs: np.ndarray      # (K, J_max, d) Brownian increments, zero past J
    key: tuple | None = None

    @property
    def size(self) -> int:
        return self.xi.shape[0]

    @property
    def terminal_states(self) -> np.ndarray:
        return self.states[:, -1]


def sample_initial(problem: Problem, count: int,
                   gen: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """i.i.d. draws of (xi, tau) from the problem's initial distribution."""
    if count < 1:
        raise ValueError("need at least one sample")
    return problem.sample_initial_fn(count, gen)


def _grids(horizon: float, tau: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not 0.0 < dt <= horizon:
        raise ValueError(f"dt must lie in (0, {horizon}]")
    remaining = horizon - tau
    n = np.ceil(remaining / dt).astype(int)
    # one-ulp guards around exact multiples of dt
    n = np.where((remaining - (n - 1) * dt) <= 0.0, np.maximum(n - 1, 0), n)
    n = np.where((remaining - n * dt) > 0.0, n + 1, n)
    j_max = int(n.max()) if n.size else 0
    steps = np.arange(j_max + 1)
    times = tau[:, None] + steps[None, :] * dt
    times = np.minimum(times, horizon)
    times[steps[None, :] >= n[:, None]] = horizon
    return n, times, np.diff(times, axis=1)


def simulate(problem: Problem, initials: tuple[np.ndarray, np.ndarray], dt: float,
             gen: np.random.Generator, zero_noise: bool = False,
             key: tuple | None = None) -> PathBatch:
    """Euler-Maruyama batch from the given initial points.

    ``zero_noise`` replaces the normal draws by zeros (test hook). Frozen
    samples (past their own horizon) advance with zero step length, which
    leaves them untouched.
    """
    xi, tau = initials
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    tau = np.asarray(tau, dtype=float)
    n, times, dts = _grids(problem.horizon, tau, dt)
    count, j_max = xi.shape[0], dts.shape[1]
    zeta = np.zeros((count, j_max, problem.d)) if zero_noise else \
        gen.standard_normal((count, j_max, problem.d))
    incs = np.sqrt(dts)[:, :, None] * zeta
    states = np.empty((count, j_max + 1, problem.d))
    states[:, 0] = xi
    for j in range(j_max):
        x, t = states[:, j], times[:, j]
        nxt = x + problem.sigma_apply(x, t, incs[:, j])
        if problem.drift is not None:
            nxt += problem.drift(x, t) * dts[:, j, None]
        extreme = np.abs(nxt).max(axis=1)
        if not np.all(extreme <= DIVERGENCE_LIMIT):   # catches NaN too
            bad = ~(extreme <= DIVERGENCE_LIMIT)
            raise SimulationDivergedError(int(np.argmax(bad)), j)
        states[:, j + 1] = nxt
    return PathBatch(xi, tau, n, times, dts, states, incs, key)


def exact_paths(problem: Problem, initials: tuple[np.ndarray, np.ndarray], dt: float,
                gen: np.random.Generator, zero_noise: bool = False,
                key: tuple | None = None) -> PathBatch:
    """Grid states sampled from the closed-form path law, same increments
    as :func:`simulate` would use under the same generator."""
    if problem.exact_kind not in ("heat", "black-scholes"):
        raise ValueError(f"no closed-form paths for problem '{problem.name}'")
    xi, tau = initials
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    tau = np.asarray(tau, dtype=float)
    n, times, dts = _grids(problem.horizon, tau, dt)
    count, j_max = xi.shape[0], dts.shape[1]
    zeta = np.zeros((count, j_max, problem.d)) if zero_noise else \
        gen.standard_normal((count, j_max, problem.d))
    incs = np.sqrt(dts)[:, :, None] * zeta
    states = np.empty((count, j_max + 1, problem.d))
    states[:, 0] = xi
    if problem.exact_kind == "heat":
        nu = problem.params["nu"]
        np.cumsum(nu * incs, axis=1, out=states[:, 1:])
        states[:, 1:] += xi[:, None, :]
    else:
        beta = problem.params["beta"]
        chol = problem.params["chol"]
        rate = problem.params["drift_rate"]
        log_inc = (rate - 0.5 * beta ** 2)[None, None, :] * dts[:, :, None] \
            + beta[None, None, :] * (incs @ chol.T)
        states[:, 1:] = xi[:, None, :] * np.exp(np.cumsum(log_inc, axis=1))
    return PathBatch(xi, tau, n, times, dts, states, incs, key)


def simulate_terminal(problem: Problem, initials: tuple[np.ndarray, np.ndarray],
                      dt: float, gen: np.random.Generator,
                      exact_too: bool = False) -> tuple[np.ndarray, np.ndarray | None]:
    """Euler-Maruyama terminal states without storing trajectories.

    Draws one (K, d) normal block per step (replayable under the same
    generator key), so very large batches fit in memory. With ``exact_too``
    the closed-form path law is advanced through the same increments and its
    terminal state returned alongside, which makes weak-error comparisons
    share their randomness.
    """
    xi, tau = initials
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    tau = np.asarray(tau, dtype=float)
    n, times, dts = _grids(problem.horizon, tau, dt)
    count, j_max = xi.shape[0], dts.shape[1]
    x = xi.copy()
    exact: np.ndarray | None = None
    log_exact = None
    if exact_too:
        if problem.exact_kind == "heat":
            exact = xi.copy()
        elif problem.exact_kind == "black-scholes":
            log_exact = np.zeros_like(xi)
        else:
            raise ValueError(f"no closed-form paths for problem '{problem.name}'")
    for j in range(j_max):
        inc = np.sqrt(dts[:, j])[:, None] * gen.standard_normal((count, problem.d))
        t = times[:, j]
        step = problem.sigma_apply(x, t, inc)
        if problem.drift is not None:
            step += problem.drift(x, t) * dts[:, j, None]
        x = x + step
        extreme = np.abs(x).max(axis=1)
        if not np.all(extreme <= DIVERGENCE_LIMIT):
            bad = ~(extreme <= DIVERGENCE_LIMIT)
            raise SimulationDivergedError(int(np.argmax(bad)), j)
        if exact is not None:
            exact += problem.params["nu"] * inc
        elif log_exact is not None:
            beta = problem.params["beta"]
            log_exact += (problem.params["drift_rate"] - 0.5 * beta ** 2) \
                * dts[:, j, None] + beta * (inc @ problem.params["chol"].T)
    if log_exact is not None:
        exact = xi * np.exp(log_exact)
    return x, exact


def _uniform_sampler(low, high, horizon, d):
    low = np.broadcast_to(np.asarray(low, dtype=float), (d,))
    high = np.broadcast_to(np.asarray(high, dtype=float), (d,))

    def sampler(count, gen):
        xi = gen.uniform(low, high, size=(count, d))
        tau = gen.uniform(0.0, horizon, size=count)
        return xi, tau

    return sampler


def _point_sampler(x0, tau0, d):
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (d,)).copy()

    def sampler(count, gen):
        return np.tile(x0, (count, 1)), np.full(count, float(tau0))

    return sampler


_DEFAULTS = {
    "heat": dict(d=50, horizon=1.0, nu=0.5, x_low=-0.5, x_high=0.5),
    "black-scholes": dict(d=50, horizon=1.0, drift_rate=-0.05, strike=5.5,
                          x_low=4.5, x_high=5.5, beta=None),
    "hjb-doublewell": dict(d=10, horizon=1.0, well=0.1, decay=0.04,
                           x_low=-2.5, x_high=2.5),
}


def make_problem(name: str, **overrides) -> Problem:
    """Named problem with its default configuration, fields overridable.

    heat: zero drift, sigma = nu*Id, terminal |x|^2. black-scholes: rainbow
    put max(0, strike - min_i x_i) on correlated geometric Brownian motions.
    hjb-doublewell: drift -grad(Psi) for the double-well potential, unit
    noise, Gaussian-bump terminal centred at the all-ones well.

    `x_point`/`tau_point` overrides install a point-mass initial sampler.
    """
    if name not in _DEFAULTS:
        raise ValueError(f"unknown problem '{name}'")
    cfg = dict(_DEFAULTS[name])
    x_point = overrides.pop("x_point", None)
    tau_point = overrides.pop("tau_point", 0.0)
    for k, v in overrides.items():
        if k not in cfg:
            raise ValueError(f"invalid override '{k}' for problem '{name}'")
        cfg[k] = v
    d, horizon = int(cfg["d"]), float(cfg["horizon"])
    if x_point is not None:
        sampler = _point_sampler(x_point, tau_point, d)
    else:
        sampler = _uniform_sampler(cfg["x_low"], cfg["x_high"], horizon, d)

    if name == "heat":
        nu = float(cfg["nu"])
        return Problem(
            name, d, horizon,
            drift=None,
            sigma_apply=lambda x, t, v: nu * v,
            terminal=lambda x: np.sum(x * x, axis=-1),
            sample_initial_fn=sampler,
            reference_kind="closed-form",
            exact_kind="heat",
            params={"nu": nu},
        )

    if name == "black-scholes":
        rate, strike = float(cfg["drift_rate"]), float(cfg["strike"])
        if cfg["beta"] is None:
            beta = 0.1 + np.arange(1, d + 1) / (2.0 * d)
        else:
            beta = np.broadcast_to(np.asarray(cfg["beta"], dtype=float), (d,)).copy()
        corr = 0.5 * (1.0 + np.eye(d))
        try:
            chol = np.linalg.cholesky(corr)
        except np.linalg.LinAlgError as exc:
            raise ValueError("correlation matrix is not positive definite") from exc

        def sigma_apply(x, t, v):
            return beta * x * (v @ chol.T)

        return Problem(
            name, d, horizon,
            drift=lambda x, t: rate * x,
            sigma_apply=sigma_apply,
            terminal=lambda x: np.maximum(strike - np.min(x, axis=-1), 0.0),
            sample_initial_fn=sampler,
            reference_kind="mc-feynman-kac",
            exact_kind="black-scholes",
            params={"drift_rate": rate, "strike": strike, "beta": beta,
                    "corr": corr, "chol": chol},
        )

    well, decay = float(cfg["well"]), float(cfg["decay"])

    def drift(x, t):
        return -4.0 * well * x * (x * x - 1.0)

    return Problem(
        name, d, horizon,
        drift=drift,
        sigma_apply=lambda x, t, v: v,
        terminal=lambda x: np.exp(-decay * np.sum((x - 1.0) ** 2, axis=-1)),
        sample_initial_fn=sampler,
        reference_kind="fd-tensor-product",
        params={"well": well, "decay": decay},
    )


def batch_keys(seed: int, step: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Generators for one training batch: initial points and path noise."""
    return rng.generator(seed, "init", step), rng.generator(seed, "path", step)
