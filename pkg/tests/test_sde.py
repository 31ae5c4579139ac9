import numpy as np
import pytest

from kolsde import rng, sde


def heat(d=10, **kw):
    return sde.make_problem("heat", d=d, **kw)


def test_sample_initial_ranges():
    problem = sde.make_problem("heat")
    xi, tau = sde.sample_initial(problem, 2000, rng.generator(0, "init", 0))
    assert xi.shape == (2000, 50) and tau.shape == (2000,)
    assert xi.min() >= -0.5 and xi.max() <= 0.5
    assert tau.min() >= 0.0 and tau.max() <= 1.0

    bs = sde.make_problem("black-scholes")
    xi, tau = sde.sample_initial(bs, 500, rng.generator(0, "init", 1))
    assert xi.min() >= 4.5 and xi.max() <= 5.5


def test_point_mass_sampler():
    problem = heat(d=3, x_point=[1.0, 2.0, 3.0], tau_point=0.0)
    xi, tau = sde.sample_initial(problem, 5, rng.generator(0, "init", 0))
    assert np.array_equal(xi, np.tile([1.0, 2.0, 3.0], (5, 1)))
    assert np.array_equal(tau, np.zeros(5))


def test_zero_noise_heat_path_is_constant():
    problem = heat(d=4, x_point=[0.5, -0.5, 1.0, 0.0])
    initials = sde.sample_initial(problem, 3, rng.generator(0, "init", 0))
    batch = sde.simulate(problem, initials, 0.25, rng.generator(0, "path", 0),
                         zero_noise=True)
    assert np.array_equal(batch.states[:, -1], batch.xi)
    assert np.all(batch.n_steps == 4)


def test_heat_em_step_formula():
    # X_{j+1} = X_j + nu sqrt(dt) zeta: replay the same normals and compare
    problem = heat(d=3, nu=0.5, x_point=[0.0, 0.0, 0.0])
    initials = sde.sample_initial(problem, 2, rng.generator(9, "init", 0))
    batch = sde.simulate(problem, initials, 0.25, rng.generator(9, "path", 0))
    zeta = rng.generator(9, "path", 0).standard_normal((2, 4, 3))
    manual = np.zeros((2, 3))
    for j in range(4):
        manual = manual + 0.5 * np.sqrt(0.25) * zeta[:, j]
    assert np.allclose(batch.states[:, -1], manual, atol=1e-15)


def test_replay_is_bitwise():
    problem = sde.make_problem("black-scholes", d=6)
    initials = sde.sample_initial(problem, 16, rng.generator(3, "init", 5))
    a = sde.simulate(problem, initials, 1e-2, rng.generator(3, "path", 5))
    initials2 = sde.sample_initial(problem, 16, rng.generator(3, "init", 5))
    b = sde.simulate(problem, initials2, 1e-2, rng.generator(3, "path", 5))
    assert np.array_equal(a.xi, b.xi)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.incs, b.incs)


def test_grid_consistency():
    problem = heat(d=2)
    initials = sde.sample_initial(problem, 512, rng.generator(1, "init", 0))
    batch = sde.simulate(problem, initials, 1e-2, rng.generator(1, "path", 0))
    total = batch.dts.sum(axis=1)
    assert np.max(np.abs(total - (1.0 - batch.tau))) <= np.finfo(float).eps
    # interior steps equal dt, final step in (0, dt]
    for k in (0, 5, 100):
        n = batch.n_steps[k]
        assert batch.times[k, 0] == batch.tau[k]
        assert batch.times[k, n] == 1.0
        assert np.allclose(batch.dts[k, :n - 1], 1e-2, atol=1e-12)
        assert 0.0 < batch.dts[k, n - 1] <= 1e-2 + 1e-12
        assert np.all(batch.dts[k, n:] == 0.0)
    assert np.array_equal(batch.n_steps, np.ceil((1.0 - batch.tau) / 1e-2 - 1e-12).astype(int))


def test_bs_em_close_to_exact_representation():
    # single sample, shared increments, per-coordinate relative error O(dt)
    problem = sde.make_problem("black-scholes", d=5, x_point=np.full(5, 5.0))
    initials = sde.sample_initial(problem, 1, rng.generator(4, "init", 0))
    em = sde.simulate(problem, initials, 1e-3, rng.generator(4, "path", 0))
    exact = sde.exact_paths(problem, initials, 1e-3, rng.generator(4, "path", 0))
    assert np.array_equal(em.incs, exact.incs)
    rel = np.abs(em.states[0, -1] - exact.states[0, -1]) / np.abs(exact.states[0, -1])
    assert np.max(rel) <= 1e-2


def test_exact_paths_heat_terminal_moment():
    # X_T = 0.5 W_1 from the origin: E|X_T|^2 = 0.25 d
    d = 8
    problem = heat(d=d, x_point=np.zeros(d))
    initials = sde.sample_initial(problem, 120_000, rng.generator(8, "init", 0))
    batch = sde.exact_paths(problem, initials, 0.5, rng.generator(8, "path", 0))
    values = problem.terminal(batch.states[:, -1])
    se = values.std(ddof=1) / np.sqrt(len(values))
    assert abs(values.mean() - 0.25 * d) <= 3 * se


def test_exact_paths_degenerate_cases():
    d = 3
    frozen = heat(d=d, nu=0.0, x_point=np.ones(d))
    initials = sde.sample_initial(frozen, 4, rng.generator(0, "init", 0))
    batch = sde.exact_paths(frozen, initials, 0.25, rng.generator(0, "path", 0))
    assert np.array_equal(batch.states[:, -1], np.ones((4, d)))

    ode = sde.make_problem("black-scholes", d=d, beta=0.0, x_point=np.full(d, 2.0))
    initials = sde.sample_initial(ode, 4, rng.generator(0, "init", 1))
    batch = sde.exact_paths(ode, initials, 0.25, rng.generator(0, "path", 1))
    want = 2.0 * np.exp(-0.05 * 1.0)
    assert np.allclose(batch.states[:, -1], want, atol=1e-14)

    hjb = sde.make_problem("hjb-doublewell")
    with pytest.raises(ValueError):
        sde.exact_paths(hjb, sde.sample_initial(hjb, 1, rng.generator(0, "init", 2)),
                        0.5, rng.generator(0, "path", 2))


def test_cholesky_reconstructs_correlation():
    problem = sde.make_problem("black-scholes")
    chol, corr = problem.params["chol"], problem.params["corr"]
    assert np.max(np.abs(chol @ chol.T - corr)) <= 1e-12


def test_payoffs_and_terminals():
    bs = sde.make_problem("black-scholes")
    assert bs.terminal(np.full((1, 50), 5.0))[0] == pytest.approx(0.5)
    assert bs.terminal(np.full((1, 50), 6.0))[0] == 0.0
    hjb = sde.make_problem("hjb-doublewell")
    assert hjb.terminal(np.ones((1, 10)))[0] == 1.0


def test_unknown_problem_and_override():
    with pytest.raises(ValueError):
        sde.make_problem("wave")
    with pytest.raises(ValueError):
        sde.make_problem("heat", stiffness=2.0)


def test_divergence_guard():
    problem = sde.make_problem("black-scholes", d=2, drift_rate=1e12,
                               x_point=[5.0, 5.0])
    initials = sde.sample_initial(problem, 2, rng.generator(0, "init", 0))
    with pytest.raises(sde.SimulationDivergedError):
        sde.simulate(problem, initials, 0.5, rng.generator(0, "path", 0))


def test_tau_equal_horizon_degenerates():
    problem = heat(d=2, x_point=[1.0, 1.0], tau_point=1.0)
    initials = sde.sample_initial(problem, 3, rng.generator(0, "init", 0))
    batch = sde.simulate(problem, initials, 0.1, rng.generator(0, "path", 0))
    assert np.all(batch.n_steps == 0)
    assert np.array_equal(batch.states[:, -1], batch.xi)
