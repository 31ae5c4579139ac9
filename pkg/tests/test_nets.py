import numpy as np
import pytest

from kolsde import nets


def test_init_deterministic_per_seed():
    spec = nets.multilevel(d=5, levels=3, q=3)
    a = nets.init_params(spec, 42)
    b = nets.init_params(spec, 42)
    c = nets.init_params(spec, 43)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_polynomial_heat_starts_at_zero():
    spec = nets.polynomial_heat(d=7)
    assert np.array_equal(nets.init_params(spec, 123), np.zeros(3))


def test_param_count_layer_arithmetic():
    # d=10, widths (30, 30): (11*30+30) + (30*30+30) + (30*1+1) = 1321
    spec = nets.ModelSpec("feedforward-residual", 11, 1, (30, 30))
    assert nets.param_count(spec) == 1321
    offsets = nets.layout(spec)
    total = sum(int(np.prod(s)) for _, _, s in offsets)
    assert total == 1321  # layout partitions the vector exactly


def test_polynomial_matches_heat_solution_value():
    # d=50, nu=0.5: V(0, 0) = Trace(nu^2 Id) * (T - 0) = 0.25 * 50 = 12.5
    spec = nets.polynomial_heat(d=50, horizon=1.0)
    theta = np.array([1.0, 12.5, 0.0])
    value = nets.model_value(spec, theta, np.zeros((1, 50)), 0.0)
    assert value[0] == pytest.approx(12.5, abs=1e-14)
    # terminal condition: t = T reduces to |x|^2
    x = np.zeros((1, 50))
    x[0, 0] = np.sqrt(2.0)
    assert nets.model_value(spec, theta, x, 1.0)[0] == pytest.approx(2.0, abs=1e-14)


def test_zero_network_outputs_zero():
    spec = nets.multilevel(d=4, levels=2, q=3)
    theta = np.zeros(nets.param_count(spec))
    out = nets.model_value(spec, theta, np.random.default_rng(0).normal(size=(6, 4)), 0.3)
    assert np.array_equal(out, np.zeros(6))


def test_polynomial_heat_exact_everywhere():
    gen = np.random.default_rng(5)
    d, nu, horizon = 6, 0.5, 1.0
    spec = nets.polynomial_heat(d=d, horizon=horizon)
    theta = np.array([1.0, d * nu ** 2, 0.0])
    x = gen.uniform(-0.5, 0.5, size=(64, d))
    t = gen.uniform(0.0, 1.0, size=64)
    want = np.sum(x * x, axis=1) + d * nu ** 2 * (horizon - t)
    assert np.allclose(nets.model_value(spec, theta, x, t), want, rtol=0, atol=1e-15)
    _, grad = nets.value_and_grad_x(spec, theta, x, t)
    assert np.allclose(grad, 2.0 * x, rtol=0, atol=1e-15)


def test_output_continuous_in_theta():
    gen = np.random.default_rng(17)
    spec = nets.multilevel(d=3, levels=2, q=3)
    theta = nets.init_params(spec, 2)
    x, t = gen.uniform(-1, 1, size=(8, 3)), gen.uniform(size=8)
    base = nets.model_value(spec, theta, x, t)
    for _ in range(10):
        delta = gen.normal(size=theta.size)
        delta *= 1e-6 / np.linalg.norm(delta)
        moved = nets.model_value(spec, theta + delta, x, t)
        # local Lipschitz bound from the parameter gradient, with slack for curvature
        from kolsde.autodiff import Tape

        with Tape() as tape:
            params = nets.bind_params(tape, spec, theta)
            out = nets.tape_value(tape, spec, params, x, t)
            norms = np.empty(8)
            for i in range(8):
                seed = np.zeros(8)
                seed[i] = 1.0
                norms[i] = np.linalg.norm(tape.backward([(out, seed)], theta.size))
        assert np.all(np.abs(moved - base) <= norms * np.linalg.norm(delta) * 1.01 + 1e-15)


def test_gradient_network_output_dim():
    spec = nets.gradient_multilevel(d=5, levels=2, q=2)
    theta = nets.init_params(spec, 3)
    out = nets.model_value(spec, theta, np.zeros((4, 5)), 0.1)
    assert out.shape == (4, 5)


def test_residual_changes_function():
    plain = nets.multilevel(d=3, levels=3, q=2, residual=False)
    res = nets.multilevel(d=3, levels=3, q=2, residual=True)
    theta = nets.init_params(plain, 1)
    x = np.ones((1, 3))
    assert nets.model_value(plain, theta, x, 0.5) != nets.model_value(res, theta, x, 0.5)


def test_checkpoint_roundtrip(tmp_path):
    spec = nets.multilevel(d=4, levels=2, q=3)
    theta = nets.init_params(spec, 77)
    path = tmp_path / "ckpt.bin"
    nets.save_checkpoint(path, spec, theta, seed=77, step=123)
    spec2, theta2, meta = nets.load_checkpoint(path)
    assert spec2 == spec
    assert np.array_equal(theta2, theta)
    assert meta == {"seed": 77, "step": 123}


def test_model_rejects_wrong_dimension():
    spec = nets.multilevel(d=4, levels=1, q=2)
    theta = nets.init_params(spec, 0)
    with pytest.raises(ValueError):
        nets.model_value(spec, theta, np.zeros((1, 5)), 0.0)
    with pytest.raises(ValueError):
        nets.model_value(spec, theta[:-1], np.zeros((1, 4)), 0.0)
