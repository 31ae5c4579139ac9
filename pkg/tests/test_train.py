import dataclasses

import numpy as np
import pytest

from kolsde import nets, sde, train


def test_adam_first_step_value():
    # t=1: m_hat = v_hat = 1 -> theta' = -lr / (1 + eps)
    state = train.adam_init(1)
    state, theta = train.adam_step(state, np.zeros(1), np.ones(1), 1e-3)
    assert theta[0] == pytest.approx(-1e-3 / (1.0 + 1e-8), rel=1e-12)
    assert state.step == 1


def test_adam_zero_gradient_decays_moments():
    state = train.adam_init(2)
    state, theta = train.adam_step(state, np.ones(2), np.array([1.0, -1.0]), 1e-2)
    for _ in range(5):
        prev_m = np.abs(state.m).copy()
        state, theta = train.adam_step(state, theta, np.zeros(2), 1e-2)
        assert np.all(np.abs(state.m) < prev_m)


def test_adam_sign_symmetry():
    a = train.adam_init(1)
    b = train.adam_init(1)
    ta, tb = np.zeros(1), np.zeros(1)
    for _ in range(4):
        a, ta = train.adam_step(a, ta, np.array([0.7]), 1e-3)
        b, tb = train.adam_step(b, tb, np.array([-0.7]), 1e-3)
    assert ta[0] == pytest.approx(-tb[0], rel=0, abs=0)


def test_adam_rejects_nonfinite():
    state = train.adam_init(1)
    with pytest.raises(train.NonFiniteGradientError):
        train.adam_step(state, np.zeros(1), np.array([np.nan]), 1e-3)


def make_config(**kw):
    base = dict(loss_kind="FK", model=nets.multilevel(2, levels=1, q=2),
                steps=10, batch_size=8, milestone=0.9, seed=1, metrics_every=250)
    base.update(kw)
    return train.TrainConfig(**base)


def test_schedule_switch_points():
    config = make_config(steps=30000, lr=(5e-4, 5e-6), dt=(1e-2, 1e-3))
    assert train.schedule(config, 26999) == (5e-4, 1e-2)
    assert train.schedule(config, 27000) == (5e-6, 1e-3)
    tight = make_config(steps=10, milestone=1.0 - 1e-9)
    assert train.schedule(tight, 8)[0] == tight.lr[0]
    assert train.schedule(tight, 9)[0] == tight.lr[1]
    with pytest.raises(ValueError):
        train.schedule(config, 30000)


def test_schedule_exactly_one_switch():
    config = make_config(steps=200, milestone=0.35)
    values = [train.schedule(config, m) for m in range(200)]
    switches = sum(1 for a, b in zip(values, values[1:]) if a != b)
    assert switches == 1
    assert values[69] == (config.lr[0], config.dt[0])
    assert values[70] == (config.lr[1], config.dt[1])


def test_train_smoke_and_metric_cadence():
    problem = sde.make_problem("heat", d=2)
    config = make_config(steps=6, metrics_every=250)
    result = train.train(problem, config)
    assert not result.failed
    # fewer steps than one cadence interval: initial record plus the final one
    assert [r.step for r in result.metrics] == [0, 6]


def test_train_reproducible_metrics():
    problem = sde.make_problem("heat", d=2)
    config = make_config(steps=12, loss_kind="BSDE-eff", metrics_every=5)
    a = train.train(problem, config)
    b = train.train(problem, config)
    assert not a.failed and not b.failed
    assert np.array_equal(a.model.theta, b.model.theta)
    rows_a = [dataclasses.asdict(r) for r in a.metrics]
    rows_b = [dataclasses.asdict(r) for r in b.metrics]
    for ra, rb in zip(rows_a, rows_b):
        ra.pop("wall_time_s"), rb.pop("wall_time_s")
        assert ra == rb


def test_train_element_budget_marks_failure():
    problem = sde.make_problem("heat", d=2)
    config = make_config(loss_kind="BSDE", steps=4, element_budget=100)
    result = train.train(problem, config)
    assert result.failed
    assert "budget" in result.failure
    assert np.isnan(result.metrics[-1].loss_mean)


def test_train_loss_decreases_on_heat():
    problem = sde.make_problem("heat", d=2)
    config = make_config(steps=300, batch_size=32, metrics_every=50,
                         lr=(5e-3, 5e-4), dt=(5e-2, 1e-2))
    result = train.train(problem, config)
    first = result.metrics[0].loss_mean
    last = result.metrics[-1].loss_mean
    assert last < 0.5 * first


def test_train_config_validation():
    with pytest.raises(ValueError):
        make_config(steps=0)
    with pytest.raises(ValueError):
        make_config(milestone=1.0)
    with pytest.raises(ValueError):
        make_config(loss_kind="BSDE-grad")  # missing grad model spec
