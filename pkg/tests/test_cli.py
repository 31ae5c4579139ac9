import json

import numpy as np
import pytest

from kolsde import cli, evaluation, nets, rng, sde


def write_config(tmp_path, **kw):
    base = dict(problem="heat", d=2, loss="FK", steps=10, batch_size=16,
                levels=1, q=2, eval_samples=512, eval_inner=64,
                metrics_every=5, seed=1)
    base.update(kw)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(base))
    return path


def test_config_roundtrip():
    config = cli.ExperimentConfig(problem="heat", overrides={"d": 10, "nu": 0.5},
                                  loss="BSDE-eff", steps=77,
                                  diag_batch_sizes=(16, 128))
    again = cli.ExperimentConfig.from_dict(config.to_dict())
    assert again == config
    with pytest.raises(ValueError):
        cli.ExperimentConfig.from_dict({"problem": "heat", "bogus": 1})


def test_sweep_expansion():
    raw = {"problem": "heat", "d": 2, "loss": ["FK", "BSDE-eff"],
           "batch_size": [16, 128], "steps": 5}
    runs = cli.expand_sweep(raw)
    labels = [label for label, _ in runs]
    assert len(runs) == 4
    assert "batch_size=16,loss=FK" in labels
    assert all(cfg.steps == 5 for _, cfg in runs)
    single = cli.expand_sweep({"problem": "heat", "d": 2})
    assert single[0][0] == "run"


def test_run_train_smoke_and_determinism(tmp_path):
    config_path = write_config(tmp_path)
    assert cli.main(["train", "--config", str(config_path),
                     "--out", str(tmp_path / "a")]) == 0
    rows = cli.read_rows(tmp_path / "a" / "metrics.csv", cli.METRICS_COLUMNS)
    assert len(rows) >= 1
    assert rows[0]["loss_kind"] == "FK"
    assert (tmp_path / "a" / "checkpoint.bin").exists()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["failed"] is False

    assert cli.main(["train", "--config", str(config_path),
                     "--out", str(tmp_path / "b")]) == 0
    assert cli.metrics_equal(tmp_path / "a" / "metrics.csv",
                             tmp_path / "b" / "metrics.csv")


def test_failed_run_nonzero_exit(tmp_path):
    config_path = write_config(tmp_path, loss="BSDE", element_budget=64)
    code = cli.main(["train", "--config", str(config_path),
                     "--out", str(tmp_path / "fail")])
    assert code == 1
    rows = cli.read_rows(tmp_path / "fail" / "metrics.csv", cli.METRICS_COLUMNS)
    assert any(r["loss_mean"] is None or np.isnan(r["loss_mean"]) for r in rows)


def test_run_eval_at_analytic_optimum(tmp_path):
    problem = sde.make_problem("heat", d=4)
    spec = nets.polynomial_heat(4)
    nets.save_checkpoint(tmp_path / "star.bin", spec,
                         np.array([1.0, 4 * 0.25, 0.0]), seed=0, step=0)
    config_path = write_config(tmp_path, d=4)
    assert cli.main(["eval", "--config", str(config_path),
                     "--out", str(tmp_path), "--checkpoint",
                     str(tmp_path / "star.bin")]) == 0
    rows = cli.read_rows(tmp_path / "eval.csv", cli.EVAL_COLUMNS)
    assert rows[0]["mse"] <= 1e-20
    assert rows[0]["mse_grad"] <= 1e-20


def test_run_eval_zero_network_matches_moments(tmp_path):
    spec = nets.multilevel(10, levels=1, q=2)
    nets.save_checkpoint(tmp_path / "zero.bin", spec,
                         np.zeros(nets.param_count(spec)), seed=0, step=0)
    n = 1 << 15
    config_path = write_config(tmp_path, d=10, eval_samples=n, seed=3)
    cli.main(["eval", "--config", str(config_path), "--out", str(tmp_path),
              "--checkpoint", str(tmp_path / "zero.bin")])
    rows = cli.read_rows(tmp_path / "eval.csv", cli.EVAL_COLUMNS)
    problem = sde.make_problem("heat", d=10)
    ref = evaluation.closed_form_heat(problem)
    x, t = sde.sample_initial(problem, n, rng.generator(3, "eval", 0))
    se = (ref.value(x, t) ** 2).std(ddof=1) / np.sqrt(n)
    assert abs(rows[0]["mse"] - 59.0 / 12.0) <= 3 * se


def test_run_eval_gradient_network_uses_values(tmp_path):
    # a zero gradient network against grad V = 2x: mse_grad = 4 E|xi|^2 = 4 d/12
    d = 6
    spec = nets.gradient_multilevel(d, levels=1, q=2)
    nets.save_checkpoint(tmp_path / "r.bin", spec,
                         np.zeros(nets.param_count(spec)), seed=0, step=0)
    config_path = write_config(tmp_path, d=d, eval_samples=1 << 14)
    cli.main(["eval", "--config", str(config_path), "--out", str(tmp_path),
              "--checkpoint", str(tmp_path / "r.bin")])
    rows = cli.read_rows(tmp_path / "eval.csv", cli.EVAL_COLUMNS)
    assert rows[0]["mse"] is None
    assert rows[0]["mse_grad"] == pytest.approx(4 * d / 12.0, rel=0.1)


def test_run_diagnostics_zero_noise(tmp_path):
    # deterministic loss needs both the zero-noise override and fixed initials
    spec = nets.polynomial_heat(3)
    nets.save_checkpoint(tmp_path / "m.bin", spec, np.array([1.0, 0.75, 0.0]))
    config = cli.ExperimentConfig(problem="heat",
                                  overrides={"d": 3, "x_point": [0.1, 0.1, 0.1],
                                             "tau_point": 0.5},
                                  loss="BSDE", diag_batches=4,
                                  diag_batch_sizes=(8,))
    code = cli.run_diagnostics(config, tmp_path / "m.bin", tmp_path, zero_noise=True)
    assert code == 0
    rows = cli.read_rows(tmp_path / "variance.csv", cli.VARIANCE_COLUMNS)
    assert rows[0]["loss_std"] == 0.0
    assert rows[0]["grad_std_max"] == 0.0


def test_run_reference_heat_and_doublewell(tmp_path, capsys):
    heat_config = write_config(tmp_path)
    assert cli.main(["reference", "--config", str(heat_config),
                     "--out", str(tmp_path)]) == 0
    assert "closed-form" in capsys.readouterr().out
    assert not (tmp_path / "reference.bin").exists()

    hjb_path = tmp_path / "hjb.json"
    hjb_path.write_text(json.dumps({"problem": "hjb-doublewell", "d": 4,
                                    "fd_n_x": 1000, "fd_n_t": 200}))
    assert cli.main(["reference", "--config", str(hjb_path),
                     "--out", str(tmp_path)]) == 0
    header, _ = __import__("kolsde._storage", fromlist=["read_array"]).read_array(
        tmp_path / "reference.bin")
    assert header["n_x"] == 1000
    assert header["half_width"] == 6.0


def test_csv_append_and_parse_back(tmp_path):
    path = tmp_path / "eval.csv"
    row = {"step": 3, "loss_kind": "FK", "mse": 0.25, "mse_grad": None,
           "n_samples": 64, "seed": 9}
    cli.append_rows(path, cli.EVAL_COLUMNS, [row])
    cli.append_rows(path, cli.EVAL_COLUMNS, [row])
    rows = cli.read_rows(path, cli.EVAL_COLUMNS)
    assert rows == [row, row]
    with pytest.raises(ValueError):
        cli.read_rows(path, cli.VARIANCE_COLUMNS)


def test_sweep_command_writes_run_dirs(tmp_path):
    raw = dict(problem="heat", d=2, loss=["FK", "BSDE-detach"], steps=4,
               batch_size=8, levels=1, q=2, eval_samples=128, metrics_every=10)
    config_path = tmp_path / "sweep.json"
    config_path.write_text(json.dumps(raw))
    assert cli.main(["sweep", "--config", str(config_path),
                     "--out", str(tmp_path / "runs")]) == 0
    assert (tmp_path / "runs" / "loss=FK" / "metrics.csv").exists()
    assert (tmp_path / "runs" / "loss=BSDE-detach" / "metrics.csv").exists()

    with pytest.raises(SystemExit):
        cli.main(["train", "--config", str(config_path), "--out", str(tmp_path)])
