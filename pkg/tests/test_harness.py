import json
import math

import numpy as np
import pytest

from conftest import make_dual

from kmirror import (
    MetricsRecord,
    compute_rmse,
    compute_test_loss,
    load_metrics_csv,
    make_poisson_model,
    run_experiment,
    write_metrics_csv,
    zero_dual_function,
)
from kmirror.cli import main as cli_main
from kmirror.harness import ConfigError, config_from_dict, load_config
from kmirror.kernels import Kernel
from kmirror.rkhs import MirrorMap

WIDE = Kernel("gaussian", bandwidth=0.02)


def toy_config(**over):
    raw = {
        "algorithm": "spppot",
        "kernel": {"family": "gaussian", "bandwidth": 0.0065},
        "eta": 0.012,
        "budget": {"kind": "constant", "epsilon": 6.6e-6},
        "minibatch": 30,
        "epochs": 1,
        "grid_size": 50,
        "domain": [[0.0, 1.0]],
        "seed": 3,
        "dataset": {"kind": "toy", "train_count": 600, "test_count": 200},
        "record_every": 5,
    }
    raw.update(over)
    return raw


class TestConfigValidation:
    def test_valid_config_parses(self):
        cfg = config_from_dict(toy_config())
        assert cfg.algorithm == "spppot"
        assert cfg.kernel.bandwidth == 0.0065

    def test_unknown_algorithm(self):
        with pytest.raises(ConfigError, match="algorithm"):
            config_from_dict(toy_config(algorithm="sgd"))

    def test_delta_required_for_second_order(self):
        raw = toy_config(algorithm="quasi_newton", minibatch=1)
        raw.pop("budget")
        with pytest.raises(ConfigError, match="delta"):
            config_from_dict(raw)

    def test_budget_required_for_compressors(self):
        raw = toy_config()
        raw.pop("budget")
        with pytest.raises(ConfigError, match="budget"):
            config_from_dict(raw)

    def test_hybrid_needs_phase_etas(self):
        raw = toy_config(algorithm="hybrid", delta=1.0)
        raw.pop("eta")
        with pytest.raises(ConfigError, match="eta_phase"):
            config_from_dict(raw)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.json")


class TestMetrics:
    def test_rmse_exact_match_is_zero(self):
        model = make_poisson_model([(0.0, 1.0)], 10)
        z = zero_dual_function(WIDE, MirrorMap("kl"), 1)  # f == 1
        grid = np.linspace(0, 1, 101).reshape(-1, 1)
        assert compute_rmse(z, lambda x: np.ones_like(x), grid) == 0.0

    def test_rmse_constant_offset(self):
        z = zero_dual_function(WIDE, MirrorMap("kl"), 1)  # f == 1
        grid = np.linspace(0, 1, 101).reshape(-1, 1)
        delta = 0.37
        assert compute_rmse(z, lambda x: np.ones_like(x) + delta, grid) == pytest.approx(delta, rel=1e-12)

    def test_test_loss_zero_function(self):
        model = make_poisson_model([(0.0, 1.0)], 100)
        z = zero_dual_function(WIDE, MirrorMap("kl"), 1)
        pts = np.array([[0.1], [0.5], [0.9]])
        assert compute_test_loss(z, model, pts) == pytest.approx(1.0, rel=1e-12)

    def test_test_loss_hand_summed(self):
        model = make_poisson_model([(0.0, 1.0)], 4)
        z = make_dual(WIDE, [[0.2], [0.7]], [0.8, -0.3])
        pts = np.array([[0.15], [0.5], [0.85]])
        from kmirror import evaluate_dual

        zs = [evaluate_dual(z, p) for p in pts]
        integ = model.cell_measure * sum(math.exp(evaluate_dual(z, u)) for u in model.grid.atoms)
        expected = float(np.mean([-v for v in zs])) + integ
        assert compute_test_loss(z, model, pts) == pytest.approx(expected, rel=1e-12)


class TestCsvSchema:
    def test_round_trip(self, tmp_path):
        records = [
            MetricsRecord(10, 300, 1.2345, 0.9876, 105, 0.543, 12.5),
            MetricsRecord(20, 600, 1.1, 0.9, 104, None, 13.0),
        ]
        p = tmp_path / "metrics.csv"
        write_metrics_csv(p, records)
        header = p.read_text().splitlines()[0]
        assert header == "step,samples_processed,train_loss,test_loss,model_order,rmse,wall_time_ms"
        back = load_metrics_csv(p)
        assert back == records

    def test_bit_exact_floats(self, tmp_path):
        v = math.pi / 7.0
        records = [MetricsRecord(1, 1, v, v * 3, 7, v / 11, v * 1e3)]
        p = tmp_path / "m.csv"
        write_metrics_csv(p, records)
        back = load_metrics_csv(p)[0]
        assert back.train_loss == v and back.rmse == v / 11


class TestRunExperiment:
    def test_zero_epochs(self, tmp_path):
        cfg = config_from_dict(toy_config(epochs=0))
        res = run_experiment(cfg, out_dir=tmp_path)
        assert res.records == []
        assert (tmp_path / "metrics.csv").read_text().startswith("step,")
        assert len((tmp_path / "metrics.csv").read_text().strip().splitlines()) == 1
        model = json.loads((tmp_path / "model.json").read_text())
        assert len(model["weights"]) == 50  # grid-only initial snapshot

    def test_small_run_outputs(self, tmp_path):
        cfg = config_from_dict(toy_config())
        res = run_experiment(cfg, out_dir=tmp_path)
        assert (tmp_path / "metrics.csv").exists()
        assert (tmp_path / "summary.json").exists()
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["final_model_order"] >= 50
        assert summary["lemma1_max_gap"] <= 1e-9
        back = load_metrics_csv(tmp_path / "metrics.csv")
        assert [r.step for r in back] == [r.step for r in res.records]
        assert all(r.model_order >= 50 for r in back)

    def test_determinism_modulo_wall_time(self, tmp_path):
        cfg1 = config_from_dict(toy_config())
        cfg2 = config_from_dict(toy_config())
        r1 = run_experiment(cfg1, out_dir=tmp_path / "a")
        r2 = run_experiment(cfg2, out_dir=tmp_path / "b")
        for a, b in zip(r1.records, r2.records):
            assert (a.step, a.samples_processed, a.train_loss, a.test_loss, a.model_order, a.rmse) == (
                b.step, b.samples_processed, b.train_loss, b.test_loss, b.model_order, b.rmse
            )

    def test_quasi_newton_run_audits_hessian(self, tmp_path):
        raw = toy_config(
            algorithm="quasi_newton", minibatch=1, delta=1.0, eta=1.0,
            dataset={"kind": "toy", "train_count": 120, "test_count": 60},
            grid_size=10, audit_every=5,
        )
        raw.pop("budget")
        res = run_experiment(config_from_dict(raw), out_dir=tmp_path)
        assert res.summary["lemma2_upper"] <= 1e-8
        assert res.summary["lemma2_lower"] <= 1e-8
        assert res.summary["final_model_order"] == 10

    def test_csv_dataset_split(self, tmp_path):
        data = tmp_path / "pts.csv"
        rng = np.random.default_rng(0)
        data.write_text("\n".join(repr(float(v)) for v in rng.uniform(size=400)) + "\n")
        raw = toy_config(
            dataset={"kind": "csv", "path": str(data), "test_fraction": 0.25},
            epochs=1, grid_size=20,
        )
        res = run_experiment(config_from_dict(raw))
        assert res.summary["train_sample_count"] == 300
        assert res.summary["final_rmse"] is None

    def test_klr_blobs_run(self):
        raw = {
            "algorithm": "klr_spppot",
            "kernel": {"family": "gaussian", "bandwidth": 4.0},
            "eta": 1.0,
            "budget": {"kind": "constant", "epsilon": 0.05},
            "minibatch": 1,
            "epochs": 1,
            "seed": 5,
            "dataset": {"kind": "blobs", "n_classes": 3, "n_per_class": 40, "dim": 2,
                        "separation": 8.0, "test_per_class": 20},
            "record_every": 20,
        }
        res = run_experiment(config_from_dict(raw))
        assert res.summary["holdout_error"] <= 0.2
        assert res.klr_model is not None


class TestCli:
    def test_simulate_and_fit(self, tmp_path, capsys):
        out_csv = tmp_path / "toy.csv"
        assert cli_main(["simulate", "--out", str(out_csv), "--seed", "3", "--count", "500"]) == 0
        assert out_csv.exists()

        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(toy_config(
            dataset={"kind": "csv", "path": str(out_csv), "test_fraction": 0.2},
            epochs=1, grid_size=20,
        )))
        rc = cli_main(["fit", "--config", str(cfg_path), "--out", str(tmp_path / "run")])
        assert rc == 0
        assert (tmp_path / "run" / "summary.json").exists()
        out = capsys.readouterr().out
        assert "final_model_order" in out

    def test_fit_then_evaluate(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(toy_config()))
        assert cli_main(["fit", "--config", str(cfg_path), "--out", str(tmp_path / "run")]) == 0
        data_csv = tmp_path / "eval.csv"
        assert cli_main(["simulate", "--out", str(data_csv), "--seed", "11", "--count", "300"]) == 0
        capsys.readouterr()
        rc = cli_main([
            "evaluate", "--model", str(tmp_path / "run" / "model.json"),
            "--data", str(data_csv), "--grid-size", "50",
            "--domain", "0.0", "1.0", "--toy-truth",
        ])
        assert rc == 0
        report = json.loads(capsys.readouterr().out)
        assert "test_loss" in report and "rmse_vs_toy_truth" in report

    def test_config_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"algorithm": "nope"}))
        assert cli_main(["fit", "--config", str(bad)]) == 2

    def test_data_error_exit_code(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(toy_config(
            dataset={"kind": "csv", "path": str(tmp_path / "missing.csv")},
        )))
        assert cli_main(["fit", "--config", str(cfg_path)]) == 3

    def test_sweep(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(toy_config(
            epochs=1, record_every=50,
            dataset={"kind": "toy", "train_count": 200, "test_count": 100},
            grid_size=10,
        )))
        rc = cli_main([
            "sweep", "--config", str(cfg_path), "--param", "eta=0.01,0.02",
            "--seeds", "1,2", "--out", str(tmp_path / "sweep"), "--workers", "2",
        ])
        assert rc == 0
        runs = sorted(p.name for p in (tmp_path / "sweep").iterdir())
        assert len(runs) == 4
        for r in runs:
            assert (tmp_path / "sweep" / r / "summary.json").exists()
