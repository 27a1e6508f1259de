"""Command-line behaviour: validation, file outputs, determinism."""

import json

import numpy as np
import pytest

from maxeig import cli
from maxeig.config import ConfigError, load_config


def _tiny_config(model_kind: str) -> dict:
    if model_kind == "discrete_quadratic":
        model = {"kind": "discrete_quadratic", "noise_variance": 0.1}
        contexts = {"layout": "mirrored", "size": 5, "low": -3.0, "high": -1.0}
    else:
        model = {"kind": "continuous_bump", "noise_std": 0.1, "action_bounds": [-4.0, 4.0]}
        contexts = {"layout": "midpoints", "size": 5, "low": -3.5, "high": 3.5}
    return {
        "name": f"tiny-{model_kind.split('_')[0]}",
        "seed": 99,
        "model": model,
        "contexts": contexts,
        "train": {
            "desk": {"steps": 30, "batch": 16, "tau_halve_every": 10, "log_every": 10,
                     "bn_recal_batches": 3},
            "paper": {"steps": 60, "batch": 32, "tau_halve_every": 20, "log_every": 20},
        },
        "eig": {
            "desk": {"steps": 15, "batch": 16, "eval_batches": 6},
            "paper": {"steps": 30, "batch": 32, "eval_batches": 6},
        },
        "eval": {
            "desk": {"n_envs": 6, "snis_particles": 300, "posterior_draws": 80},
            "paper": {"n_envs": 12, "snis_particles": 300, "posterior_draws": 80},
        },
        "baselines": {"random_sigmas": [0.2, 1.0, 2.0], "ucb_lambdas": [0, 1, 2],
                      "ucb_prior_samples": 64, "ucb_grid": 41},
    }


@pytest.fixture
def tiny_discrete(tmp_path):
    path = tmp_path / "tiny_discrete.json"
    path.write_text(json.dumps(_tiny_config("discrete_quadratic")))
    return str(path)


@pytest.fixture
def tiny_continuous(tmp_path):
    path = tmp_path / "tiny_continuous.json"
    path.write_text(json.dumps(_tiny_config("continuous_bump")))
    return str(path)


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path):
        raw = _tiny_config("discrete_quadratic")
        raw["model"]["extra"] = 1
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(raw))
        with pytest.raises(ConfigError, match="extra"):
            load_config(path)

    def test_missing_key_named(self, tmp_path):
        raw = _tiny_config("discrete_quadratic")
        del raw["model"]
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(raw))
        with pytest.raises(ConfigError, match="model"):
            load_config(path)

    def test_scale_resolution(self, tiny_discrete):
        desk = load_config(tiny_discrete, scale="desk")
        paper = load_config(tiny_discrete, scale="paper")
        assert desk.train["steps"] == 30 and paper.train["steps"] == 60
        assert desk.config_hash != paper.config_hash
        assert desk.model_hash == paper.model_hash

    def test_seed_override_changes_hash(self, tiny_discrete):
        a = load_config(tiny_discrete)
        b = load_config(tiny_discrete, seed=123)
        assert a.seed == 99 and b.seed == 123
        assert a.config_hash != b.config_hash


class TestCommands:
    def test_usage_error_exit_code(self):
        assert cli.main([]) == 2
        assert cli.main(["train-designs"]) == 2

    def test_missing_config_exit_code(self, tmp_path):
        rc = cli.main(["train-designs", "--config", str(tmp_path / "nope.json"),
                       "--out", str(tmp_path)])
        assert rc == 2

    def test_train_designs_byte_identical_reruns(self, tiny_discrete, tmp_path):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        for out in (out1, out2):
            assert cli.main(["train-designs", "--config", tiny_discrete,
                             "--out", str(out)]) == 0
        for name in ("ours_design.json", "ours_trainlog.json", "ours_critic.json"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
        payload = json.loads((out1 / "ours_design.json").read_text())
        assert payload["seed"] == 99
        assert payload["action_kind"] == "discrete"
        assert len(payload["designs"]) == 5
        assert "config_hash" in payload and "tool" in payload

    def test_make_baseline_ucb_one_all_first_treatment(self, tiny_discrete, tmp_path):
        out = tmp_path / "b"
        assert cli.main(["make-baseline", "--config", tiny_discrete,
                         "--method", "ucb:1", "--out", str(out)]) == 0
        payload = json.loads((out / "ucb1_design.json").read_text())
        assert payload["designs"] == [0, 0, 0, 0, 0]

    def test_make_baseline_random_continuous(self, tiny_continuous, tmp_path):
        out = tmp_path / "b"
        assert cli.main(["make-baseline", "--config", tiny_continuous,
                         "--method", "random:1.0", "--out", str(out)]) == 0
        payload = json.loads((out / "random1_design.json").read_text())
        assert len(payload["designs"]) == 5
        assert all(-4.0 <= a <= 4.0 for a in payload["designs"])

    def test_make_baseline_unknown_method(self, tiny_discrete, tmp_path):
        rc = cli.main(["make-baseline", "--config", tiny_discrete,
                       "--method", "egreedy", "--out", str(tmp_path)])
        assert rc == 2

    def test_estimate_eig_output_and_determinism(self, tiny_discrete, tmp_path):
        out = tmp_path / "run"
        cli.main(["make-baseline", "--config", tiny_discrete, "--method", "random",
                  "--out", str(out)])
        design = str(out / "random1_design.json")
        assert cli.main(["estimate-eig", "--config", tiny_discrete,
                         "--design", design, "--out", str(out)]) == 0
        first = (out / "random1_eig.json").read_bytes()
        payload = json.loads(first)
        assert payload["eig_mean"] <= np.log(16) + 1e-9
        assert cli.main(["estimate-eig", "--config", tiny_discrete,
                         "--design", design, "--out", str(out)]) == 0
        assert (out / "random1_eig.json").read_bytes() == first

    def test_estimate_eig_rejects_foreign_design(self, tiny_discrete, tiny_continuous, tmp_path):
        out = tmp_path / "run"
        cli.main(["make-baseline", "--config", tiny_continuous, "--method", "random",
                  "--out", str(out)])
        rc = cli.main(["estimate-eig", "--config", tiny_discrete,
                       "--design", str(out / "random1_design.json"), "--out", str(out)])
        assert rc == 2

    def test_deploy_eval_csv_schema_and_order(self, tiny_discrete, tmp_path):
        out = tmp_path / "run"
        cli.main(["make-baseline", "--config", tiny_discrete, "--method", "ucb:1",
                  "--out", str(out)])
        cli.main(["make-baseline", "--config", tiny_discrete, "--method", "random",
                  "--out", str(out)])
        designs = [str(out / "ucb1_design.json"), str(out / "random1_design.json")]
        assert cli.main(["deploy-eval", "--config", tiny_discrete,
                         "--designs", *designs, "--out", str(out)]) == 0
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0] == ("method,eig_mean,eig_se,mse_mstar_mean,mse_mstar_se,"
                            "mse_psi_mean,mse_psi_se,mse_a_or_hitrate_mean,"
                            "mse_a_or_hitrate_se,regret_mean,regret_se,n_envs,seed")
        assert lines[1].startswith("ucb:1,") and lines[2].startswith("random:1,")
        payload = json.loads((out / "metrics.json").read_text())
        assert [r["method"] for r in payload["rows"]] == ["ucb:1", "random:1"]

    def test_deploy_eval_workers_match_serial(self, tiny_discrete, tmp_path):
        out_s, out_p = tmp_path / "serial", tmp_path / "par"
        cli.main(["make-baseline", "--config", tiny_discrete, "--method", "random",
                  "--out", str(out_s)])
        design = str(out_s / "random1_design.json")
        for out, workers in ((out_s, "1"), (out_p, "4")):
            assert cli.main(["deploy-eval", "--config", tiny_discrete,
                             "--designs", design, "--out", str(out),
                             "--workers", workers]) == 0
        assert (out_s / "metrics.csv").read_bytes() == (out_p / "metrics.csv").read_bytes()

    def test_deploy_eval_calibration_flag(self, tiny_discrete, tmp_path):
        out = tmp_path / "run"
        cli.main(["make-baseline", "--config", tiny_discrete, "--method", "ucb:1",
                  "--out", str(out)])
        assert cli.main(["deploy-eval", "--config", tiny_discrete,
                         "--designs", str(out / "ucb1_design.json"),
                         "--out", str(out), "--calibration"]) == 0
        lines = (out / "ucb1_calibration.csv").read_text().splitlines()
        assert lines[0] == "env,posterior_std,l2_error,l2_error_rolling"
        assert len(lines) == 7  # header + n_envs rows

    def test_report_merges_in_sorted_order(self, tiny_discrete, tmp_path):
        out = tmp_path / "run"
        cli.main(["make-baseline", "--config", tiny_discrete, "--method", "ucb:1",
                  "--out", str(out)])
        cli.main(["deploy-eval", "--config", tiny_discrete,
                  "--designs", str(out / "ucb1_design.json"), "--out", str(out)])
        assert cli.main(["report", "--run-dir", str(out)]) == 0
        merged = (out / "comparison.csv").read_text()
        original = (out / "metrics.csv").read_text()
        assert merged == original

    def test_report_refuses_model_mismatch(self, tiny_discrete, tiny_continuous, tmp_path):
        out = tmp_path / "mix"
        out.mkdir()
        for i, cfg in enumerate((tiny_discrete, tiny_continuous)):
            sub = tmp_path / f"m{i}"
            method = "ucb:1" if i == 0 else "random:1.0"
            cli.main(["make-baseline", "--config", cfg, "--method", method,
                      "--out", str(sub)])
            design = next(sub.glob("*_design.json"))
            cli.main(["deploy-eval", "--config", cfg, "--designs", str(design),
                      "--out", str(sub)])
            (out / f"{i}_metrics.json").write_bytes((sub / "metrics.json").read_bytes())
        assert cli.main(["report", "--run-dir", str(out)]) == 2

    def test_plot_designs_marker_count(self, tiny_discrete, tmp_path):
        out = tmp_path / "run"
        cli.main(["make-baseline", "--config", tiny_discrete, "--method", "random",
                  "--out", str(out)])
        svg_path = out / "design.svg"
        assert cli.main(["plot-designs", "--design", str(out / "random1_design.json"),
                         "--out", str(svg_path)]) == 0
        svg = svg_path.read_text()
        assert svg.count("<circle") == 5
