"""Config parsing/serialization and the command-line front end."""

import os
import subprocess
import sys
import warnings

import numpy as np
import pytest

from ccpo.cli import (CSV_HEADER, EXIT_CONFIG, EXIT_OK, main,
                      metrics_csv_text, run_one)
from ccpo.cmdp import CmdpModel
from ccpo.config import (ConfigError, ExperimentConfig, config_fields,
                         parse_config_text)
from ccpo.pointmass import PointMassEnv
from ccpo.trainer import EvalRow, MetricsRecord

MINIMAL = "task.name = chain\ntask.gamma = 0.99\n"

SMALL_RUN = """task.name = chain
task.gamma = 0.99
task.horizon = 60
algorithm = ccpo
train.iterations = 2
train.episodes_per_condition = 1
train.warmup_episodes = 1
train.exact_critic = true
train.estep_samples = 2
train.mstep_iters = 20
eval.episodes = 3
"""


class TestParseText:
    def test_comments_and_blanks_ignored(self):
        raw = parse_config_text("# header\n\nseed = 3   # trailing\n")
        assert raw == {"seed": "3"}

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError) as exc:
            parse_config_text("seed = 1\nseed = 2\n")
        assert exc.value.key == "seed"

    def test_line_without_equals_rejected(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config_text("seed = 1\nnot a pair\n")

    def test_empty_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("= 3\n")


class TestExperimentConfig:
    def test_minimal_config_fills_defaults(self):
        cfg = ExperimentConfig.from_text(MINIMAL)
        assert cfg["task.name"] == "chain"
        assert cfg["algorithm"] == "ccpo"
        assert cfg["seed"] == 0
        assert cfg["trust.kappa"] == 0.3
        assert cfg["conditions.behavior"] == (20.0, 40.0, 60.0)

    def test_unknown_key_named_in_error(self):
        with pytest.raises(ConfigError) as exc:
            ExperimentConfig.from_text(MINIMAL + "task.gama = 0.9\n")
        assert exc.value.key == "task.gama"

    def test_missing_required_key_named_in_error(self):
        with pytest.raises(ConfigError) as exc:
            ExperimentConfig.from_text("task.name = chain\n")
        assert exc.value.key == "task.gamma"
        assert "task.gamma" in str(exc.value)

    def test_unparseable_value_named_in_error(self):
        with pytest.raises(ConfigError) as exc:
            ExperimentConfig.from_text(MINIMAL + "train.iterations = soon\n")
        assert exc.value.key == "train.iterations"

    @pytest.mark.parametrize("line,key", [
        ("task.gamma = 1.5", "task.gamma"),
        ("algorithm = sarsa", "algorithm"),
        ("critic.mode = cubic", "critic.mode"),
        ("conditions.behavior = 5", "conditions.behavior"),
    ])
    def test_semantic_validation(self, line, key):
        text = "task.name = chain\n" + line + "\n"
        if key != "task.gamma":
            text += "task.gamma = 0.99\n"
        with pytest.raises(ConfigError) as exc:
            ExperimentConfig.from_text(text)
        assert exc.value.key == key

    def test_unknown_task_rejected(self):
        with pytest.raises(ConfigError) as exc:
            ExperimentConfig.from_text("task.name = pole\ntask.gamma = 0.9\n")
        assert exc.value.key == "task.name"

    def test_serialize_round_trips(self):
        cfg = ExperimentConfig.from_text(
            MINIMAL + "seeds = 1, 2, 3\ntrain.exact_critic = yes\n")
        text = cfg.serialize()
        again = ExperimentConfig.from_text(text)
        assert again.values == cfg.values
        assert again.serialize() == text
        assert text.endswith("\n")

    def test_serialize_covers_every_schema_key(self):
        cfg = ExperimentConfig.from_text(MINIMAL)
        lines = cfg.serialize().strip().splitlines()
        keys = [line.split("=")[0].strip() for line in lines]
        assert keys == sorted(config_fields())

    def test_bool_formats_as_word(self):
        cfg = ExperimentConfig.from_text(MINIMAL + "train.exact_critic = 1\n")
        assert "train.exact_critic = true" in cfg.serialize()

    def test_seed_list_overrides_single_seed(self):
        cfg = ExperimentConfig.from_text(MINIMAL + "seed = 9\nseeds = 4,5\n")
        assert cfg.seeds() == (4, 5)
        assert ExperimentConfig.from_text(MINIMAL + "seed = 9\n").seeds() == (9,)

    def test_trainer_config_mapping(self):
        cfg = ExperimentConfig.from_text(
            MINIMAL + "train.safe_action_bias = 0\ntrust.kappa = 0.4\n")
        tc = cfg.trainer_config()
        assert tc.safe_action_bias is None       # zero bias means unbiased
        assert tc.trust.kappa == 0.4
        assert tc.conditions.behavior == (20.0, 40.0, 60.0)
        biased = ExperimentConfig.from_text(
            MINIMAL + "train.safe_action_bias = 1.5\n").trainer_config()
        assert biased.safe_action_bias == 1.5

    def test_build_task_dispatch(self):
        chain = ExperimentConfig.from_text(MINIMAL).build_task()
        assert isinstance(chain, CmdpModel) and chain.gamma == 0.99
        circ = ExperimentConfig.from_text(
            "task.name = circle\ntask.gamma = 0.95\n").build_task()
        assert isinstance(circ, PointMassEnv) and circ.gamma == 0.95
        assert circ.task == "circle"


class TestMetricsCsv:
    def test_exact_bytes_for_known_record(self):
        rec = MetricsRecord(
            task="chain", seed=3,
            rows=(EvalRow(epsilon=30.0, is_behavior=False, reward_mean=38.0,
                          reward_std=0.0, cv_mean=0.125, cv_std=0.0625,
                          episodes=4),),
            avg_reward=38.0, avg_cv=0.125,
            avg_reward_gen=None, avg_cv_gen=None)
        assert metrics_csv_text([rec]) == (
            CSV_HEADER + "\nchain,3,30,false,38,0,0.125,0.0625\n")

    def test_header_field_order(self):
        assert CSV_HEADER == ("task,seed,epsilon,is_behavior,"
                              "reward_mean,reward_std,cv_mean,cv_std")


class TestRunCommand:
    def test_oracle_run_emits_lp_frontier(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(MINIMAL + "algorithm = oracle\n")
        out = tmp_path / "out"
        assert main(["run", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
        text = (out / "metrics.csv").read_text()
        lines = text.splitlines()
        assert lines[0] == CSV_HEADER
        assert len(lines) == 14                      # 13 grid thresholds
        assert "chain,0,10,false,20,0,0,0" in lines
        assert "chain,0,30,false,38,0,0,0" in lines
        assert "chain,0,40,true,46,0,0,0" in lines
        assert "chain,0,70,false,62,0,0,0" in lines
        assert (out / "metrics_chain_oracle_seed0.csv").exists()

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(SMALL_RUN)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            assert main(["run", "--config", str(cfg),
                         "--out", str(tmp_path / "a")]) == EXIT_OK
            assert main(["run", "--config", str(cfg),
                         "--out", str(tmp_path / "b")]) == EXIT_OK
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        b = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert a == b
        assert (tmp_path / "a" / "train_chain_seed0.jsonl").exists()

    def test_seed_flag_changes_output(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(SMALL_RUN)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            main(["run", "--config", str(cfg), "--seed", "1",
                  "--out", str(tmp_path / "a")])
        text = (tmp_path / "a" / "metrics.csv").read_text()
        assert ",1," in text.splitlines()[1]
        assert (tmp_path / "a" / "metrics_chain_ccpo_seed1.csv").exists()

    def test_config_error_exit_code_and_message(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("task.name = chain\n")           # gamma missing
        assert main(["run", "--config", str(cfg)]) == EXIT_CONFIG
        assert "task.gamma" in capsys.readouterr().err

    def test_unknown_key_exit_code(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(MINIMAL + "mystery.knob = 7\n")
        assert main(["run", "--config", str(cfg)]) == EXIT_CONFIG
        assert "mystery.knob" in capsys.readouterr().err

    def test_run_one_matches_oracle_values(self):
        rec = run_one(MINIMAL + "algorithm = oracle\n", seed=0)
        by_eps = {r.epsilon: r for r in rec.rows}
        assert by_eps[30.0].reward_mean == pytest.approx(38.0)
        assert by_eps[30.0].cv_mean == 0.0
        assert rec.avg_cv == 0.0


class TestVerifyCommand:
    def test_unknown_suite_rejected_by_parser(self):
        with pytest.raises(SystemExit) as exc:
            main(["verify", "--suite", "nope"])
        assert exc.value.code == 2


class TestBoundsCommand:
    def test_table_contents(self, tmp_path):
        out = tmp_path / "bounds.csv"
        assert main(["bounds", "--degrees", "1,0", "--n-max", "6",
                     "--out", str(out)]) == EXIT_OK
        lines = out.read_text().splitlines()
        assert lines[0] == "degree,n_points,leverage,b,beta"
        rows = [line.split(",") for line in lines[1:]]
        # degrees are emitted sorted, each over p+1..n_max
        assert [r[0] for r in rows] == ["0"] * 6 + ["1"] * 5
        for deg, n, lev, b, beta in rows:
            lev, b, beta = float(lev), float(b), float(beta)
            assert lev <= b / int(n) ** beta + 1e-12     # envelope dominates
            if deg == "0":
                assert lev == pytest.approx(1.0 / np.sqrt(int(n)), abs=1e-10)
                assert b == pytest.approx(1.0, abs=1e-6)
                assert beta == pytest.approx(0.5, abs=1e-6)


class TestSubprocessEntry:
    def test_module_invocation_reproduces_in_process_bytes(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(SMALL_RUN)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")])
        env = dict(os.environ, CCPO_LOG_LEVEL="error")
        proc = subprocess.run(
            [sys.executable, "-m", "ccpo", "run", "--config", str(cfg),
             "--out", str(tmp_path / "b")],
            capture_output=True, text=True, env=env, timeout=120)
        assert proc.returncode == EXIT_OK
        assert "INFO" not in proc.stderr        # level raised via env var
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        b = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert a == b

    def test_info_level_logs_summary_line(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(MINIMAL + "algorithm = oracle\n")
        proc = subprocess.run(
            [sys.executable, "-m", "ccpo", "run", "--config", str(cfg),
             "--out", str(tmp_path / "out")],
            capture_output=True, text=True,
            env=dict(os.environ, CCPO_LOG_LEVEL="info"), timeout=120)
        assert proc.returncode == EXIT_OK
        assert "avg reward" in proc.stderr


class TestOracleCompareCommand:
    def test_emits_one_row_per_threshold_and_signal(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(SMALL_RUN)
        out = tmp_path / "cmp.csv"
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            assert main(["oracle-compare", "--config", str(cfg),
                         "--out", str(out)]) == EXIT_OK
        lines = out.read_text().splitlines()
        assert lines[0] == "epsilon,signal,mae,wasserstein"
        assert len(lines) == 1 + 13 * 2
        for line in lines[1:]:
            eps, signal, mae, wd = line.split(",")
            assert signal in ("reward", "cost")
            assert np.isfinite(float(mae)) and float(mae) >= 0.0
            assert np.isfinite(float(wd)) and float(wd) >= 0.0
