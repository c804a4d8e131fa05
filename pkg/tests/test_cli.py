import csv
import json
from pathlib import Path

import pytest

from dvq.checkpoint import Checkpoint, dumps
from dvq.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main
from dvq.config import ConfigError, config_from_dict, load_config

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
SMOKE = CONFIGS / "smoke.json"


def _write_config(tmp_path, **model):
    cfg = json.loads(SMOKE.read_text())
    cfg["model"].update(model)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--config", str(SMOKE), "--out", str(out)]) == EXIT_OK
    return out


class TestConfig:
    def test_shipped_configs_parse(self):
        for path in CONFIGS.glob("*.json"):
            if not path.name.startswith("stats"):
                load_config(path)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown keys"):
            config_from_dict({"model": {"hiden": 3}})

    def test_divisibility_rule(self):
        with pytest.raises(ConfigError, match="divisibility rule"):
            config_from_dict({"model": {"m": 16, "branches": [{"G": 3, "L": 16}]}})

    def test_version_checked(self):
        with pytest.raises(ConfigError, match="format_version 2"):
            config_from_dict({"format_version": 2})


class TestGenData:
    def test_writes_three_splits(self, tmp_path, capsys):
        assert main(["gen-data", "--config", str(SMOKE), "--out", str(tmp_path)]) == EXIT_OK
        assert sorted(p.name for p in tmp_path.iterdir()) == ["test.jsonl", "train.jsonl", "val.jsonl"]
        assert "train: 64" in capsys.readouterr().out

    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            main(["gen-data", "--config", str(SMOKE), "--out", str(out)])
        for split in ("train", "val", "test"):
            assert (a / f"{split}.jsonl").read_bytes() == (b / f"{split}.jsonl").read_bytes()

    def test_seed_override(self, tmp_path):
        main(["gen-data", "--config", str(SMOKE), "--out", str(tmp_path / "a")])
        main(["gen-data", "--config", str(SMOKE), "--seed", "9", "--out", str(tmp_path / "b")])
        assert (tmp_path / "a/train.jsonl").read_bytes() != (tmp_path / "b/train.jsonl").read_bytes()

    def test_bad_factor_count_names_rule(self, tmp_path, capsys):
        cfg = _write_config(tmp_path, branches=[{"G": 3, "L": 16}])
        assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        err = capsys.readouterr().err
        assert "divisibility rule" in err and "branches[0]" in err

    def test_malformed_config(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["gen-data", "--config", str(bad)]) == EXIT_CONFIG
        assert "not valid JSON" in capsys.readouterr().err

    def test_unwritable_output(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["gen-data", "--config", str(SMOKE), "--out", str(blocker / "sub")]) == EXIT_CONFIG
        assert "--out" in capsys.readouterr().err


class TestTrain:
    def test_outputs(self, trained_run):
        names = {p.name for p in trained_run.iterdir()}
        assert {"checkpoint.json", "metrics.csv", "val_rows.csv", "summary.json"} <= names
        header = (trained_run / "metrics.csv").read_text().splitlines()[0]
        assert next(csv.reader([header])) == ["epoch", "task_loss", "disc_loss", "capacity_mean",
                                              "select[G=1,L=16]", "select[G=4,L=256]"]
        assert json.loads((trained_run / "summary.json").read_text())["format_version"] == 1

    def test_rerun_identical(self, trained_run, tmp_path):
        assert main(["train", "--config", str(SMOKE), "--out", str(tmp_path)]) == EXIT_OK
        for name in ("metrics.csv", "val_rows.csv", "checkpoint.json"):
            assert (tmp_path / name).read_bytes() == (trained_run / name).read_bytes()

    def test_prints_summary(self, tmp_path, capsys):
        main(["train", "--config", str(SMOKE), "--out", str(tmp_path)])
        out = capsys.readouterr().out
        assert "val accuracy:" in out and "val mean capacity:" in out

    def test_from_dataset_files(self, tmp_path, trained_run):
        main(["gen-data", "--config", str(SMOKE), "--out", str(tmp_path / "data")])
        main(["train", "--config", str(SMOKE), "--dataset", str(tmp_path / "data"), "--out", str(tmp_path / "r")])
        assert (tmp_path / "r/metrics.csv").read_bytes() == (trained_run / "metrics.csv").read_bytes()

    def test_continuous_capacity_column_constant(self, tmp_path):
        cfg = _write_config(tmp_path, mode="continuous", branches=[{"G": 1, "continuous": True}],
                            alpha=0.0, beta_cap=0.0)
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
        rows = (tmp_path / "o/metrics.csv").read_text().splitlines()[1:]
        assert len({r.split(",")[3] for r in rows}) == 1

    def test_numerical_failure_exit_code(self, tmp_path, capsys):
        cfg = json.loads(SMOKE.read_text())
        cfg["optim"]["lr"] = 1e300
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg))
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_NUMERIC
        err = capsys.readouterr().err
        assert "numerical failure" in err and "epoch 1" in err


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, trained_run, tmp_path):
        src = trained_run / "checkpoint.json"
        Checkpoint.load(src).save(tmp_path / "again.json")
        assert (tmp_path / "again.json").read_bytes() == src.read_bytes()

    def test_version_mismatch_prints_both(self, trained_run, tmp_path, capsys):
        d = json.loads((trained_run / "checkpoint.json").read_text())
        d["format_version"] = 7
        bad = tmp_path / "old.json"
        bad.write_text(dumps(d))
        assert main(["eval", "--checkpoint", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
        err = capsys.readouterr().err
        assert "7" in err and "1" in err and "format_version" in err


class TestEvalAnalyze:
    def test_eval_twice_identical(self, trained_run, tmp_path):
        ck = str(trained_run / "checkpoint.json")
        for sub in ("a", "b"):
            assert main(["eval", "--checkpoint", ck, "--out", str(tmp_path / sub)]) == EXIT_OK
        assert (tmp_path / "a/rows.csv").read_bytes() == (tmp_path / "b/rows.csv").read_bytes()

    def test_eval_matches_training_rows(self, trained_run, tmp_path):
        main(["eval", "--checkpoint", str(trained_run / "checkpoint.json"), "--out", str(tmp_path)])
        assert (tmp_path / "rows.csv").read_bytes() == (trained_run / "val_rows.csv").read_bytes()

    def test_eval_on_dataset_file(self, trained_run, tmp_path):
        main(["gen-data", "--config", str(SMOKE), "--out", str(tmp_path / "data")])
        assert main(["eval", "--checkpoint", str(trained_run / "checkpoint.json"),
                     "--dataset", str(tmp_path / "data/test.jsonl"), "--out", str(tmp_path)]) == EXIT_OK

    def test_single_branch_reports_undefined(self, tmp_path, capsys):
        cfg = _write_config(tmp_path, mode="fixed", branches=[{"G": 1, "L": 16}])
        main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")])
        capsys.readouterr()
        code = main(["analyze", "--checkpoint", str(tmp_path / "run/checkpoint.json"), "--permutations", "200",
                     "--out", str(tmp_path / "an")])
        assert code == EXIT_OK
        assert "undefined" in capsys.readouterr().out
        report = json.loads((tmp_path / "an/correlations.json").read_text())
        assert report["format_version"] == 1
        for entry in report["correlations"].values():
            assert entry["status"] == "undefined" and entry["coefficient"] is None

    def test_analyze_deterministic(self, trained_run, tmp_path):
        ck = str(trained_run / "checkpoint.json")
        for sub in ("a", "b"):
            main(["analyze", "--checkpoint", ck, "--permutations", "300", "--out", str(tmp_path / sub)])
        assert (tmp_path / "a/correlations.json").read_bytes() == (tmp_path / "b/correlations.json").read_bytes()

    def test_missing_checkpoint(self, tmp_path, capsys):
        assert main(["eval", "--checkpoint", str(tmp_path / "none.json")]) == EXIT_CONFIG


class TestBound:
    def test_single_branch(self, capsys, tmp_path):
        assert main(["bound", "--stats", str(CONFIGS / "stats_n1.json"), "--out", str(tmp_path)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "J2" in out and "0.0000000" in out
        report = json.loads((tmp_path / "bound.json").read_text())
        assert report["J2"] == 0.0
        assert abs(report["J1"] - 0.0503745) < 1e-6

    def test_two_branch(self, capsys):
        assert main(["bound", "--stats", str(CONFIGS / "stats_n2.json")]) == EXIT_OK
        out = capsys.readouterr().out
        report = json.loads(out[out.index("{"):])
        assert abs(report["J1"] - 0.108036) < 1e-6
        assert abs(report["J2"] - 0.135811) < 1e-6
        assert report["adaptive_improves"] is True

    def test_bad_delta(self, tmp_path, capsys):
        p = tmp_path / "s.json"
        p.write_text(json.dumps({"n": 10, "delta": 1.5, "branches": [{"G": 1, "L": 16, "count": 10}]}))
        assert main(["bound", "--stats", str(p)]) == EXIT_CONFIG
        assert "delta" in capsys.readouterr().err

    def test_counts_mismatch_named(self, tmp_path, capsys):
        p = tmp_path / "s.json"
        p.write_text(json.dumps({"n": 10, "branches": [{"G": 1, "L": 16, "count": 9}]}))
        assert main(["bound", "--stats", str(p)]) == EXIT_CONFIG
        assert "sum to 9 but n = 10" in capsys.readouterr().err

    def test_idempotent(self, tmp_path):
        for sub in ("a", "b"):
            main(["bound", "--stats", str(CONFIGS / "stats_n2.json"), "--out", str(tmp_path / sub)])
        assert (tmp_path / "a/bound.json").read_bytes() == (tmp_path / "b/bound.json").read_bytes()
