import csv
import json

import pytest

from floodcast.cli import main

from test_experiment import tiny_config


def fingerprint_of(out: str) -> str:
    return out.splitlines()[0].split(": ", 1)[1]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["simulate", "--size", "16", "--inner-steps", "10", "--boundary", "open",
                 "--roughness", "0.005", "--out", str(out)]) == 0
    return out


class TestSimulate:
    def test_full_catalogue(self, data_dir):
        manifest = json.loads((data_dir / "manifest.json").read_text())
        assert len(manifest["events"]) == 18

    def test_event_subset(self, tmp_path, capsys):
        assert main(["simulate", "--size", "16", "--inner-steps", "5", "--event", "tr2_1,tr5_1",
                     "--out", str(tmp_path)]) == 0
        assert sorted(json.loads((tmp_path / "manifest.json").read_text())["events"]) == ["tr2_1", "tr5_1"]

    def test_unknown_event_exits_cleanly(self, tmp_path, capsys):
        assert main(["simulate", "--size", "16", "--event", "tr3_1", "--out", str(tmp_path)]) == 2
        assert "tr3_1" in capsys.readouterr().err


class TestFingerprint:
    def test_same_options_same_fingerprint(self, tmp_path, capsys):
        argv = ["prepare", "--data", str(tmp_path / "missing"), "--seed", "3"]
        main(argv)
        a = fingerprint_of(capsys.readouterr().out)
        main(argv)
        assert fingerprint_of(capsys.readouterr().out) == a
        main(argv[:-1] + ["4"])
        assert fingerprint_of(capsys.readouterr().out) != a

    def test_config_file_equals_flags(self, tmp_path, capsys):
        cfg = tmp_path / "opts.json"
        cfg.write_text(json.dumps({"size": 16, "inner-steps": 5, "event": "tr2_1"}))
        main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a")])
        a = fingerprint_of(capsys.readouterr().out)
        main(["simulate", "--size", "16", "--inner-steps", "5", "--event", "tr2_1", "--out", str(tmp_path / "a")])
        assert fingerprint_of(capsys.readouterr().out) == a

    def test_config_unknown_key(self, tmp_path):
        cfg = tmp_path / "opts.json"
        cfg.write_text(json.dumps({"sizes": 16}))
        with pytest.raises(SystemExit):
            main(["simulate", "--config", str(cfg)])


class TestPipeline:
    def test_prepare_writes_samples(self, data_dir, tmp_path):
        assert main(["prepare", "--data", str(data_dir), "--events", "tr20_1", "--t", "3", "--horizon", "2",
                     "--patch", "8", "--n-patches", "4", "--out", str(tmp_path)]) == 0
        index = json.loads((tmp_path / "index.json").read_text())
        assert len(index["samples"]) == 4
        assert len(index["labels"]) == 3 * 3 + 2 + 3 + 2

    def test_train_then_eval(self, data_dir, tmp_path):
        run = tmp_path / "run"
        assert main(["train", "--model", "fcn", "--method", "direct_12ts", "--epochs", "1", "--data", str(data_dir),
                     "--train-events", "tr20_1,tr50_1", "--val-events", "tr100_2", "--widths", "4,4",
                     "--patch-size", "16", "--patches-per-epoch", "8", "--out", str(run)]) == 0
        assert (run / "checkpoint" / "model.json").exists()
        assert main(["eval", "--checkpoint", str(run / "checkpoint"), "--data", str(data_dir),
                     "--events", "tr100_1", "--out", str(tmp_path / "eval")]) == 0
        rows = list(csv.DictReader(open(tmp_path / "eval" / "report.csv")))
        assert [int(r["bucket"]) for r in rows] == [1, 2, 3, 4, 5]
        assert all(r["model"] == "fcn" and r["event"] == "tr100_1" for r in rows)

    def test_baseline_eval_and_report(self, data_dir, tmp_path):
        for model in ("no_change", "linear_extrap"):
            assert main(["eval", "--model", model, "--data", str(data_dir), "--events", "tr50_3",
                         "--out", str(tmp_path / model)]) == 0
        assert main(["report", str(tmp_path / "no_change"), str(tmp_path / "linear_extrap" / "report.csv"),
                     "--name", "both", "--out", str(tmp_path / "merged")]) == 0
        rows = list(csv.DictReader(open(tmp_path / "merged" / "both.csv")))
        assert {r["model"] for r in rows} == {"no_change", "linear_extrap"}
        assert 'id="reference-line"' in (tmp_path / "merged" / "both.svg").read_text()

    def test_eval_needs_a_model(self, data_dir, capsys):
        assert main(["eval", "--data", str(data_dir)]) == 2
        assert "checkpoint" in capsys.readouterr().err

    def test_experiment_from_config(self, tmp_path, capsys):
        cfg = tmp_path / "exp.json"
        tiny_config(name="cli-tiny").dump(cfg)
        assert main(["experiment", "--experiment-config", str(cfg), "--results", str(tmp_path / "res")]) == 0
        out = capsys.readouterr().out
        assert "fcn-direct_12ts" in out
        assert (tmp_path / "res" / "cli-tiny" / "summary.json").exists()
