import json
from pathlib import Path

import numpy as np
import pytest

from triseg import cli, dataio


@pytest.fixture(scope="module")
def bench_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    rc = cli.main(["gen", "--seed", "7", "--out", str(root),
                   "--counts", "10,10,4,4"])
    assert rc == 0
    return root


def run_config(bench_dir, **over):
    cfg = {"data_root": str(bench_dir), "seed": 1, "stage1_iters": 4,
           "ssl_iters_per_round": 3, "max_rounds": 1, "log_every": 2,
           "stop_gap": -1.0}
    cfg.update(over)
    return cfg


class TestGen:
    def test_benchmark_written(self, bench_dir):
        assert (bench_dir / "index.json").exists()
        splits = dataio.load_benchmark(bench_dir)
        assert len(splits["source-train"]) == 10
        assert len(splits["target-val"]) == 4

    def test_gen_deterministic(self, tmp_path):
        cli.main(["gen", "--seed", "3", "--out", str(tmp_path / "a"),
                  "--counts", "4,4,2,2"])
        cli.main(["gen", "--seed", "3", "--out", str(tmp_path / "b"),
                  "--counts", "4,4,2,2"])
        img = "source-train/images/source-train_00000.png"
        assert (tmp_path / "a" / img).read_bytes() == (tmp_path / "b" / img).read_bytes()


class TestTrainEvalSsl:
    def test_train_then_eval_then_ssl(self, bench_dir, tmp_path, capsys):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(run_config(bench_dir)))
        run_dir = tmp_path / "run1"
        assert cli.main(["train", "--config", str(cfg_path), "--out", str(run_dir)]) == 0
        capsys.readouterr()
        assert (run_dir / "checkpoints" / "final.ckpt").exists()
        assert (run_dir / "metrics.jsonl").exists()

        rc = cli.main(["eval", "--resume", str(run_dir / "checkpoints" / "final.ckpt"),
                       "--split", "target-val"])
        assert rc == 0
        report = json.loads(capsys.readouterr().out)
        assert report["split"] == "target-val"
        assert "cm" in report["heads"]

        ssl_dir = tmp_path / "run1_ssl"
        rc = cli.main(["ssl", "--resume", str(run_dir / "checkpoints" / "round_0.ckpt"),
                       "--out", str(ssl_dir), "--rounds", "1"])
        assert rc == 0
        assert (ssl_dir / "checkpoints" / "final.ckpt").exists()
        assert (ssl_dir / "pseudo" / "round_1").is_dir()

    def test_eval_unknown_split_is_config_error(self, bench_dir, tmp_path):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(run_config(bench_dir, max_rounds=0)))
        run_dir = tmp_path / "runx"
        cli.main(["train", "--config", str(cfg_path), "--out", str(run_dir)])
        rc = cli.main(["eval", "--resume", str(run_dir / "checkpoints" / "final.ckpt"),
                       "--split", "nope"])
        assert rc == 2

    def test_report_renders_csvs(self, bench_dir, tmp_path):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(run_config(bench_dir)))
        run_dir = tmp_path / "run2"
        cli.main(["train", "--config", str(cfg_path), "--out", str(run_dir)])
        out_dir = tmp_path / "rendered"
        assert cli.main(["report", "--run", str(run_dir), "--out", str(out_dir)]) == 0
        assert (out_dir / "train_curve.csv").exists()
        assert (out_dir / "meta_weights.csv").exists()

    def test_report_deterministic_bytes(self, bench_dir, tmp_path):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(run_config(bench_dir, max_rounds=0)))
        run_dir = tmp_path / "run3"
        cli.main(["train", "--config", str(cfg_path), "--out", str(run_dir)])
        out_a = tmp_path / "ra"
        out_b = tmp_path / "rb"
        cli.main(["report", "--run", str(run_dir), "--out", str(out_a)])
        cli.main(["report", "--run", str(run_dir), "--out", str(out_b)])
        for name in ("train_curve.csv", "meta_weights.csv"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()


class TestErrors:
    def test_unknown_flag_exit_2(self):
        assert cli.main(["gen", "--bogus", "x", "--out", "y"]) == 2

    def test_unknown_command_exit_2(self):
        assert cli.main(["frobnicate"]) == 2

    def test_missing_config_file_exit_2(self, tmp_path):
        assert cli.main(["train", "--config", str(tmp_path / "none.json"),
                         "--out", str(tmp_path / "o")]) == 2

    def test_invalid_json_config_exit_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{nope")
        assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2

    def test_unknown_config_field_exit_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"no_such_option": 1}))
        assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2

    def test_missing_benchmark_exit_2(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"data_root": str(tmp_path / "nodata")}))
        assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2

    def test_bad_checkpoint_is_run_error(self, bench_dir, tmp_path):
        junk = tmp_path / "junk.ckpt"
        junk.write_bytes(b"garbage")
        assert cli.main(["eval", "--resume", str(junk)]) == 1
