import csv
import json

import pytest

from irab.cli import main, median_rows, read_run
from irab.config import ExperimentConfig, save_config
from irab.simulation import CSV_FIELDS
from irab.scenes import manifest_checksum, read_dataset
from irab.training import TrainConfig


@pytest.fixture(scope="module")
def cli_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", "--out", str(out), "--sizes", "6", "4", "4", "--seed", "3"]) == 0
    return out


@pytest.fixture
def config_file(tmp_path, cli_data):
    cfg = ExperimentConfig(train=TrainConfig(method="irast", epochs=1, steps_per_epoch=3,
                                             dataset_dir=str(cli_data)))
    return save_config(cfg, tmp_path / "cfg.json")


class TestGenData:
    def test_layout(self, cli_data):
        data = read_dataset(cli_data)
        assert (len(data.labeled), len(data.unlabeled), len(data.test)) == (6, 4, 4)

    def test_same_seed_same_manifest(self, tmp_path, cli_data):
        main(["gen-data", "--out", str(tmp_path / "b"), "--sizes", "6", "4", "4", "--seed", "3"])
        assert manifest_checksum(tmp_path / "b") == manifest_checksum(cli_data)

    def test_fixed_count_sidecar_scan(self, tmp_path):
        (tmp_path / "s.json").write_text('{"count_range": [5, 5]}')
        assert main(["gen-data", "--spec", str(tmp_path / "s.json"), "--out", str(tmp_path / "d"),
                     "--sizes", "3", "3", "3"]) == 0
        side = sorted((tmp_path / "d").rglob("scene_*.json"))
        assert len(side) == 9
        assert all(len(json.loads(p.read_text())["dots"]) == 5 for p in side)

    def test_bad_spec_is_config_error(self, tmp_path):
        (tmp_path / "s.json").write_text('{"height": 30}')
        assert main(["gen-data", "--spec", str(tmp_path / "s.json"), "--out", str(tmp_path / "x")]) == 1


class TestExitCodes:
    def test_no_command(self):
        assert main([]) == 1

    def test_missing_required(self):
        assert main(["train"]) == 1

    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.json")]) == 1

    def test_malformed_config(self, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        assert main(["train", "--config", str(tmp_path / "c.json")]) == 1

    def test_no_dataset(self, tmp_path):
        save_config(ExperimentConfig(), tmp_path / "c.json")
        assert main(["train", "--config", str(tmp_path / "c.json")]) == 2

    def test_corrupt_checkpoint(self, tmp_path, cli_data):
        (tmp_path / "x.ckpt").write_bytes(b"garbage")
        assert main(["eval", "--checkpoint", str(tmp_path / "x.ckpt"), "--data", str(cli_data)]) == 2

    def test_bad_noise(self):
        assert main(["simulate", "--noise", "pink:1", "--seeds", "1"]) == 1


def test_train_eval_report(tmp_path, config_file, cli_data, capsys):
    runs = tmp_path / "runs"
    for method in ("label-only", "irast"):
        assert main(["train", "--config", str(config_file), "--method", method, "--out", str(runs)]) == 0
    run = runs / "irast-0"
    assert {"config.json", "metrics.jsonl", "best.ckpt", "timing.jsonl"} <= {p.name for p in run.iterdir()}
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(run / "best.ckpt"), "--data", str(cli_data)]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["n"] == 4 and res["role"] == "test"
    test_rec = json.loads((run / "metrics.jsonl").read_text().splitlines()[-1])
    assert res["mae"] == pytest.approx(test_rec["mae"], rel=1e-12)
    out = tmp_path / "report.csv"
    assert main(["report", "--runs", str(runs), "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["seed"] for r in rows].count("median") == 2
    assert out.with_suffix(".txt").is_file()


def test_train_audit_label_only(tmp_path, config_file):
    audit = tmp_path / "audit.txt"
    assert main(["train", "--config", str(config_file), "--method", "label-only", "--out", str(tmp_path),
                 "--audit", str(audit)]) == 0
    paths = audit.read_text().split()
    assert paths and not any("unlabeled" in p for p in paths)


def test_saved_config_reproduces(tmp_path, config_file):
    assert main(["train", "--config", str(config_file), "--out", str(tmp_path / "a")]) == 0
    saved = tmp_path / "a" / "irast-0" / "config.json"
    assert main(["train", "--config", str(saved), "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "irast-0" / "metrics.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "irast-0" / "metrics.jsonl").read_bytes()


def test_simulate_csv(tmp_path, capsys):
    out = tmp_path / "sim.csv"
    assert main(["simulate", "--noise", "logit-gaussian:1.0", "--seeds", "3", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 9 and set(rows[0]) == set(CSV_FIELDS)
    assert "irast" in capsys.readouterr().err


def test_ablate(tmp_path, config_file):
    out = tmp_path / "abl.csv"
    assert main(["ablate", "--config", str(config_file), "--factor", "t_p", "--values", "0.6,0.9",
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["value"] for r in rows] == ["0.6", "0.9"]
    assert len({r["manifest_sha256"] for r in rows}) == 1


def write_run(d, method, seed, mae, wall=None):
    d.mkdir(parents=True)
    recs = [{"kind": "eval", "epoch": 0, "pl_coverage": 0.5, "pl_precision": 0.9},
            {"kind": "test", "method": method, "seed": seed, "mae": mae, "mse": mae + 1, "n_test": 4,
             "n_labeled_train": 3, "n_val": 1, "n_unlabeled": 4}]
    (d / "metrics.jsonl").write_text("".join(json.dumps(r) + "\n" for r in recs))
    if wall is not None:
        (d / "timing.jsonl").write_text(json.dumps({"wall_time_s": wall}) + "\n")


class TestReport:
    def test_median_of_three(self, tmp_path):
        for seed, mae in enumerate((3.0, 1.0, 2.0)):
            write_run(tmp_path / f"irast-{seed}", "irast", seed, mae)
        rows = [read_run(p) for p in sorted(tmp_path.iterdir())]
        med = median_rows(rows)
        assert len(med) == 1 and med[0]["mae"] == 2.0 and med[0]["mse"] == 3.0

    def test_fields(self, tmp_path):
        write_run(tmp_path / "r", "mt", 4, 1.5, wall=12.5)
        row = read_run(tmp_path / "r")
        assert row["wall_time_s"] == 12.5 and row["n_labeled"] == 4 and row["pl_coverage"] == 0.5

    def test_missing_timing(self, tmp_path):
        write_run(tmp_path / "r", "mt", 4, 1.5)
        assert read_run(tmp_path / "r")["wall_time_s"] is None

    def test_no_test_record(self, tmp_path):
        (tmp_path / "r").mkdir()
        (tmp_path / "r" / "metrics.jsonl").write_text('{"kind": "eval"}\n')
        assert main(["report", "--runs", str(tmp_path / "r"), "--out", str(tmp_path / "o.csv")]) == 2

    def test_missing_dir(self, tmp_path):
        assert main(["report", "--runs", str(tmp_path / "none"), "--out", str(tmp_path / "o.csv")]) == 2
