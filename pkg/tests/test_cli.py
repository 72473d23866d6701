import csv
import json

import numpy as np
import pytest

from aat.checkpoint import load_checkpoint
from aat.cli import main, summarize

TINY = {
    "seed": 1,
    "data": {"sizes": [24, 24, 12]},
    "train": {
        "channels": [8, 8, 8, 8],
        "burn_in_steps": 3,
        "adapt_steps": 3,
        "batch_source": 4,
        "batch_target": 4,
        "threshold": 0.3,
    },
    "eval_every": 2,
}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(TINY))
    out = root / "out"
    assert run("gen-data", "--config", cfg, "--out", out, "--quiet") == 0
    for extra in (["--mode", "mt-baseline"], ["--mode", "aat"], ["--mode", "aat", "--no-rmo"], ["--mode", "source-only"]):
        assert run("train", "--config", cfg, "--out", out, "--quiet", *extra) == 0
    return cfg, out


class TestGenData:
    def test_counts(self, work):
        _, out = work
        sizes = {}
        for name in ("source_train", "target_train", "target_test"):
            doc = json.loads((out / "data" / f"{name}.json").read_text())
            sizes[name] = len(doc["images"])
            assert len(doc["experiment_id"]) == 16
        assert sizes == {"source_train": 24, "target_train": 24, "target_test": 12}

    def test_byte_identical(self, work, tmp_path):
        cfg, out = work
        assert run("gen-data", "--config", cfg, "--out", tmp_path, "--quiet") == 0
        for name in ("source_train", "target_train", "target_test"):
            assert (tmp_path / "data" / f"{name}.json").read_bytes() == (out / "data" / f"{name}.json").read_bytes()


class TestTrain:
    def test_outputs(self, work):
        _, out = work
        for name in ("mt-baseline", "aat", "aat-apr-only", "source-only"):
            assert (out / f"{name}.ckpt").exists() and (out / f"{name}.csv").exists()
            report = json.loads((out / f"{name}.eval.json").read_text())
            assert 0 <= report["mean_ap"] <= 1 and report["metadata"]["experiment_id"]

    def test_source_only_leaves_target_columns_empty(self, work):
        _, out = work
        rows = list(csv.DictReader(open(out / "source-only.csv")))
        steps = [r for r in rows if r["total"]]
        assert len(steps) == 3 and all(r["l_t"] == "" and r["pseudo_labels"] == "" and r["l_s"] for r in steps)

    def test_rmo_disabled_bank_empty(self, work):
        _, out = work
        rows = list(csv.DictReader(open(out / "aat-apr-only.csv")))
        assert all(r["bank_fill"] == "0" and r["pasted"] == "0" for r in rows if r["total"])

    def test_checkpoint_deterministic(self, work, tmp_path):
        cfg, out = work
        (tmp_path / "data").symlink_to(out / "data")
        assert run("train", "--config", cfg, "--out", tmp_path, "--mode", "aat", "--quiet") == 0
        assert (tmp_path / "aat.ckpt").read_bytes() == (out / "aat.ckpt").read_bytes()

    def test_identity_in_checkpoint(self, work):
        _, out = work
        meta = load_checkpoint(out / "aat.ckpt").metadata
        assert meta["mode"] == "aat" and len(meta["experiment_id"]) == 16

    def test_missing_dataset(self, work, tmp_path, capsys):
        cfg, _ = work
        assert run("train", "--config", cfg, "--out", tmp_path, "--quiet") == 2
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "ConfigError" and err["command"] == "train"

    def test_beta_grid_requires_aat(self, work, tmp_path):
        cfg, out = work
        assert run("train", "--config", cfg, "--out", tmp_path, "--data", out / "data", "--mode", "oracle", "--beta-grid", "1/255") == 2


class TestEval:
    def test_twice_identical(self, work, tmp_path, capsys):
        _, out = work
        assert run("eval", "--checkpoint", out / "aat.ckpt", "--out", tmp_path / "a.json", "--quiet") == 0
        assert run("eval", "--checkpoint", out / "aat.ckpt", "--out", tmp_path / "b.json", "--quiet") == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert "mAP" in capsys.readouterr().out

    def test_corrupt_checkpoint(self, work, tmp_path, capsys):
        _, out = work
        raw = bytearray((out / "aat.ckpt").read_bytes())
        raw[-20] ^= 0x55
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(bytes(raw))
        assert run("eval", "--checkpoint", bad, "--data", out / "data") == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "CheckpointFormatError" and "checksum" in err["message"]

    def test_empty_split_is_an_error(self, work, tmp_path):
        _, out = work
        doc = json.loads((out / "data" / "target_test.json").read_text())
        doc["images"] = []
        (tmp_path / "empty.json").write_text(json.dumps(doc))
        assert run("eval", "--checkpoint", out / "aat.ckpt", "--split", tmp_path / "empty.json", "--quiet") == 1


class TestAttackDemo:
    def test_zero_beta_retains_everything(self, work, tmp_path):
        _, out = work
        path = tmp_path / "demo.json"
        assert run("attack-demo", "--checkpoint", out / "aat.ckpt", "--beta", "0", "--images", 6, "--out", path, "--quiet") == 0
        doc = json.loads(path.read_text())
        c = doc["counts"]
        assert c["corrected"] == c["suppressed"] == c["recovered"] == 0
        assert set(doc["perturbation_histogram"]) == {"0"}

    def test_support(self, work, tmp_path):
        _, out = work
        path = tmp_path / "demo.json"
        assert run("attack-demo", "--checkpoint", out / "aat.ckpt", "--beta", "8/255", "--images", 6, "--out", path, "--quiet") == 0
        doc = json.loads(path.read_text())
        assert set(doc["perturbation_histogram"]) <= {"0", "+beta", "-beta"}
        assert len(doc["images"]) == 6


class TestReport:
    def test_tables(self, work, tmp_path, capsys):
        _, out = work
        logs = [out / f"{n}.csv" for n in ("aat", "mt-baseline")]
        assert run("report", *logs, "--out", tmp_path, "--quiet") == 0
        rows = {r["run"]: r for r in csv.DictReader(open(tmp_path / "summary.csv"))}
        assert float(rows["mt-baseline"]["gain"]) == 0.0
        assert float(rows["aat"]["gain"]) == float(rows["aat"]["map"]) - float(rows["mt-baseline"]["map"])
        curves = list(csv.DictReader(open(tmp_path / "learning_curves.csv")))
        # global iterations: three burn-in steps precede adaptation steps 0, 2 and 3
        assert [int(r["iteration"]) for r in curves if r["run"] == "aat"] == [3, 5, 6]

    def test_single_log(self, work, tmp_path):
        _, out = work
        assert run("report", out / "aat.csv", "--out", tmp_path, "--quiet") == 0
        assert len(list(csv.DictReader(open(tmp_path / "summary.csv")))) == 1

    def test_summarize_gain_arithmetic(self):
        logs = [
            {"run": "b", "experiment_id": "1", "mode": "mt-baseline", "curve": [(0, 0.1), (5, 0.4)]},
            {"run": "a", "experiment_id": "2", "mode": "aat", "curve": [(5, 0.55)]},
        ]
        rows = {r["run"]: r for r in summarize(logs)}
        assert rows["a"]["gain"] == 0.55 - 0.4 and rows["b"]["gain"] == 0.0
        assert np.isnan(summarize(logs[1:])[0]["gain"])


def test_bad_config_exit_code(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text('{"train": {"betta": 1}}')
    assert run("gen-data", "--config", p, "--out", tmp_path) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert "train.betta" in err["message"]
