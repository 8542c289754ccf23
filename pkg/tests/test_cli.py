import json
import subprocess
import sys

import numpy as np
import pytest

from partialseg import (
    TrainConfig,
    init_state,
    load_checkpoint,
    load_dataset,
    parameters_equal,
    read_label_png,
    read_manifest,
)
from partialseg.cli import main


def _exit_code(argv):
    try:
        main(argv)
    except SystemExit as e:
        return e.code or 0
    return 0


def _run(argv, capsys):
    code = _exit_code(argv)
    out, err = capsys.readouterr()
    return code, out, err


TRAIN_CONFIG = {"stage1_epochs": 1, "stage2_max_steps": 1, "batch_size": 4, "depth": 2, "base_filters": 8}


@pytest.fixture(scope="module")
def cli_tree(tmp_path_factory):
    """Dataset + finished two-stage run shared by the read-only CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert _exit_code(["gen-data", "--out-dir", str(data), "--splits", "2,0,1", "--seed", "11"]) == 0
    cfg_path = root / "train_config.json"
    cfg_path.write_text(json.dumps(TRAIN_CONFIG))
    run = root / "run"
    code = _exit_code(
        ["train", "--manifest", str(data / "manifest.json"), "--out-dir", str(run),
         "--stage", "both", "--config", str(cfg_path), "--seed", "5"]
    )
    assert code == 0
    ckpts = sorted((run / "checkpoints").glob("*.pt"), key=lambda p: int(p.stem.split("_")[1]))
    return {"root": root, "manifest": data / "manifest.json", "run": run,
            "config": cfg_path, "checkpoint": ckpts[-1]}


class TestGenData:
    def test_splits_option(self, tmp_path, capsys):
        code, out, _ = _run(["gen-data", "--out-dir", str(tmp_path / "d"), "--splits", "2,1,1", "--seed", "3"], capsys)
        assert code == 0
        manifest = tmp_path / "d" / "manifest.json"
        assert out.strip() == str(manifest)
        _, records = read_manifest(manifest)
        assert [r.split for r in records] == ["train", "train", "val", "test"]

    def test_count_and_splits_conflict(self, tmp_path, capsys):
        code, _, err = _run(["gen-data", "--out-dir", str(tmp_path / "d"), "--count", "1", "--splits", "1,0,0"], capsys)
        assert code == 2 and "exactly one" in err
        code, _, err = _run(["gen-data", "--out-dir", str(tmp_path / "d")], capsys)
        assert code == 2

    def test_malformed_splits(self, tmp_path, capsys):
        code, _, err = _run(["gen-data", "--out-dir", str(tmp_path / "d"), "--splits", "1,2"], capsys)
        assert code == 2 and "three counts" in err
        code, _, err = _run(["gen-data", "--out-dir", str(tmp_path / "d"), "--splits", "a,b,c"], capsys)
        assert code == 2 and "integer list" in err


class TestSimulatePartial:
    def test_round_robin(self, cli_tree, capsys):
        code, out, _ = _run(
            ["simulate-partial", "--manifest", str(cli_tree["manifest"]), "--policy",
             "one_label_round_robin", "--seed", "0", "--out-manifest", "cli_partial.json"],
            capsys,
        )
        assert code == 0
        out_path = cli_tree["manifest"].parent / "cli_partial.json"
        assert out.strip() == str(out_path)
        _, records = read_manifest(out_path)
        train = [r for r in records if r.split == "train"]
        assert [r.annotated_classes for r in train] == [(1,), (2,)]

    def test_unknown_policy(self, cli_tree, capsys):
        code, _, err = _run(
            ["simulate-partial", "--manifest", str(cli_tree["manifest"]), "--policy", "nope"], capsys
        )
        assert code == 2 and "unknown policy" in err


class TestTrain:
    def test_two_stage_run_artifacts(self, cli_tree):
        run = cli_tree["run"]
        assert (run / "config.json").exists()
        assert (run / "history.csv").exists()
        names = {p.name for p in (run / "checkpoints").glob("*.pt")}
        # one epoch of 2 steps, then one dual step
        assert names == {"step_2.pt", "step_3.pt"}
        payload = json.loads((run / "config.json").read_text())
        assert payload["seed"] == 5
        assert payload["train"]["stage1_epochs"] == 1

    def test_zero_epoch_checkpoint_equals_init(self, cli_tree, tmp_path, capsys):
        out_dir = tmp_path / "run0"
        code, out, _ = _run(
            ["train", "--manifest", str(cli_tree["manifest"]), "--out-dir", str(out_dir),
             "--stage", "1", "--config", str(cli_tree["config"]), "--seed", "5", "--epochs", "0"],
            capsys,
        )
        assert code == 0
        assert "finished at step 0 (stage 1)" in out
        model, meta = load_checkpoint(out_dir / "checkpoints" / "step_0.pt")
        dataset = load_dataset(cli_tree["manifest"], expand_full_train=True)
        fresh = init_state(dataset, TrainConfig(seed=5, **TRAIN_CONFIG))
        assert parameters_equal(model, fresh.model)

    def test_unknown_config_key(self, cli_tree, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"stage1_epochs": 1, "warmup": 5}))
        code, _, err = _run(
            ["train", "--manifest", str(cli_tree["manifest"]), "--out-dir", str(tmp_path / "r"),
             "--config", str(bad)], capsys,
        )
        assert code == 2 and "unknown config keys" in err and "warmup" in err

    def test_non_object_config(self, cli_tree, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("[1, 2]")
        code, _, err = _run(
            ["train", "--manifest", str(cli_tree["manifest"]), "--out-dir", str(tmp_path / "r"),
             "--config", str(bad)], capsys,
        )
        assert code == 2 and "JSON object" in err


class TestPredict:
    def test_writes_label_pngs(self, cli_tree, tmp_path, capsys):
        out_dir = tmp_path / "preds"
        code, out, _ = _run(
            ["predict", "--checkpoint", str(cli_tree["checkpoint"]), "--manifest",
             str(cli_tree["manifest"]), "--split", "test", "--out-dir", str(out_dir)],
            capsys,
        )
        assert code == 0
        assert "wrote 1 predictions" in out
        pred = read_label_png(out_dir / "pred_phantom_00002.png")
        assert pred.shape == (64, 64)
        assert pred.max() < 4

    def test_empty_split(self, cli_tree, tmp_path, capsys):
        code, _, err = _run(
            ["predict", "--checkpoint", str(cli_tree["checkpoint"]), "--manifest",
             str(cli_tree["manifest"]), "--split", "val", "--out-dir", str(tmp_path / "p")],
            capsys,
        )
        assert code == 2 and "empty" in err


class TestEval:
    def test_report_json(self, cli_tree, tmp_path, capsys):
        out_dir = tmp_path / "eval"
        code, out, _ = _run(
            ["eval", "--checkpoint", str(cli_tree["checkpoint"]), "--manifest",
             str(cli_tree["manifest"]), "--split", "test", "--out-dir", str(out_dir)],
            capsys,
        )
        assert code == 0
        payload = json.loads(out)
        assert set(payload) == {"per_class", "mean_dice", "n_samples", "checkpoint", "seed"}
        assert payload["n_samples"] == 1
        assert set(payload["per_class"]) == {"disk", "annulus", "crescent"}
        saved = json.loads((out_dir / "report.json").read_text())
        assert saved == payload
        assert (out_dir / "per_sample.csv").exists()

    def test_broken_checkpoint_is_runtime_error(self, cli_tree, tmp_path, capsys):
        orphan = tmp_path / "orphan.pt"
        orphan.write_bytes(b"not a checkpoint")
        code, _, err = _run(
            ["eval", "--checkpoint", str(orphan), "--manifest", str(cli_tree["manifest"])], capsys
        )
        assert code == 3


class TestVerifyCompat:
    def test_weak_ce_incompatible(self, capsys):
        code, out, _ = _run(
            ["verify-compat", "--loss", "weak_ce", "--m", "3", "--gt", "2",
             "--ann-a", "0", "--ann-b", "1", "--grid-step", "0.05"],
            capsys,
        )
        assert code == 0
        payload = json.loads(out)
        assert payload["verdict"] == "INCOMPATIBLE"
        assert payload["d1_size"] == 1 and payload["d2_size"] == 1

    def test_compatible_ce_compatible(self, capsys):
        code, out, _ = _run(
            ["verify-compat", "--loss", "compatible_ce", "--m", "3", "--gt", "2",
             "--ann-a", "0", "--ann-b", "1", "--grid-step", "0.05"],
            capsys,
        )
        assert code == 0
        assert json.loads(out)["verdict"] == "COMPATIBLE"

    def test_bad_annotation_list(self, capsys):
        code, _, err = _run(
            ["verify-compat", "--loss", "weak_ce", "--m", "3", "--gt", "2",
             "--ann-a", "x", "--ann-b", "1"], capsys,
        )
        assert code == 2 and "--ann-a" in err

    def test_gt_out_of_range(self, capsys):
        code, _, err = _run(
            ["verify-compat", "--loss", "weak_ce", "--m", "3", "--gt", "7",
             "--ann-a", "0", "--ann-b", "1"], capsys,
        )
        assert code == 2


class TestAblate:
    def test_unknown_row(self, cli_tree, tmp_path, capsys):
        code, _, err = _run(
            ["ablate", "--manifest", str(cli_tree["manifest"]), "--out-dir", str(tmp_path / "a"),
             "--rows", "nope"], capsys,
        )
        assert code == 2 and "unknown ablation rows" in err

    def test_single_row_runs(self, cli_tree, tmp_path, capsys):
        code, out, _ = _run(
            ["ablate", "--manifest", str(cli_tree["manifest"]), "--out-dir", str(tmp_path / "a"),
             "--config", str(cli_tree["config"]), "--seed", "5", "--rows", "baseline_partial_ce"],
            capsys,
        )
        assert code == 0
        assert "baseline_partial_ce" in out


class TestSupervisionStudy:
    def test_single_fraction(self, cli_tree, tmp_path, capsys):
        code, out, _ = _run(
            ["supervision-study", "--manifest", str(cli_tree["manifest"]), "--out-dir",
             str(tmp_path / "s"), "--config", str(cli_tree["config"]), "--fractions", "1.0"],
            capsys,
        )
        assert code == 0
        assert "full_100" in out

    def test_bad_fraction_list(self, cli_tree, tmp_path, capsys):
        code, _, err = _run(
            ["supervision-study", "--manifest", str(cli_tree["manifest"]), "--out-dir",
             str(tmp_path / "s"), "--fractions", "1.0,x"], capsys,
        )
        assert code == 2 and "float list" in err


def test_console_script_help():
    proc = subprocess.run(
        [sys.executable, "-m", "partialseg.cli", "--help"], capture_output=True, text=True
    )
    assert proc.returncode == 0
    for cmd in ("gen-data", "train", "eval", "verify-compat", "ablate"):
        assert cmd in proc.stdout
