import csv
import json
import subprocess
import sys
import xml.etree.ElementTree as ET
from pathlib import Path

import pytest

from poseaug.cli import main

TINY = ["--identities", "4", "--emotions", "2", "--poses", "2",
        "--face-dim", "32", "--pose-dim", "32", "--image-size", "16",
        "--patch", "8", "--heads", "2", "--layers", "1",
        "--model-dim", "16", "--ff-dim", "16",
        "--train-count", "2", "--val-count", "0", "--test-count", "2",
        "--steps", "3", "--batch-size", "4"]


def run(out_dir, *argv):
    return main(["--out", str(out_dir), "--seed", "0", *argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One synth->train run shared by the read-only downstream tests."""
    out = tmp_path_factory.mktemp("pipeline")
    assert run(out, "synth", *TINY) == 0
    assert run(out, "train", *TINY) == 0
    return out


class TestSynth:
    def test_writes_three_files_with_expected_rows(self, tmp_path):
        assert run(tmp_path, "synth", *TINY) == 0
        for name in ("embeddings.csv", "landmarks.csv", "factors.json"):
            assert (tmp_path / name).exists()
        with open(tmp_path / "embeddings.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 1 + 4 * 2 * 2

    def test_config_file_merged_and_flag_wins(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"identities": 4, "emotions": 3,
                                   "poses": 2, "image_size": 16}))
        code = main(["--config", str(cfg), "--out", str(tmp_path),
                     "--seed", "0", "synth", "--emotions", "2"])
        assert code == 0
        with open(tmp_path / "embeddings.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 1 + 4 * 2 * 2  # flag overrode emotions=3

    def test_unknown_config_field_exits_1(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"identitees": 4}))
        assert main(["--config", str(cfg), "synth"]) == 1
        assert "identitees" in capsys.readouterr().err

    def test_invalid_value_exits_1(self, tmp_path, capsys):
        assert run(tmp_path, "synth", "--identities", "1") == 1
        assert "identities" in capsys.readouterr().err


class TestTrain:
    def test_artifacts(self, pipeline):
        for name in ("final.ckpt", "best.ckpt", "loss_curve.csv",
                     "loss_curve.svg"):
            assert (pipeline / name).exists()
        with open(pipeline / "loss_curve.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["step", "bce", "triplet_pose", "triplet_identity",
                           "triplet_emotion", "total"]
        assert len(rows) == 1 + 3  # header + one row per step

    def test_loss_curve_svg_is_well_formed_xml(self, pipeline):
        ET.parse(pipeline / "loss_curve.svg")

    def test_rerun_is_byte_identical(self, pipeline, tmp_path):
        assert run(tmp_path, "synth", *TINY) == 0
        assert run(tmp_path, "train", *TINY) == 0
        assert ((tmp_path / "final.ckpt").read_bytes()
                == (pipeline / "final.ckpt").read_bytes())
        assert ((tmp_path / "loss_curve.csv").read_bytes()
                == (pipeline / "loss_curve.csv").read_bytes())


class TestAugment:
    def test_all_poses_by_default(self, pipeline, tmp_path):
        code = run(tmp_path, "augment", *TINY,
                   "--checkpoint", str(pipeline / "final.ckpt"))
        assert code == 0
        with open(tmp_path / "augmented.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        assert header[:5] == ["identity", "emotion", "pose", "base_pose",
                              "self_augmented"]
        assert len(header) == 5 + 32
        assert len(body) == 4 * 2 * 2 * 2  # every sample x every pose
        for row in body:
            assert row[4] == str(int(row[2] == row[3]))

    def test_single_target_pose(self, pipeline, tmp_path):
        code = run(tmp_path, "augment", *TINY,
                   "--checkpoint", str(pipeline / "final.ckpt"),
                   "--target-pose", "pose1")
        assert code == 0
        with open(tmp_path / "augmented.csv", newline="") as fh:
            body = list(csv.reader(fh))[1:]
        assert len(body) == 4 * 2 * 2
        assert all(r[2] == "pose1" for r in body)

    def test_unknown_pose_exits_1_and_lists_known(self, pipeline, tmp_path,
                                                  capsys):
        code = run(tmp_path, "augment", *TINY,
                   "--checkpoint", str(pipeline / "final.ckpt"),
                   "--target-pose", "profile")
        assert code == 1
        err = capsys.readouterr().err
        assert "profile" in err and "pose0" in err

    def test_missing_checkpoint_exits_2(self, pipeline, tmp_path, capsys):
        code = run(tmp_path, "augment", *TINY,
                   "--checkpoint", str(tmp_path / "nope.ckpt"))
        assert code == 2


@pytest.fixture(scope="module")
def eval_out(pipeline, tmp_path_factory):
    out = tmp_path_factory.mktemp("eval")
    code = run(out, "eval", *TINY,
               "--checkpoint", str(pipeline / "final.ckpt"))
    assert code == 0
    return out


class TestEval:
    def test_report_has_nine_cells(self, eval_out):
        report = json.loads((eval_out / "report.json").read_text())
        cells = [report["accuracies"][t][e]
                 for t in ("identity", "pose", "emotion")
                 for e in ("exp1", "exp2", "exp3")]
        assert len(cells) == 9
        assert all(0.0 <= c <= 1.0 for c in cells)

    def test_roc_and_confusion_csvs(self, eval_out):
        for target in ("identity", "pose", "emotion"):
            with open(eval_out / f"roc_{target}.csv", newline="") as fh:
                rows = list(csv.reader(fh))
            assert rows[0] == ["class", "threshold", "fpr", "tpr"]
            assert len(rows) > 1
            with open(eval_out / f"confusion_{target}.csv", newline="") as fh:
                rows = list(csv.reader(fh))
            assert rows[0][0] == "label"
            n = len(rows[0]) - 1
            assert len(rows) == 1 + n

    def test_svgs_well_formed(self, eval_out):
        for target in ("identity", "pose", "emotion"):
            ET.parse(eval_out / f"roc_{target}.svg")
            ET.parse(eval_out / f"confusion_{target}.svg")
        ET.parse(eval_out / "loss_curve.svg")


class TestGradcheck:
    def test_passes_at_default_tolerance(self, tmp_path, capsys):
        assert run(tmp_path, "gradcheck", *TINY, "--coords", "16") == 0
        assert "max rel err" in capsys.readouterr().out

    def test_gradcheck_failure_exits_3(self, tmp_path, capsys, monkeypatch):
        from poseaug import cli as cli_module
        from poseaug.tensor import CheckReport, CoordinateFailure

        def failing_check(*args, **kwargs):
            bad = CoordinateFailure(param="w", index=(0,), analytic=1.0,
                                    numeric=2.0, rel_err=0.5)
            return CheckReport(max_rel_err=0.5, n_checked=64,
                               tolerance=1e-4, failures=[bad])

        monkeypatch.setattr(cli_module, "gradient_check", failing_check)
        code = run(tmp_path, "gradcheck", *TINY, "--coords", "16")
        assert code == 3
        err = capsys.readouterr().err
        assert "verification failure" in err

    def test_keep_dropout_refused(self, tmp_path, capsys):
        code = run(tmp_path, "gradcheck", *TINY, "--keep-dropout")
        assert code == 1
        assert "deterministic" in capsys.readouterr().err


class TestCheckpointRoundTrip:
    def test_bitwise_round_trip(self, pipeline, tmp_path):
        from poseaug.training import load_checkpoint, save_checkpoint
        src = pipeline / "final.ckpt"
        model, manifest = load_checkpoint(src)
        copy = tmp_path / "copy.ckpt"
        save_checkpoint(copy, model, manifest["step"],
                        manifest["loss_history"], manifest["extra_config"])
        assert copy.read_bytes() == src.read_bytes()


class TestConsoleScript:
    def test_help_runs(self):
        proc = subprocess.run([sys.executable, "-m", "poseaug.cli", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "synth" in proc.stdout and "gradcheck" in proc.stdout
