"""End-to-end command tests, run in process through `main(argv)`.

A tiny synthetic dataset and a two-epoch training config keep each
command in the low-seconds range. Determinism claims are checked on
file bytes, exactly as a caller diffing two output trees would.
"""

import json
import shutil
import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from aggnet.checkpoint import load_checkpoint
from aggnet.cli import main
from aggnet.data import load_dataset, read_image, write_image
from aggnet.train import read_history

CLASSES_TXT = "fine 1 0 0 0\ncoarse 0 0 0 1\n"

CONFIG_TOML = """
[model]
variant = "MS"
stem_depth = 3
module_depths = [2, 2, 2, 2]

[train]
batch_size = 4
initial_lr = 0.003
max_epochs = 2
l2_lambda = 0.0
augment = false
"""


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_dataset")
    classes = root / "classes.txt"
    classes.write_text(CLASSES_TXT)
    out = root / "ds"
    # 5 S1 images per class is the smallest count that still rounds to a
    # nonempty validation split (round(5 * 6/50) = 1).
    rc = main(["synth", "--classes", str(classes), "--out-dir", str(out),
               "--per-class-s1", "5", "--per-class-s2", "2",
               "--gsd", "1.0", "--extent-mm", "16", "--seed", "0"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli_config") / "tiny.toml"
    path.write_text(CONFIG_TOML)
    return path


@pytest.fixture(scope="module")
def train_dir(tmp_path_factory, dataset_dir, config_file):
    out = tmp_path_factory.mktemp("cli_train") / "run"
    rc = main(["train", "--dataset", str(dataset_dir), "--out-dir", str(out),
               "--config", str(config_file), "--seed", "3"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def eval_dir(tmp_path_factory, dataset_dir, train_dir):
    out = tmp_path_factory.mktemp("cli_eval") / "run"
    rc = main(["eval", "--checkpoint", str(train_dir / "model.ckpt"),
               "--dataset", str(dataset_dir), "--out-dir", str(out)])
    assert rc == 0
    return out


class TestExitCodes:
    def test_no_command_is_a_usage_error(self):
        assert main([]) == 1

    def test_unknown_command_is_a_usage_error(self):
        assert main(["frobnicate"]) == 1

    def test_missing_required_argument_is_a_usage_error(self):
        assert main(["eval"]) == 1

    def test_invalid_config_file_exits_1(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("[optimizer]\nlr = 1\n")
        rc = main(["train", "--dataset", str(tmp_path / "nowhere"),
                   "--out-dir", str(tmp_path / "out"), "--config", str(bad)])
        assert rc == 1

    def test_missing_dataset_exits_2(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        rc = main(["train", "--dataset", str(empty),
                   "--out-dir", str(tmp_path / "out")])
        assert rc == 2

    def test_help_exits_0(self, capsys):
        assert main(["--help"]) == 0
        assert "rectify" in capsys.readouterr().out


class TestRectify:
    @pytest.fixture()
    def photo(self, tmp_path, rng):
        # Quantized to the 8-bit grid so PNG round trips are lossless.
        px = rng.integers(0, 256, size=(16, 20, 3)).astype(np.float64) / 255.0
        path = tmp_path / "photo.png"
        write_image(path, px, bits=8)
        # Markers describe pixel = 2 * object_mm + 2: a 2 px/mm scale with a
        # one-millimeter offset that keeps the target region strictly inside
        # the photo (boundary pixels would fall prey to rounding in H).
        markers = tmp_path / "markers.txt"
        markers.write_text(
            "# X_mm Y_mm u_px v_px\n"
            "0 0 2 2\n"
            "8 0 18 2\n"
            "0 6 2 14\n"
            "8 6 18 14\n"
            "4 3 10 8\n"
            "2 5 6 12\n")
        return path, markers

    def test_integer_scale_copies_source_pixels(self, tmp_path, photo, capsys):
        image, markers = photo
        out = tmp_path / "rect.png"
        rc = main(["rectify", "--image", str(image), "--markers", str(markers),
                   "--gsd", "2", "--extent", "8x6", "--out", str(out)])
        assert rc == 0
        stdout = capsys.readouterr().out
        assert "RMSE" in stdout
        assert "wrote 16x12 px" in stdout
        # 2 px/mm over 8x6 mm reads source pixels at exact integer offsets.
        assert np.array_equal(read_image(out), read_image(image)[2:14, 2:18])

    def test_run_json_records_the_fit(self, tmp_path, photo):
        image, markers = photo
        out = tmp_path / "rect.png"
        main(["rectify", "--image", str(image), "--markers", str(markers),
              "--gsd", "2", "--extent", "8x6", "--out", str(out)])
        record = json.loads((tmp_path / "rect.png.run.json").read_text())
        assert record["command"] == "rectify"
        assert record["reprojection_rmse_px"] < 1e-6

    def test_malformed_extent_exits_1(self, tmp_path, photo):
        image, markers = photo
        rc = main(["rectify", "--image", str(image), "--markers", str(markers),
                   "--gsd", "2", "--extent", "1x2x3",
                   "--out", str(tmp_path / "rect.png")])
        assert rc == 1


class TestSynth:
    def test_dataset_is_loadable(self, dataset_dir):
        ds = load_dataset(dataset_dir)
        assert ds.classes == ("fine", "coarse")
        assert len(ds.samples) == 14
        assert all(s.image.pixels.shape == (16, 16, 3) for s in ds.samples)
        sets = [s.sample_set for s in ds.samples]
        assert sets.count("S1") == 10 and sets.count("S2") == 4

    def test_run_json_written(self, dataset_dir):
        record = json.loads((dataset_dir / "run.json").read_text())
        assert record["command"] == "synth"
        assert record["classes"] == ["fine", "coarse"]


class TestTrain:
    def test_artifact_set(self, train_dir):
        for name in ("model.ckpt", "history.csv", "history.svg", "run.json"):
            assert (train_dir / name).is_file()

    def test_checkpoint_reflects_config_and_seed(self, train_dir):
        ck = load_checkpoint(train_dir / "model.ckpt")
        assert ck.config.variant == "MS"
        assert ck.config.stem_depth == 3
        assert ck.config.module_depths == (2, 2, 2, 2)
        assert ck.config.class_count == 2
        assert ck.seed == 3

    def test_run_json_matches_history(self, train_dir):
        record = json.loads((train_dir / "run.json").read_text())
        history = read_history(train_dir / "history.csv")
        assert record["command"] == "train"
        assert record["seed"] == 3
        assert record["epochs_run"] == len(history) == 2

    def test_rerun_is_byte_identical(self, tmp_path, dataset_dir, config_file,
                                     train_dir):
        out = tmp_path / "again"
        rc = main(["train", "--dataset", str(dataset_dir),
                   "--out-dir", str(out), "--config", str(config_file),
                   "--seed", "3"])
        assert rc == 0
        for name in ("model.ckpt", "history.csv", "run.json"):
            assert (out / name).read_bytes() == (train_dir / name).read_bytes()


class TestEval:
    def test_artifact_set(self, eval_dir):
        for name in ("predictions.csv", "metrics.json", "confusion.txt",
                     "confusion.svg", "run.json"):
            assert (eval_dir / name).is_file()

    def test_predictions_cover_the_test_split(self, eval_dir):
        lines = (eval_dir / "predictions.csv").read_text().splitlines()
        assert lines[0] == "image_id,predicted_class"
        assert len(lines) == 1 + 4
        for line in lines[1:]:
            name, pred = line.split(",")
            assert "_s2_" in name
            assert pred in ("fine", "coarse")

    def test_metrics_count_the_scored_samples(self, eval_dir):
        data = json.loads((eval_dir / "metrics.json").read_text())
        assert int(np.sum(data["confusion_counts"])) == 4
        assert data["classes"] == ["fine", "coarse"]

    def test_confusion_svg_parses(self, eval_dir):
        root = ET.parse(eval_dir / "confusion.svg").getroot()
        assert root.tag.endswith("svg")

    def test_rerun_is_byte_identical(self, tmp_path, dataset_dir, train_dir,
                                     eval_dir):
        out = tmp_path / "again"
        rc = main(["eval", "--checkpoint", str(train_dir / "model.ckpt"),
                   "--dataset", str(dataset_dir), "--out-dir", str(out)])
        assert rc == 0
        for name in ("predictions.csv", "metrics.json", "confusion.txt",
                     "confusion.svg"):
            assert (out / name).read_bytes() == (eval_dir / name).read_bytes()

    def test_split_all_scores_every_sample(self, tmp_path, dataset_dir,
                                           train_dir):
        out = tmp_path / "all"
        rc = main(["eval", "--checkpoint", str(train_dir / "model.ckpt"),
                   "--dataset", str(dataset_dir), "--out-dir", str(out),
                   "--split", "all"])
        assert rc == 0
        lines = (out / "predictions.csv").read_text().splitlines()
        assert len(lines) == 1 + 14


class TestScoreFile:
    def test_round_trip_matches_eval(self, tmp_path, dataset_dir, eval_dir):
        out = tmp_path / "scored"
        rc = main(["score-file", "--dataset", str(dataset_dir),
                   "--predictions", str(eval_dir / "predictions.csv"),
                   "--out-dir", str(out)])
        assert rc == 0
        ours = json.loads((out / "metrics.json").read_text())
        theirs = json.loads((eval_dir / "metrics.json").read_text())
        assert ours["oa_percent"] == theirs["oa_percent"]
        assert ours["confusion_counts"] == theirs["confusion_counts"]
        record = json.loads((out / "run.json").read_text())
        assert record["command"] == "score-file"
        assert record["scored"] == 4

    def test_empty_prediction_file_is_a_clean_no_op(self, tmp_path,
                                                    dataset_dir, capsys):
        preds = tmp_path / "empty.csv"
        preds.write_text("image_id,predicted_class\n")
        out = tmp_path / "scored"
        rc = main(["score-file", "--dataset", str(dataset_dir),
                   "--predictions", str(preds), "--out-dir", str(out)])
        assert rc == 0
        assert "nothing to score" in capsys.readouterr().out
        assert not (out / "metrics.json").exists()
        assert json.loads((out / "run.json").read_text())["scored"] == 0


class TestGradcheck:
    def test_single_variant_passes(self, capsys):
        rc = main(["gradcheck", "--variant", "MS", "--seed", "0"])
        assert rc == 0
        stdout = capsys.readouterr().out
        assert "OK" in stdout
        assert "max relative error" in stdout


class TestGsdStudy:
    def test_single_scale_study(self, tmp_path, dataset_dir, config_file,
                                capsys):
        out = tmp_path / "study"
        rc = main(["gsd-study", "--dataset", str(dataset_dir),
                   "--gsds", "1.0", "--runs", "1", "--out-dir", str(out),
                   "--config", str(config_file), "--seed", "1"])
        assert rc == 0
        assert "study written" in capsys.readouterr().out
        lines = (out / "study.csv").read_text().splitlines()
        assert lines[0] == "gsd_px_per_mm,mean_oa,sigma_oa,runs_ok"
        gsd, mean, _, ok = lines[1].split(",")
        assert float(gsd) == 1.0
        assert 0.0 <= float(mean) <= 100.0
        assert ok == "1"
        root = ET.parse(out / "gsd_curve.svg").getroot()
        assert root.tag.endswith("svg")
        record = json.loads((out / "run.json").read_text())
        assert record["command"] == "gsd-study"
        assert record["gsds"] == [1.0]
        assert record["failures"] == []

    def test_nonpositive_scale_exits_1(self, tmp_path, dataset_dir):
        rc = main(["gsd-study", "--dataset", str(dataset_dir),
                   "--gsds", "0", "--out-dir", str(tmp_path / "study")])
        assert rc == 1


def test_console_script_is_installed():
    exe = shutil.which("aggnet")
    if exe is None:
        pytest.skip("package not installed with entry points")
    proc = subprocess.run([exe, "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "rectify" in proc.stdout


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "aggnet.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
