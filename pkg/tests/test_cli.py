import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from jasrnet import data, plots, synthetic
from jasrnet.cli import main
from jasrnet.datasets import FaceDataset

TRAIN_CFG = """# desk-scale run
channels = 4
extraction_blocks = 1
alignment_stages = 2
epochs = 2
batch_size = 75
base_lr = 1e-3
lr_drops = []
val_fraction = 0.0
train_data = "prep/train.jasrdata"
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    synthetic.write_corpus(root / "raw", 10, seed=2)
    assert main(["prepare", "--manifest", str(root / "raw" / "manifest.tsv"), "--out", str(root / "prep")]) == 0
    assert main(["prepare", "--manifest", str(root / "raw" / "manifest.tsv"), "--out", str(root / "prep"),
                 "--split", "test"]) == 0
    (root / "train.cfg").write_text(TRAIN_CFG)
    assert main(["train", "--config", str(root / "train.cfg"), "--out", str(root / "run")]) == 0
    return root


def test_prepare_counts(work):
    train = FaceDataset.load(work / "prep" / "train.jasrdata")
    test = FaceDataset.load(work / "prep" / "test.jasrdata")
    assert len(train) == 150 and len(test) == 10
    assert train.hr.shape[1:] == (128, 128, 3) and train.lr.shape[1:] == (128, 128, 3)
    assert train.heatmaps.shape[1:] == (68, 16, 16)
    splits = json.loads((work / "prep" / "splits.json").read_text())
    assert splits["train"]["count"] == 150 and splits["test"]["copies"] == 0


def test_prepare_byte_identical(work, tmp_path):
    assert main(["prepare", "--manifest", str(work / "raw" / "manifest.tsv"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "train.jasrdata").read_bytes() == (work / "prep" / "train.jasrdata").read_bytes()


def test_prepare_missing_annotation(work, tmp_path, capsys):
    lines = (work / "raw" / "manifest.tsv").read_text().splitlines()
    lines[3] = lines[3].replace(".pts", "_gone.pts")
    for p in (work / "raw").iterdir():
        (tmp_path / p.name).write_bytes(p.read_bytes())
    (tmp_path / "m.tsv").write_text("\n".join(lines) + "\n")
    code = main(["prepare", "--manifest", str(tmp_path / "m.tsv"), "--out", str(tmp_path / "out"), "--copies", "0"])
    assert code == 1
    err = capsys.readouterr().err
    assert "face_0003_gone.pts" in err
    assert "face_0003_gone.pts" in (tmp_path / "out" / "train_errors.log").read_text()


def test_prepare_flip_without_mirror(work, tmp_path, capsys):
    code = main(["prepare", "--manifest", str(work / "raw" / "manifest.tsv"), "--out", str(tmp_path),
                 "--profile", "custom:68"])
    assert code == 0  # flipping is switched off for profiles without a mirror map
    assert len(FaceDataset.load(tmp_path / "train.jasrdata")) == 150


def test_train_outputs(work):
    run = work / "run"
    assert (run / "epoch_001.ckpt").exists() and (run / "loss.png").exists()
    with open(run / "history.csv", newline="") as f:
        rows = list(csv.DictReader(f, strict=True))
    assert [r["epoch"] for r in rows] == ["0", "0", "1", "1"]


def test_train_epochs_zero(work, tmp_path, capsys):
    (tmp_path / "c.cfg").write_text(TRAIN_CFG.replace("epochs = 2", "epochs = 0"))
    assert main(["train", "--config", str(tmp_path / "c.cfg")]) == 1
    assert "epochs must be ≥ 1" in capsys.readouterr().err


def test_train_unknown_key(tmp_path, capsys):
    (tmp_path / "c.cfg").write_text(TRAIN_CFG + "learning_rate = 0.1\n")
    assert main(["train", "--config", str(tmp_path / "c.cfg")]) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_train_resume_continues_numbering(work, tmp_path, capsys):
    cfg = work / "resume.cfg"
    cfg.write_text(TRAIN_CFG.replace("epochs = 2", "epochs = 3"))
    code = main(["train", "--config", str(cfg), "--out", str(tmp_path), "--resume",
                 str(work / "run" / "epoch_001.ckpt")])
    assert code == 0
    assert "epoch_002.ckpt" in capsys.readouterr().out
    assert not (tmp_path / "epoch_000.ckpt").exists()


def _read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f, strict=True))


def test_eval_summary(work, tmp_path):
    assert main(["eval", "--checkpoint", str(work / "run" / "epoch_001.ckpt"),
                 "--data", str(work / "prep" / "test.jasrdata"), "--out", str(tmp_path / "m.csv")]) == 0
    rows = _read_csv(tmp_path / "m.csv")
    assert len(rows) == 11 and rows[-1]["sample_id"] == "mean"
    assert all(rows[-1][k] != "" for k in ("psnr_db", "ssim", "nme_x100"))


def test_eval_sr_only_has_empty_nme(work, tmp_path):
    cfg = work / "bl_sr.cfg"
    cfg.write_text(TRAIN_CFG.replace("epochs = 2", "epochs = 1") + 'variant = "BL_SR"\n')
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    assert main(["eval", "--checkpoint", str(tmp_path / "run" / "epoch_000.ckpt"),
                 "--data", str(work / "prep" / "test.jasrdata"), "--out", str(tmp_path / "m.csv")]) == 0
    rows = _read_csv(tmp_path / "m.csv")
    assert all(r["nme_x100"] == "" for r in rows) and rows[-1]["psnr_db"] != ""


def test_eval_landmark_mismatch(work, tmp_path, capsys):
    main(["prepare", "--manifest", str(work / "raw" / "manifest.tsv"), "--out", str(tmp_path),
          "--split", "x", "--copies", "0"])
    ds = FaceDataset.load(tmp_path / "x.jasrdata")
    keep = FaceDataset.from_samples(
        [data.make_sample(ds.hr[i], ds.landmarks[i][:5]) for i in range(2)], profile="custom:5")
    keep.save(tmp_path / "k5.jasrdata")
    code = main(["eval", "--checkpoint", str(work / "run" / "epoch_001.ckpt"),
                 "--data", str(tmp_path / "k5.jasrdata"), "--out", str(tmp_path / "m.csv")])
    assert code == 1 and "landmarks" in capsys.readouterr().err


def test_infer(work, tmp_path):
    ds = FaceDataset.load(work / "prep" / "test.jasrdata")
    small = data.bicubic_resample(ds.hr[0], data.Fraction(1, 8))
    Image.fromarray((np.clip(small, 0, 1) * 255).round().astype(np.uint8)).save(tmp_path / "face.png")
    assert main(["infer", "--checkpoint", str(work / "run" / "epoch_001.ckpt"),
                 "--image", str(tmp_path / "face.png"), "--out", str(tmp_path / "o")]) == 0
    sr = Image.open(tmp_path / "o" / "face_sr.png")
    assert sr.size == (128, 128)
    pts = data.parse_landmark_file((tmp_path / "o" / "face.pts").read_text(), expected_count=68)
    overlay = np.asarray(Image.open(tmp_path / "o" / "face_landmarks.png"))
    for x, y in pts:
        assert tuple(overlay[int(np.floor(y)), int(np.floor(x))]) == (0, 255, 0)


def test_infer_bad_image(work, tmp_path, capsys):
    (tmp_path / "x.png").write_bytes(b"not a png")
    assert main(["infer", "--checkpoint", str(work / "run" / "epoch_001.ckpt"),
                 "--image", str(tmp_path / "x.png"), "--out", str(tmp_path)]) == 1
    assert "cannot decode" in capsys.readouterr().err


def test_overlay_marker_count():
    lms = np.array([[10.5 + 12 * (i % 9), 10.5 + 12 * (i // 9)] for i in range(68)])
    im = np.asarray(plots.draw_landmarks(np.zeros((128, 128, 3)), lms))
    _, count = ndimage.label(np.all(im == (0, 255, 0), axis=-1))
    assert count == 68


def test_ablate(work, tmp_path):
    cfg = tmp_path / "grid.cfg"
    cfg.write_text("channels = 4\nepochs = 1\nbatch_size = 150\nblocks_short = 1\nblocks_long = 1\n")
    args = ["ablate", "--config", str(cfg), "--data", str(work / "prep" / "test.jasrdata"),
            "--test-data", str(work / "prep" / "test.jasrdata")]
    assert main(args + ["--out", str(tmp_path / "a" / "grid.csv")]) == 0
    assert main(args + ["--out", str(tmp_path / "b" / "grid.csv")]) == 0
    a = (tmp_path / "a" / "grid.csv").read_bytes()
    assert a == (tmp_path / "b" / "grid.csv").read_bytes()
    rows = _read_csv(tmp_path / "a" / "grid.csv")
    assert len(rows) == 13 and all(r["params"] for r in rows)
    plots_dir = tmp_path / "a" / "grid_plots"
    assert len(list(plots_dir.glob("*.png"))) == 13


def test_user_errors_exit_1(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", "x", "--out", "y"]) == 1
    assert main(["nosuchcommand"]) == 1


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "jasrnet.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for flag in ("prepare", "train", "eval", "infer", "ablate", "JASRNET_DATA_ROOT"):
        assert flag in out.stdout
