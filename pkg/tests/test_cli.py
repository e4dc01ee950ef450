import csv
import json

import numpy as np
import pytest

from sarddpm.cli import DEFAULTS, _resolve, build_parser, main
from sarddpm.data import generate_clutter_scene, load_dataset
from sarddpm.tensorio import read_tensor, write_tensor

TINY_NET = [
    "--base-channels", "8", "--channel-mult", "1,2", "--res-blocks", "2",
    "--attention-resolution", "8", "--timesteps", "20", "--batch-size", "8",
]


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "synth"
    assert main(["prepare", "--synthetic", "--classes", "3", "--per-class", "8", "--size", "16", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained_run(dataset_dir):
    run = dataset_dir.parent / "run"
    assert main(["train", "--data", str(dataset_dir), "--out", str(run), "--epochs", "1", *TINY_NET]) == 0
    return run


def test_prepare_counts(dataset_dir):
    train, test = load_dataset(dataset_dir, "train"), load_dataset(dataset_dir, "test")
    assert len(train) == 24 and len(test) == 12
    assert train.images.shape[1:] == (1, 16, 16)
    assert (dataset_dir / "norm_params.txt").is_file()
    assert (dataset_dir / "classes.txt").read_text().splitlines() == ["class_0", "class_1", "class_2"]


def test_prepare_scenes_tiles(tmp_path):
    scenes = tmp_path / "scenes"
    write_tensor(scenes / "s0.bin", generate_clutter_scene(1784, 1476, seed=0))
    assert main(["prepare", "--scenes", str(scenes), "--out", str(tmp_path / "clutter")]) == 0
    ds = load_dataset(tmp_path / "clutter")
    assert ds.images.shape == (143, 1, 128, 128)
    assert ds.labels is None


def test_prepare_missing_dir_writes_nothing(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["prepare", "--folder", str(tmp_path / "nope"), "--out", str(out)]) == 2
    assert "does not exist" in capsys.readouterr().err
    assert not out.exists()
    assert list(tmp_path.iterdir()) == []


def test_usage_errors(tmp_path):
    assert main(["prepare", "--out", str(tmp_path / "x")]) == 2
    assert main(["prepare", "--synthetic", "--per-class", "0", "--out", str(tmp_path / "x")]) == 2
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "r")]) == 2
    assert main(["bogus"]) == 2
    assert not (tmp_path / "x").exists()


def test_defaults_resolved():
    args = build_parser().parse_args(["train", "--data", "d", "--out", "o"])
    cfg = _resolve(args)
    assert (cfg["epochs"], cfg["batch_size"], cfg["base_channels"], cfg["timesteps"], cfg["schedule"]) == (
        200, 32, 64, 1000, "linear"
    )
    assert cfg["lr"] == 2e-4 and cfg["dropout"] == 0.3 and cfg["pretrain_epochs"] == 500


def test_config_file_precedence(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"epochs": 7, "batch-size": 4, "schedule": "cosine"}))
    args = build_parser().parse_args(["train", "--data", "d", "--out", "o", "--config", str(conf), "--epochs", "3"])
    cfg = _resolve(args)
    assert (cfg["epochs"], cfg["batch_size"], cfg["schedule"]) == (3, 4, "cosine")
    conf.write_text(json.dumps({"epoch": 7}))
    assert main(["train", "--data", "d", "--out", "o", "--config", str(conf)]) == 2


def test_train_outputs(trained_run):
    rows = list(csv.DictReader(open(trained_run / "loss.csv")))
    assert [r["epoch"] for r in rows] == ["1"]
    assert (trained_run / "checkpoints" / "epoch_0001.ckpt").is_file()
    snap = json.loads((trained_run / "config.json").read_text())
    assert snap["train"]["timesteps"] == 20 and snap["unet"]["base_channels"] == 8


def test_cosine_schedule_flag(dataset_dir, tmp_path):
    run = tmp_path / "cos"
    assert main(["train", "--data", str(dataset_dir), "--out", str(run), "--epochs", "1", "--max-steps", "1", "--schedule", "cosine", *TINY_NET]) == 0
    assert json.loads((run / "config.json").read_text())["train"]["schedule_kind"] == "cosine"


def test_same_seed_same_artifacts(dataset_dir, trained_run, tmp_path):
    again = tmp_path / "again"
    assert main(["train", "--data", str(dataset_dir), "--out", str(again), "--epochs", "1", *TINY_NET]) == 0
    cols = [[(r["epoch"], r["mean_loss"]) for r in csv.DictReader(open(d / "loss.csv"))] for d in (trained_run, again)]
    assert cols[0] == cols[1]
    ckpt = trained_run / "checkpoints" / "epoch_0001.ckpt"
    for name in ("s1", "s2"):
        assert main(["sample", "--checkpoint", str(ckpt), "--out", str(tmp_path / name), "-n", "4", "--seed", "5"]) == 0
    assert (tmp_path / "s1" / "samples.bin").read_bytes() == (tmp_path / "s2" / "samples.bin").read_bytes()


def test_sample_outputs(trained_run, tmp_path, capsys):
    ckpt = trained_run / "checkpoints" / "epoch_0001.ckpt"
    out = tmp_path / "s"
    assert main(["sample", "--checkpoint", str(ckpt), "--out", str(out), "-n", "5", "--classes", "2,0"]) == 0
    images = read_tensor(out / "samples.bin")
    assert images.shape == (5, 1, 16, 16)
    assert images.min() >= -1 and images.max() <= 1
    assert read_tensor(out / "labels.bin").tolist() == [2, 0, 2, 0, 2]
    assert len(list((out / "png").glob("*.png"))) == 5
    assert (out / "grid.png").is_file() and (out / "norm_params.txt").is_file()
    assert main(["sample", "--checkpoint", str(ckpt), "--out", str(tmp_path / "bad"), "-n", "2", "--classes", "7"]) == 2


def test_sample_zero(trained_run, tmp_path):
    out = tmp_path / "zero"
    assert main(["sample", "--checkpoint", str(trained_run / "checkpoints" / "epoch_0001.ckpt"), "--out", str(out), "-n", "0"]) == 0
    assert not out.exists()


def test_evaluate_real_vs_real(dataset_dir, tmp_path, capsys):
    ext = tmp_path / "ext.ckpt"
    assert main(["train-extractor", "--data", str(dataset_dir), "--out", str(ext), "--extractor-epochs", "2"]) == 0
    gen = tmp_path / "gen"
    write_tensor(gen / "samples.bin", load_dataset(dataset_dir, "test").images)
    (gen / "norm_params.txt").write_text((dataset_dir / "norm_params.txt").read_text())
    capsys.readouterr()
    assert main(["evaluate", "--generated", str(gen), "--real", str(dataset_dir), "--extractor", str(ext), "--out", str(tmp_path / "rep")]) == 0
    assert "FID ↓" in capsys.readouterr().out
    report = json.loads((tmp_path / "rep" / "metrics.json").read_text())
    assert abs(report["fid"]) < 1e-6 and report["n_real"] == 12


def test_evaluate_missing_extractor(dataset_dir, tmp_path, capsys):
    code = main(["evaluate", "--generated", str(tmp_path), "--real", str(dataset_dir), "--extractor", str(tmp_path / "e.ckpt"), "--out", str(tmp_path / "r")])
    assert code == 2
    assert "train-extractor" in capsys.readouterr().err


def test_evaluate_norm_mismatch(dataset_dir, tmp_path, capsys):
    ext = tmp_path / "ext.ckpt"
    assert main(["train-extractor", "--data", str(dataset_dir), "--out", str(ext), "--extractor-epochs", "1"]) == 0
    gen = tmp_path / "gen"
    write_tensor(gen / "samples.bin", np.zeros((4, 1, 16, 16), np.float32))
    (gen / "norm_params.txt").write_text("input_min=0.0\ninput_max=1.0\n")
    assert main(["evaluate", "--generated", str(gen), "--real", str(dataset_dir), "--extractor", str(ext), "--out", str(tmp_path / "r")]) == 2
    assert "mismatch" in capsys.readouterr().err


def test_schedule_dump(tmp_path, capsys):
    assert main(["schedule-dump", "--kind", "cosine", "--out", str(tmp_path / "c.csv")]) == 0
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["t", "alpha_bar"] and len(rows) == 1002
    assert rows[1] == ["0", "1.0"]
    assert main(["schedule-dump", "--kind", "linear", "--timesteps", "3"]) == 0
    assert capsys.readouterr().out.splitlines()[1:3] == ["0,1.0", "1,0.9999"]
    assert main(["schedule-dump", "--kind", "linear", "--beta-1", "0.5", "--beta-T", "0.1"]) == 2


def test_pretrain_and_finetune(dataset_dir, tmp_path):
    scenes = tmp_path / "scenes"
    write_tensor(scenes / "a.bin", generate_clutter_scene(48, 48, seed=0))
    assert main(["prepare", "--scenes", str(scenes), "--tile", "16", "--out", str(tmp_path / "clutter")]) == 0
    run = tmp_path / "pt"
    assert main(["pretrain", "--clutter", str(tmp_path / "clutter"), "--out", str(run), "--pretrain-epochs", "1", *TINY_NET]) == 0
    init = run / "checkpoints" / "epoch_0001.ckpt"
    assert init.is_file()
    ft = tmp_path / "ft"
    assert main(["finetune", "--init", str(init), "--data", str(dataset_dir), "--out", str(ft), "--epochs", "1", "--batch-size", "8"]) == 0
    assert (ft / "checkpoints" / "epoch_0001.ckpt").is_file()


def test_train_resume(dataset_dir, trained_run, tmp_path):
    run = tmp_path / "resumed"
    ckpt = trained_run / "checkpoints" / "epoch_0001.ckpt"
    assert main(["train", "--data", str(dataset_dir), "--out", str(run), "--resume", str(ckpt), "--epochs", "2", *TINY_NET]) == 0
    assert (run / "checkpoints" / "epoch_0002.ckpt").is_file()
    assert [r["epoch"] for r in csv.DictReader(open(run / "loss.csv"))] == ["2"]
    assert main(["train", "--data", str(dataset_dir), "--out", str(run), "--resume", str(tmp_path / "none.ckpt"), *TINY_NET]) == 2
