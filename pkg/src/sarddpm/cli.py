"""Command-line entry point: ``sarddpm <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Option precedence: command-line flag > ``--config`` JSON file > built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from sarddpm import checkpoint as ckpt
from sarddpm.data import (
    DataError,
    Dataset,
    FolderLayout,
    NormalizationParams,
    TilingSpec,
    generate_synthetic_dataset,
    load_dataset,
    load_image_folder,
    prepare_scenes,
    read_magnitude_image,
    save_dataset,
)
from sarddpm.schedule import ScheduleKind, curve_to_csv, dump_curve, make_schedule
from sarddpm.tensorio import read_tensor, write_tensor

logger = logging.getLogger("sarddpm")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

DEFAULTS = {
    "seed": 0,
    # schedule
    "schedule": "linear",
    "timesteps": 1000,
    "beta_1": 1e-4,
    "beta_T": 0.02,
    # training
    "epochs": 200,
    "pretrain_epochs": 500,
    "batch_size": 32,
    "lr": 2e-4,
    "grad_clip": 1.0,
    "checkpoint_every": 10,
    "max_steps": None,
    # network
    "base_channels": 64,
    "channel_mult": "1,2,4,8",
    "res_blocks": 8,
    "attention_resolution": 32,
    "dropout": 0.3,
    # prepare
    "classes": 10,
    "per_class": 100,
    "test_per_class": None,
    "size": 32,
    "tile": 128,
    "layout_seed": 0,
    # sample
    "n": 16,
    "sample_batch": 256,
    # extractor
    "extractor_epochs": 15,
    "feature_dim": 256,
    "extractor_width": 32,
    # evaluate
    "kid_subset_size": None,
    "kid_subsets": 10,
    "is_splits": 1,
}


class UsageError(Exception):
    """Invalid invocation or configuration; reported with exit code 2."""


def _resolve(args: argparse.Namespace) -> dict:
    file_cfg = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            file_cfg = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {path}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
        unknown = set(file_cfg) - set(DEFAULTS) - set(vars(args))
        if unknown:
            raise UsageError(f"unknown keys in config file: {sorted(unknown)}")
    out = {}
    for key in set(DEFAULTS) | set(vars(args)):
        value = getattr(args, key, None)
        if value is None:
            value = file_cfg.get(key, DEFAULTS.get(key))
        out[key] = value
    return out


def _parse_ints(text, what: str) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise UsageError(f"{what} must be a comma-separated list of integers, got {text!r}") from None


def _train_config(cfg: dict, conditional: bool):
    from sarddpm.train import TrainConfig

    try:
        return TrainConfig(
            epochs=int(cfg["epochs"]),
            batch_size=int(cfg["batch_size"]),
            learning_rate=float(cfg["lr"]),
            pretrain_epochs=int(cfg["pretrain_epochs"]),
            seed=int(cfg["seed"]),
            schedule_kind=ScheduleKind.parse(cfg["schedule"]).value,
            timesteps=int(cfg["timesteps"]),
            beta_1=float(cfg["beta_1"]),
            beta_T=float(cfg["beta_T"]),
            conditional=conditional,
            grad_clip=float(cfg["grad_clip"]) if cfg["grad_clip"] else None,
            checkpoint_every=int(cfg["checkpoint_every"]),
            max_steps=int(cfg["max_steps"]) if cfg["max_steps"] else None,
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training configuration: {exc}") from None


def _unet_config(cfg: dict, image_size: int, num_classes: Optional[int]):
    from sarddpm.unet import UNetConfig

    try:
        return UNetConfig(
            in_channels=1,
            base_channels=int(cfg["base_channels"]),
            channel_multipliers=_parse_ints(cfg["channel_mult"], "--channel-mult"),
            res_blocks_total_per_side=int(cfg["res_blocks"]),
            attention_resolution=int(cfg["attention_resolution"]),
            dropout_p=float(cfg["dropout"]),
            num_classes=num_classes,
            image_size=image_size,
            num_timesteps=int(cfg["timesteps"]),
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid network configuration: {exc}") from None


def _load_dataset(path, split="train") -> Dataset:
    try:
        return load_dataset(path, split)
    except (OSError, DataError) as exc:
        raise UsageError(f"cannot load dataset {path}: {exc}") from None


def _data_meta(ds: Dataset) -> dict:
    return {"norm_params": asdict(ds.norm_params), "class_names": list(ds.class_names)}


# -- prepare ----------------------------------------------------------------------------


def cmd_prepare(args, cfg) -> int:
    out = Path(args.out)
    sources = [bool(args.synthetic), args.scenes is not None, args.folder is not None]
    if sum(sources) != 1:
        raise UsageError("choose exactly one of --synthetic, --scenes DIR, --folder DIR")
    log_scale = not args.no_log
    for flag in ("classes", "per_class", "size", "tile"):
        if int(cfg[flag]) < 1:
            raise UsageError(f"--{flag.replace('_', '-')} must be positive")
    if args.scenes is not None:
        scene_dir = Path(args.scenes)
        if not scene_dir.is_dir():
            raise UsageError(f"scene directory {scene_dir} does not exist")
        files = sorted(p for p in scene_dir.iterdir() if p.is_file())
        if not files:
            raise UsageError(f"scene directory {scene_dir} is empty")
    elif args.folder is not None and not Path(args.folder).is_dir():
        raise UsageError(f"dataset folder {args.folder} does not exist")

    try:
        if args.synthetic:
            classes, per_class, size = int(cfg["classes"]), int(cfg["per_class"]), int(cfg["size"])
            test_per_class = cfg["test_per_class"]
            test_per_class = max(1, per_class // 2) if test_per_class is None else int(test_per_class)
            seed, layout_seed = int(cfg["seed"]), int(cfg["layout_seed"])
            train = generate_synthetic_dataset(classes, per_class, size, seed, layout_seed=layout_seed, log_scale=log_scale)
            splits = [train]
            if test_per_class > 0:
                splits.append(
                    generate_synthetic_dataset(
                        classes, test_per_class, size, seed + 1, norm_params=train.norm_params,
                        layout_seed=layout_seed, split="test", log_scale=log_scale,
                    )
                )
        elif args.scenes is not None:
            scenes = (read_magnitude_image(f) for f in files)
            splits = [prepare_scenes(scenes, TilingSpec(int(cfg["tile"])), log_scale=log_scale)]
        else:
            train, test = load_image_folder(args.folder, FolderLayout(log_scale=log_scale))
            splits = [train] + ([test] if test is not None else [])
    except DataError as exc:
        raise UsageError(str(exc)) from None

    out.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}."))
    try:
        save_dataset(staging, *splits)
        if out.exists():
            shutil.rmtree(out)
        staging.rename(out)
    finally:
        if staging.exists():
            shutil.rmtree(staging)
    for ds in splits:
        print(f"{ds.split}: {len(ds)} images of {ds.image_size}x{ds.image_size}, {ds.num_classes} classes")
    print(f"dataset written to {out}")
    return EXIT_OK


# -- training -----------------------------------------------------------------------------


def _report_training(report, run_dir) -> None:
    if report.epoch_losses:
        print(f"trained {len(report.epoch_losses)} epochs, final mean loss {report.epoch_losses[-1]:.5f}")
    print(f"run directory: {run_dir}")
    if report.final_checkpoint:
        print(f"checkpoint: {report.final_checkpoint}")


def cmd_train(args, cfg) -> int:
    from sarddpm.train import Trainer
    from sarddpm.unet import build

    ds = _load_dataset(args.data)
    conditional = not args.unconditional
    if conditional and not ds.labeled:
        raise UsageError(f"{args.data} is unlabeled; pass --unconditional or use a labelled dataset")
    tcfg = _train_config(cfg, conditional)
    if args.resume:
        try:
            trainer = Trainer.resume(args.resume, tcfg, run_dir=args.out)
        except ckpt.CheckpointError as exc:
            raise UsageError(str(exc)) from None
    else:
        ucfg = _unet_config(cfg, ds.image_size, ds.num_classes if conditional else None)
        trainer = Trainer(build(ucfg, seed=tcfg.seed), tcfg, args.out, meta=_data_meta(ds))
    try:
        trainer._check_dataset(ds)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _report_training(trainer.run(ds), args.out)
    return EXIT_OK


def cmd_pretrain(args, cfg) -> int:
    from dataclasses import replace

    from sarddpm.train import Trainer, pretrain_then_finetune
    from sarddpm.unet import build

    clutter = _load_dataset(args.clutter)
    targets = _load_dataset(args.data) if args.data else None
    if targets is not None and not targets.labeled:
        raise UsageError(f"{args.data} must be a labelled target dataset")
    if targets is not None and targets.image_size != clutter.image_size:
        raise UsageError(f"clutter is {clutter.image_size}px but targets are {targets.image_size}px")
    tcfg = _train_config(cfg, conditional=False)
    ucfg = _unet_config(cfg, clutter.image_size, None)
    if clutter.labels is not None:
        logger.warning("clutter dataset carries labels; they are ignored during pretraining")
    if targets is None:
        phase1 = replace(tcfg, epochs=tcfg.pretrain_epochs)
        trainer = Trainer(build(ucfg, seed=tcfg.seed), phase1, args.out, meta=_data_meta(clutter))
        _report_training(trainer.run(replace(clutter, labels=None, num_classes=0)), args.out)
        return EXIT_OK
    model, pre, fine = pretrain_then_finetune(
        clutter, targets, replace(tcfg, conditional=True), ucfg, args.out, meta=_data_meta(targets)
    )
    _report_training(pre, Path(args.out) / "pretrain")
    _report_training(fine, Path(args.out) / "finetune")
    return EXIT_OK


def cmd_finetune(args, cfg) -> int:
    from sarddpm.train import Trainer, attach_class_embedding

    ds = _load_dataset(args.data)
    if not ds.labeled:
        raise UsageError(f"{args.data} must be a labelled target dataset")
    try:
        model, extra = ckpt.load_model(args.init)
    except ckpt.CheckpointError as exc:
        raise UsageError(str(exc)) from None
    sched = extra.get("schedule", {})
    for key, flag in (("kind", "schedule"), ("T", "timesteps"), ("beta_1", "beta_1"), ("beta_T", "beta_T")):
        if key in sched and getattr(args, flag, None) is None:
            cfg[flag] = sched[key]
    tcfg = _train_config(cfg, conditional=True)
    if model.config.image_size != ds.image_size:
        raise UsageError(f"pretrained model is {model.config.image_size}px, dataset is {ds.image_size}px")
    if not model.config.conditional:
        model = attach_class_embedding(model, ds.num_classes, seed=tcfg.seed + 1)
    trainer = Trainer(model, tcfg, args.out, meta=_data_meta(ds))
    try:
        trainer._check_dataset(ds)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _report_training(trainer.run(ds), args.out)
    return EXIT_OK


# -- sampling ------------------------------------------------------------------------------


def to_uint8(images: np.ndarray) -> np.ndarray:
    """Map [-1, 1] linearly onto 0..255."""
    return np.clip(np.round((np.asarray(images, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def montage(images: np.ndarray, labels: Optional[np.ndarray], per_row: int = 5, max_rows: int = 10) -> np.ndarray:
    """Grid with one row per class (conditional) or rows of ``per_row`` samples."""
    size = images.shape[-1]
    pad = 2
    if labels is not None:
        rows = []
        for k in sorted(set(labels.tolist()))[:max_rows]:
            rows.append(images[labels == k][:per_row])
    else:
        rows = [images[i : i + per_row] for i in range(0, min(len(images), per_row * max_rows), per_row)]
    grid = np.zeros((len(rows) * (size + pad) + pad, per_row * (size + pad) + pad), dtype=np.uint8)
    for r, row in enumerate(rows):
        for c, img in enumerate(row):
            y, x = pad + r * (size + pad), pad + c * (size + pad)
            grid[y : y + size, x : x + size] = to_uint8(img[0])
    return grid


def _class_ids(spec, n: int, num_classes: Optional[int]) -> Optional[np.ndarray]:
    if num_classes is None:
        if spec not in (None, ""):
            raise UsageError("--classes given but the checkpoint is unconditional")
        return None
    if spec in (None, "", "all"):
        chosen = list(range(num_classes))
    else:
        chosen = list(_parse_ints(spec, "--classes"))
        bad = [c for c in chosen if not 0 <= c < num_classes]
        if bad:
            raise UsageError(f"invalid class id(s) {bad}; the model has {num_classes} classes")
        if not chosen:
            raise UsageError("--classes is empty")
    return np.asarray([chosen[i % len(chosen)] for i in range(n)], dtype=np.int64)


def cmd_sample(args, cfg) -> int:
    import torch
    from PIL import Image

    from sarddpm.diffusion import sample

    n = int(cfg["n"])
    if n < 0:
        raise UsageError("-n must be non-negative")
    try:
        model, extra = ckpt.load_model(args.checkpoint)
    except ckpt.CheckpointError as exc:
        raise UsageError(str(exc)) from None
    labels = _class_ids(args.classes, n, model.config.num_classes)
    if n == 0:
        print("n = 0: nothing to sample")
        return EXIT_OK
    sched_meta = extra.get("schedule", {"kind": "linear", "T": model.config.num_timesteps})
    schedule = make_schedule(sched_meta["kind"], int(sched_meta["T"]), sched_meta.get("beta_1", 1e-4), sched_meta.get("beta_T", 0.02))
    gen = torch.Generator().manual_seed(int(cfg["seed"]))
    chunks = []
    batch = max(1, int(cfg["sample_batch"]))
    for lo in range(0, n, batch):
        y = None if labels is None else labels[lo : lo + batch]
        chunks.append(sample(model, len(y) if y is not None else min(batch, n - lo), schedule, class_ids=y, generator=gen).numpy())
        logger.info("sampled %d / %d", min(lo + batch, n), n)
    images = np.concatenate(chunks).astype(np.float32)

    out = Path(args.out)
    (out / "png").mkdir(parents=True, exist_ok=True)
    write_tensor(out / "samples.bin", images)
    if labels is not None:
        write_tensor(out / "labels.bin", labels)
    if "norm_params" in extra:
        NormalizationParams(**extra["norm_params"]).save(out / "norm_params.txt")
    width = len(str(n - 1))
    for i, img in enumerate(to_uint8(images[:, 0])):
        tag = f"_c{labels[i]}" if labels is not None else ""
        Image.fromarray(img, mode="L").save(out / "png" / f"{i:0{width}d}{tag}.png")
    Image.fromarray(montage(images, labels), mode="L").save(out / "grid.png")
    meta = {"n": n, "seed": int(cfg["seed"]), "checkpoint": str(args.checkpoint), "schedule": sched_meta}
    (out / "sample_meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(f"wrote {n} samples to {out}")
    return EXIT_OK


# -- extractor and evaluation -----------------------------------------------------------------


def cmd_train_extractor(args, cfg) -> int:
    from sarddpm.metrics import ExtractorConfig, train_feature_extractor

    ds = _load_dataset(args.data)
    if not ds.labeled:
        raise UsageError(f"{args.data} is unlabeled; the extractor is a classifier and needs labels")
    ecfg = ExtractorConfig(
        image_size=ds.image_size,
        num_classes=ds.num_classes,
        feature_dim=int(cfg["feature_dim"]),
        width=int(cfg["extractor_width"]),
        epochs=int(cfg["extractor_epochs"]),
        seed=int(cfg["seed"]),
    )
    ext = train_feature_extractor(ds, ecfg)
    ext.save(args.out)
    try:
        test = load_dataset(args.data, "test")
    except DataError:
        test = None
    if test is not None and test.labeled:
        acc = float(np.mean(ext.predict(test.images) == test.labels))
        print(f"held-out accuracy: {acc:.4f} on {len(test)} images")
    print(f"extractor written to {args.out}")
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    from sarddpm.metrics import EvalOptions, TrainedExtractor, evaluate

    ext_path = Path(args.extractor)
    if not ext_path.is_file():
        raise UsageError(
            f"feature extractor {ext_path} not found; create one with "
            f"`sarddpm train-extractor --data <dataset> --out {ext_path}`"
        )
    gen_dir = Path(args.generated)
    if not (gen_dir / "samples.bin").is_file():
        raise UsageError(f"{gen_dir} holds no samples.bin; run `sarddpm sample` first")
    real = _load_dataset(args.real, args.split)
    gen_params_file = gen_dir / "norm_params.txt"
    if gen_params_file.is_file():
        gen_params = NormalizationParams.load(gen_params_file)
        if gen_params != real.norm_params:
            raise UsageError(
                f"normalisation mismatch: generated samples use {gen_params}, real data uses {real.norm_params}"
            )
    else:
        logger.warning("%s has no norm_params.txt; cannot verify normalisation consistency", gen_dir)
    generated = read_tensor(gen_dir / "samples.bin")
    if generated.shape[1:] != real.images.shape[1:]:
        raise UsageError(f"generated images {generated.shape[1:]} do not match real images {real.images.shape[1:]}")
    try:
        extractor = TrainedExtractor.load(ext_path)
    except ckpt.CheckpointError as exc:
        raise UsageError(str(exc)) from None
    if extractor.image_size != real.image_size:
        raise UsageError(f"extractor expects {extractor.image_size}px images, data is {real.image_size}px")
    options = EvalOptions(
        kid_subset_size=int(cfg["kid_subset_size"]) if cfg["kid_subset_size"] else None,
        kid_num_subsets=int(cfg["kid_subsets"]),
        is_splits=int(cfg["is_splits"]),
        seed=int(cfg["seed"]),
    )
    report = evaluate(generated, real, extractor, options)
    report.save(args.out)
    print(report.table(label=args.label or gen_dir.name))
    return EXIT_OK


def cmd_schedule_dump(args, cfg) -> int:
    try:
        schedule = make_schedule(cfg["schedule"], int(cfg["timesteps"]), float(cfg["beta_1"]), float(cfg["beta_T"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    text = curve_to_csv(dump_curve(schedule))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------------


def _add_schedule(p):
    p.add_argument("--schedule", choices=[k.value for k in ScheduleKind], help="noise schedule (default linear)")
    p.add_argument("--timesteps", type=int, help="diffusion steps T (default 1000)")
    p.add_argument("--beta-1", dest="beta_1", type=float, help="first beta (default 1e-4)")
    p.add_argument("--beta-T", dest="beta_T", type=float, help="last beta (default 0.02)")


def _add_training(p):
    _add_schedule(p)
    p.add_argument("--epochs", type=int, help="training epochs (default 200)")
    p.add_argument("--pretrain-epochs", type=int, help="clutter pretraining epochs (default 500)")
    p.add_argument("--batch-size", type=int, help="minibatch size (default 32)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default 2e-4)")
    p.add_argument("--grad-clip", type=float, help="global gradient-norm clip, 0 disables (default 1.0)")
    p.add_argument("--checkpoint-every", type=int, help="epochs between checkpoints (default 10)")
    p.add_argument("--max-steps", type=int, help="stop after this many optimisation steps")
    p.add_argument("--base-channels", type=int, help="UNet base channels (default 64)")
    p.add_argument("--channel-mult", help="per-level channel multipliers (default 1,2,4,8)")
    p.add_argument("--res-blocks", type=int, help="residual blocks per side (default 8)")
    p.add_argument("--attention-resolution", type=int, help="feature-map size with self-attention (default 32)")
    p.add_argument("--dropout", type=float, help="dropout probability (default 0.3)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("--config", help="JSON file with option values")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    parser = argparse.ArgumentParser(prog="sarddpm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="build a dataset directory")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--synthetic", action="store_true", help="generate the synthetic speckled-target set")
    p.add_argument("--scenes", help="directory of large clutter scenes to tile")
    p.add_argument("--folder", help="image folder laid out as <class>/<files> or train|test/<class>/<files>")
    p.add_argument("--classes", type=int, help="synthetic: number of classes (default 10)")
    p.add_argument("--per-class", type=int, help="synthetic: training images per class (default 100)")
    p.add_argument("--test-per-class", type=int, help="synthetic: test images per class (default per-class/2)")
    p.add_argument("--size", type=int, help="synthetic: image side (default 32)")
    p.add_argument("--layout-seed", type=int, help="synthetic: seed defining the classes (default 0)")
    p.add_argument("--tile", type=int, help="scenes: tile side (default 128)")
    p.add_argument("--no-log", action="store_true", help="skip the dB conversion")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="train a (conditional) DDPM")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--unconditional", action="store_true", help="ignore labels")
    p.add_argument("--resume", help="checkpoint to resume from")
    _add_training(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pretrain", parents=[common], help="pretrain on clutter, optionally fine-tune on targets")
    p.add_argument("--clutter", required=True, help="clutter dataset directory")
    p.add_argument("--data", help="labelled target dataset; runs the fine-tuning phase too")
    p.add_argument("--out", required=True, help="run directory")
    _add_training(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common], help="class-conditional fine-tuning of a pretrained model")
    p.add_argument("--init", required=True, help="pretrained checkpoint")
    p.add_argument("--data", required=True, help="labelled target dataset")
    p.add_argument("--out", required=True, help="run directory")
    _add_training(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sample", parents=[common], help="generate images from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("-n", type=int, help="number of samples (default 16)")
    p.add_argument("--classes", help="'all' or comma-separated class ids, cycled over the n samples")
    p.add_argument("--sample-batch", type=int, help="images per reverse-process batch (default 256)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train-extractor", parents=[common], help="train the evaluation feature extractor")
    p.add_argument("--data", required=True, help="labelled dataset directory")
    p.add_argument("--out", required=True, help="extractor checkpoint path")
    p.add_argument("--extractor-epochs", type=int, help="training epochs (default 15)")
    p.add_argument("--feature-dim", type=int, help="feature dimension (default 256)")
    p.add_argument("--extractor-width", type=int, help="first-layer channels (default 32)")
    p.set_defaults(func=cmd_train_extractor)

    p = sub.add_parser("evaluate", parents=[common], help="IS / FID / KID of generated samples")
    p.add_argument("--generated", required=True, help="directory written by `sample`")
    p.add_argument("--real", required=True, help="real dataset directory")
    p.add_argument("--split", default="test", help="split of the real dataset (default test)")
    p.add_argument("--extractor", required=True, help="extractor checkpoint")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--label", help="row label in the printed table")
    p.add_argument("--kid-subset-size", type=int, help="KID subset size (default min(n, 1000))")
    p.add_argument("--kid-subsets", type=int, help="number of KID subsets (default 10)")
    p.add_argument("--is-splits", type=int, help="IS splits (default 1)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("schedule-dump", parents=[common], help="write t,alpha_bar CSV for a schedule")
    p.add_argument("--kind", dest="schedule", choices=[k.value for k in ScheduleKind], help="schedule kind")
    p.add_argument("--timesteps", type=int, help="T (default 1000)")
    p.add_argument("--beta-1", dest="beta_1", type=float)
    p.add_argument("--beta-T", dest="beta_T", type=float)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_schedule_dump)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _resolve(args)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"sarddpm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        logger.debug("failure", exc_info=True)
        print(f"sarddpm {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
