"""epsilon-prediction training, clutter pretraining and fine-tuning."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from sarddpm.checkpoint import load_model, save_model
from sarddpm.data import Dataset
from sarddpm.diffusion import forward_sample
from sarddpm.schedule import NoiseSchedule, ScheduleKind, make_schedule
from sarddpm.unet import UNet, UNetConfig, build

logger = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 2e-4
    pretrain_epochs: int = 500
    seed: int = 0
    schedule_kind: str = "linear"
    timesteps: int = 1000
    beta_1: float = 1e-4
    beta_T: float = 0.02
    conditional: bool = True
    grad_clip: Optional[float] = 1.0
    checkpoint_every: int = 10
    max_steps: Optional[int] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1 or self.pretrain_epochs < 1:
            raise ValueError("epochs and pretrain_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive or None")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        ScheduleKind.parse(self.schedule_kind)
        make_schedule(self.schedule_kind, self.timesteps, self.beta_1, self.beta_T)

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.schedule_kind, self.timesteps, self.beta_1, self.beta_T)

    def schedule_meta(self) -> dict:
        return {"kind": ScheduleKind.parse(self.schedule_kind).value, "T": self.timesteps,
                "beta_1": self.beta_1, "beta_T": self.beta_T}


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    final_checkpoint: Optional[Path] = None


def _predict(model, xt, t, labels):
    if isinstance(model, UNet):
        return model.predict_noise(xt, t, labels, train_mode=True)
    return model(xt, t, labels)


def diffusion_loss(
    model,
    x0: torch.Tensor,
    labels: Optional[torch.Tensor],
    schedule: NoiseSchedule,
    generator: torch.Generator,
) -> torch.Tensor:
    """Mean squared error between the injected noise and its prediction.

    One timestep per element is drawn uniformly from 1..T.
    """
    n = x0.shape[0]
    t = torch.randint(1, schedule.T + 1, (n,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    xt = forward_sample(x0, t, eps, schedule)
    return torch.mean((eps - _predict(model, xt, t, labels)) ** 2)


def loss_step(
    model,
    x0: torch.Tensor,
    labels: Optional[torch.Tensor],
    schedule: NoiseSchedule,
    generator: torch.Generator,
    optimizer: Optional[torch.optim.Optimizer] = None,
    grad_clip: Optional[float] = None,
) -> float:
    """Loss and gradients for one minibatch, followed by an optimizer update if given."""
    params = [p for p in model.parameters()] if hasattr(model, "parameters") else []
    for p in params:
        p.grad = None
    loss = diffusion_loss(model, x0, labels, schedule, generator)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NonFiniteLossError(
            f"non-finite loss {value}: batch range [{float(x0.min()):.3g}, {float(x0.max()):.3g}], "
            f"batch size {x0.shape[0]}"
        )
    if params:
        loss.backward()
        if grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(params, grad_clip)
        if optimizer is not None:
            optimizer.step()
    return value


class Trainer:
    """Owns the optimizer and random state of one training run."""

    def __init__(self, model: UNet, config: TrainConfig, run_dir=None, meta: Optional[dict] = None):
        self.model = model
        self.config = config
        self.schedule = config.schedule()
        if model.config.num_timesteps != self.schedule.T:
            raise ValueError(
                f"model embeds {model.config.num_timesteps} timesteps, schedule has {self.schedule.T}"
            )
        self.optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
        self.generator = torch.Generator().manual_seed(int(config.seed))
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.meta = dict(meta or {})
        self.epoch = 0
        self.step = 0
        self.report = TrainReport()

    def _check_dataset(self, dataset: Dataset) -> None:
        c = self.model.config
        if dataset.images.shape[1:] != (c.in_channels, c.image_size, c.image_size):
            raise ValueError(
                f"dataset images are {dataset.images.shape[1:]}, model expects "
                f"{(c.in_channels, c.image_size, c.image_size)}"
            )
        if self.config.conditional != c.conditional:
            raise ValueError("conditional flag does not match the model configuration")
        if c.conditional:
            if not dataset.labeled:
                raise ValueError("conditional training needs a labelled dataset")
            if dataset.num_classes > c.num_classes:
                raise ValueError(f"dataset has {dataset.num_classes} classes, model supports {c.num_classes}")

    def run(self, dataset: Dataset) -> TrainReport:
        self._check_dataset(dataset)
        cfg = self.config
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            snapshot = {"train": asdict(cfg), "unet": self.model.config.to_dict()}
            (self.run_dir / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True))
            if self.epoch == 0 or not (self.run_dir / "loss.csv").exists():
                (self.run_dir / "loss.csv").write_text("epoch,mean_loss,seconds\n")
        self.model.set_dropout_generator(self.generator)
        images = torch.from_numpy(dataset.images)
        labels = torch.from_numpy(dataset.labels) if (self.model.config.conditional and dataset.labels is not None) else None
        n = len(dataset)
        try:
            stop = False
            while self.epoch < cfg.epochs and not stop:
                start = time.perf_counter()
                order = np.random.default_rng([cfg.seed, self.epoch]).permutation(n)
                losses = []
                for lo in range(0, n, cfg.batch_size):
                    idx = torch.from_numpy(order[lo : lo + cfg.batch_size])
                    y = labels[idx] if labels is not None else None
                    losses.append(
                        loss_step(self.model, images[idx], y, self.schedule, self.generator, self.optimizer, cfg.grad_clip)
                    )
                    self.step += 1
                    if cfg.max_steps is not None and self.step >= cfg.max_steps:
                        stop = True
                        break
                self.epoch += 1
                seconds = time.perf_counter() - start
                self.report.step_losses.extend(losses)
                self.report.epoch_losses.append(float(np.mean(losses)))
                self.report.epoch_seconds.append(seconds)
                logger.info("epoch %d step %d loss %.5f (%.1fs)", self.epoch, self.step, self.report.epoch_losses[-1], seconds)
                if self.run_dir is not None:
                    with open(self.run_dir / "loss.csv", "a", newline="") as f:
                        csv.writer(f, lineterminator="\n").writerow([self.epoch, repr(self.report.epoch_losses[-1]), f"{seconds:.3f}"])
                    last = self.epoch >= cfg.epochs or stop
                    if last or self.epoch % cfg.checkpoint_every == 0:
                        self.report.final_checkpoint = self.save_checkpoint()
        except Exception:
            if self.run_dir is not None:
                path = self.save_checkpoint(tag="aborted")
                logger.error("training failed at epoch %d step %d; state saved to %s", self.epoch, self.step, path)
            raise
        finally:
            self.model.set_dropout_generator(None)
            self.model.eval()
        return self.report

    def checkpoint_path(self, epoch: int, tag: str = "") -> Path:
        suffix = f"_{tag}" if tag else ""
        return self.run_dir / "checkpoints" / f"epoch_{epoch:04d}{suffix}.ckpt"

    def save_checkpoint(self, tag: str = "") -> Path:
        path = self.checkpoint_path(self.epoch, tag)
        extra = dict(self.meta, schedule=self.config.schedule_meta(), epoch=self.epoch, step=self.step)
        save_model(self.model, path, extra=extra)
        torch.save(
            {
                "optimizer": self.optimizer.state_dict(),
                "generator": self.generator.get_state(),
                "epoch": self.epoch,
                "step": self.step,
            },
            path.with_suffix(".state"),
        )
        return path

    @classmethod
    def resume(cls, checkpoint, config: TrainConfig, run_dir=None) -> "Trainer":
        """Rebuild a trainer from a checkpoint and its ``.state`` sidecar."""
        checkpoint = Path(checkpoint)
        model, extra = load_model(checkpoint)
        meta = {k: v for k, v in extra.items() if k not in ("schedule", "epoch", "step")}
        trainer = cls(model, config, run_dir if run_dir is not None else checkpoint.parent.parent, meta=meta)
        state = torch.load(checkpoint.with_suffix(".state"), weights_only=False)
        trainer.optimizer.load_state_dict(state["optimizer"])
        trainer.generator.set_state(state["generator"])
        trainer.epoch = state["epoch"]
        trainer.step = state["step"]
        return trainer


def fit(model: UNet, dataset: Dataset, config: TrainConfig, run_dir=None, meta: Optional[dict] = None) -> TrainReport:
    """Train ``model`` in place on ``dataset`` with shuffled minibatch epochs."""
    return Trainer(model, config, run_dir, meta).run(dataset)


def attach_class_embedding(model: UNet, num_classes: int, seed: int = 0) -> UNet:
    """Conditional copy of an unconditional model with a freshly initialised class table."""
    if model.config.conditional:
        raise ValueError("model is already conditional")
    cond = build(model.config.replace(num_classes=num_classes), seed=seed)
    state = cond.state_dict()
    for name, value in model.state_dict().items():
        state[name] = value.clone()
    cond.load_state_dict(state)
    return cond


def pretrain_then_finetune(
    clutter: Dataset,
    targets: Dataset,
    config: TrainConfig,
    model_config: UNetConfig,
    run_dir=None,
    meta: Optional[dict] = None,
    on_phase_end: Optional[Callable[[str, UNet], None]] = None,
) -> tuple[UNet, TrainReport, TrainReport]:
    """Unconditional pretraining on clutter, then class-conditional fine-tuning.

    Returns the fine-tuned model and the reports of both phases. Each phase
    checkpoints into its own subdirectory of ``run_dir``.
    """
    if clutter.images.shape[1:] != targets.images.shape[1:]:
        raise ValueError(
            f"clutter images {clutter.images.shape[1:]} and target images {targets.images.shape[1:]} differ in resolution"
        )
    if not targets.labeled:
        raise ValueError("fine-tuning needs a labelled target dataset")
    if clutter.labels is not None:
        warnings.warn("clutter dataset carries labels; they are ignored during pretraining", stacklevel=2)
        clutter = replace(clutter, labels=None, num_classes=0)
    run_dir = Path(run_dir) if run_dir is not None else None
    base_cfg = model_config.replace(num_classes=None, num_timesteps=config.timesteps)
    model = build(base_cfg, seed=config.seed)
    phase1 = replace(config, epochs=config.pretrain_epochs, conditional=False)
    pre_report = fit(model, clutter, phase1, run_dir / "pretrain" if run_dir else None, meta)
    if on_phase_end is not None:
        on_phase_end("pretrain", model)
    model = attach_class_embedding(model, targets.num_classes, seed=config.seed + 1)
    phase2 = replace(config, conditional=True)
    fine_report = fit(model, targets, phase2, run_dir / "finetune" if run_dir else None, meta)
    return model, pre_report, fine_report
