"""Fixed noise schedules for the forward and reverse diffusion processes.

Timesteps are 1-based everywhere in the public interface: ``beta(t)`` for
``t = 1..T``. The cumulative product table carries an explicit ``t = 0``
sentinel so that ``alpha_bar(0) == 1``.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

COSINE_OFFSET = 0.008
COSINE_MAX_BETA = 0.999


class ScheduleKind(str, enum.Enum):
    LINEAR = "linear"
    COSINE = "cosine"
    SIGMOID = "sigmoid"

    @classmethod
    def parse(cls, value: "str | ScheduleKind") -> "ScheduleKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown schedule kind {value!r}; expected one of: {names}") from None


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Precomputed double-precision tables for a T-step schedule.

    Storage is 0-based: ``betas[t - 1]`` is beta_t while ``alpha_bars[t]``
    is the cumulative product up to t (``alpha_bars[0] == 1``). Use the
    accessor methods for 1-based lookups.
    """

    kind: ScheduleKind
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    posterior_variances: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ValueError("betas must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(betas)) or np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("every beta must lie strictly inside (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
        post_var = posterior_variance_from_tables(betas, alpha_bars)
        object.__setattr__(self, "betas", _readonly(betas))
        object.__setattr__(self, "alphas", _readonly(alphas))
        object.__setattr__(self, "alpha_bars", _readonly(alpha_bars))
        object.__setattr__(self, "posterior_variances", _readonly(post_var))

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def check_t(self, t) -> None:
        arr = np.asarray(t.detach().cpu() if isinstance(t, torch.Tensor) else t)
        if arr.size and (arr.min() < 1 or arr.max() > self.T):
            raise ValueError(f"timestep out of range: expected 1..{self.T}, got {arr.min()}..{arr.max()}")

    def beta(self, t: int) -> float:
        self.check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self.check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep out of range: expected 0..{self.T}, got {t}")
        return float(self.alpha_bars[t])

    def posterior_variance(self, t: int) -> float:
        self.check_t(t)
        return float(self.posterior_variances[t - 1])

    def table(self, name: str, dtype: torch.dtype = torch.float32, device=None) -> torch.Tensor:
        """Return one of the tables as a tensor in the backend precision."""
        arr = getattr(self, name)
        return torch.as_tensor(np.array(arr), dtype=dtype, device=device)

    def describe(self) -> dict:
        return {"kind": self.kind.value, "T": self.T}


def posterior_variance_from_tables(betas: np.ndarray, alpha_bars: np.ndarray) -> np.ndarray:
    """beta_tilde_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t, for t = 1..T."""
    return (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:]) * betas


def _check_range(T: int, beta_1: float, beta_T: float) -> None:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not beta_1 > 0.0:
        raise ValueError(f"beta_1 must be > 0, got {beta_1}")
    if not beta_T < 1.0:
        raise ValueError(f"beta_T must be < 1, got {beta_T}")
    if beta_1 > beta_T:
        raise ValueError(f"beta_1 ({beta_1}) must not exceed beta_T ({beta_T})")


def make_linear(T: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02) -> NoiseSchedule:
    _check_range(T, beta_1, beta_T)
    betas = np.linspace(beta_1, beta_T, T, dtype=np.float64)
    return NoiseSchedule(ScheduleKind.LINEAR, betas)


def cosine_alpha_bar(t: np.ndarray, T: int, s: float = COSINE_OFFSET) -> np.ndarray:
    """Unclamped squared-cosine signal curve f(t) / f(0)."""
    f = lambda u: np.cos((u / T + s) / (1.0 + s) * math.pi / 2.0) ** 2  # noqa: E731
    return f(np.asarray(t, dtype=np.float64)) / f(0.0)


def make_cosine(T: int = 1000) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    abar = cosine_alpha_bar(np.arange(T + 1), T)
    betas = np.minimum(1.0 - abar[1:] / abar[:-1], COSINE_MAX_BETA)
    return NoiseSchedule(ScheduleKind.COSINE, betas)


def make_sigmoid(T: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02) -> NoiseSchedule:
    _check_range(T, beta_1, beta_T)
    if T == 1:
        x = np.zeros(1)
    else:
        x = 12.0 * np.arange(T, dtype=np.float64) / (T - 1) - 6.0
    betas = beta_1 + (beta_T - beta_1) / (1.0 + np.exp(-x))
    return NoiseSchedule(ScheduleKind.SIGMOID, betas)


def make_schedule(kind: "str | ScheduleKind", T: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02) -> NoiseSchedule:
    kind = ScheduleKind.parse(kind)
    if kind is ScheduleKind.LINEAR:
        return make_linear(T, beta_1, beta_T)
    if kind is ScheduleKind.COSINE:
        return make_cosine(T)
    return make_sigmoid(T, beta_1, beta_T)


def dump_curve(schedule: NoiseSchedule) -> list[tuple[int, float]]:
    """(t, alpha_bar_t) pairs for t = 0..T."""
    return [(t, float(v)) for t, v in enumerate(schedule.alpha_bars)]


def format_value(v: float) -> str:
    # positional notation, shortest string that round-trips the double exactly
    return np.format_float_positional(float(v), unique=True, trim="0")


def curve_to_csv(pairs: Iterable[Sequence], out: "io.TextIOBase | None" = None) -> str:
    buf = out if out is not None else io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t", "alpha_bar"])
    for t, v in pairs:
        writer.writerow([int(t), format_value(v)])
    return buf.getvalue() if out is None else ""
