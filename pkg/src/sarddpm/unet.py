"""Noise-prediction UNet with residual blocks, group norm and self-attention."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class UNetConfig:
    """Architecture hyperparameters.

    The defaults describe the full-size 128 x 128 model: four resolution
    levels (three down/upsamplings) with two residual blocks each per side,
    self-attention at 32 x 32 and dropout 0.3.
    """

    in_channels: int = 1
    base_channels: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2, 4, 8)
    res_blocks_total_per_side: int = 8
    attention_resolution: int = 32
    dropout_p: float = 0.3
    num_classes: Optional[int] = None
    time_embed_dim: Optional[int] = None
    image_size: int = 128
    num_timesteps: int = 1000

    def __post_init__(self) -> None:
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        if self.time_embed_dim is None:
            object.__setattr__(self, "time_embed_dim", 4 * self.base_channels)
        self.validate()

    def validate(self) -> None:
        levels = len(self.channel_multipliers)
        if self.in_channels < 1 or self.base_channels < 1 or levels < 1:
            raise ValueError("in_channels, base_channels and channel_multipliers must be positive")
        if any(m < 1 for m in self.channel_multipliers):
            raise ValueError("channel multipliers must be positive")
        if self.image_size < 1 or self.image_size % (2 ** (levels - 1)):
            raise ValueError(
                f"image_size {self.image_size} is not divisible by 2^{levels - 1} "
                f"required by {levels} resolution levels"
            )
        if self.attention_resolution not in self.resolutions:
            raise ValueError(
                f"attention_resolution {self.attention_resolution} is not one of the "
                f"feature-map sizes {list(self.resolutions)}"
            )
        if self.res_blocks_total_per_side < levels:
            raise ValueError("res_blocks_total_per_side must be at least the number of levels")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.num_classes is not None and self.num_classes < 1:
            raise ValueError("num_classes must be positive when given")
        if self.num_timesteps < 1 or self.time_embed_dim < 1:
            raise ValueError("num_timesteps and time_embed_dim must be positive")

    @property
    def resolutions(self) -> tuple[int, ...]:
        return tuple(self.image_size // 2**i for i in range(len(self.channel_multipliers)))

    @property
    def level_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_multipliers)

    @property
    def blocks_per_level(self) -> tuple[int, ...]:
        """Residual blocks per level; any remainder goes to the finest levels."""
        levels = len(self.channel_multipliers)
        q, r = divmod(self.res_blocks_total_per_side, levels)
        return tuple(q + (1 if i < r else 0) for i in range(levels))

    @property
    def conditional(self) -> bool:
        return self.num_classes is not None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})

    def replace(self, **changes) -> "UNetConfig":
        d = self.to_dict()
        d.update(changes)
        return UNetConfig.from_dict(d)


def num_groups(channels: int, max_groups: int = 32) -> int:
    """Largest divisor of ``channels`` not exceeding ``max_groups``."""
    for g in range(min(max_groups, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of (possibly fractional) timesteps, shape ``[B, dim]``."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / max(half, 1))
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class SeededDropout(nn.Module):
    """Inverted dropout that draws its mask from a caller-supplied generator."""

    def __init__(self, p: float):
        super().__init__()
        self.p = p
        self.generator: Optional[torch.Generator] = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.training or self.p == 0.0:
            return x
        keep = torch.rand(x.shape, generator=self.generator, dtype=torch.float32).to(x.device) >= self.p
        return x * keep.to(x.dtype) / (1.0 - self.p)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, dropout: float):
        super().__init__()
        self.norm1 = nn.GroupNorm(num_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(num_groups(out_ch), out_ch)
        self.dropout = SeededDropout(dropout)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(self.dropout(F.silu(self.norm2(h))))
        return self.skip(x) + h


class AttnBlock(nn.Module):
    """Single-head self-attention over all spatial positions."""

    def __init__(self, ch: int):
        super().__init__()
        self.norm = nn.GroupNorm(num_groups(ch), ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        out = torch.einsum("bij,bcj->bci", attn, v).reshape(b, c, h, w)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class UNet(nn.Module):
    """epsilon-predictor ``eps_theta(x_t, t, y)``.

    The encoder stores the output of every residual block (after attention,
    where present); the decoder consumes them in reverse order by channel
    concatenation. Time and class embeddings share one vector that is
    injected into every residual block.
    """

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        c = config
        base, emb_dim = c.base_channels, c.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(base, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.class_embed = nn.Embedding(c.num_classes, emb_dim) if c.conditional else None
        self.conv_in = nn.Conv2d(c.in_channels, base, 3, padding=1)

        self.down = nn.ModuleList()
        skip_channels = []
        ch = base
        for level, (mult_ch, n_blocks, res) in enumerate(zip(c.level_channels, c.blocks_per_level, c.resolutions)):
            stage = nn.ModuleDict({"blocks": nn.ModuleList(), "attns": nn.ModuleList()})
            for _ in range(n_blocks):
                stage["blocks"].append(ResBlock(ch, mult_ch, emb_dim, c.dropout_p))
                ch = mult_ch
                stage["attns"].append(AttnBlock(ch) if res == c.attention_resolution else nn.Identity())
                skip_channels.append(ch)
            if level < len(c.channel_multipliers) - 1:
                stage["sample"] = Downsample(ch)
            self.down.append(stage)

        self.mid_block1 = ResBlock(ch, ch, emb_dim, c.dropout_p)
        self.mid_attn = AttnBlock(ch)
        self.mid_block2 = ResBlock(ch, ch, emb_dim, c.dropout_p)

        self.up = nn.ModuleList()
        for level in reversed(range(len(c.channel_multipliers))):
            mult_ch, n_blocks, res = c.level_channels[level], c.blocks_per_level[level], c.resolutions[level]
            stage = nn.ModuleDict({"blocks": nn.ModuleList(), "attns": nn.ModuleList()})
            for _ in range(n_blocks):
                stage["blocks"].append(ResBlock(ch + skip_channels.pop(), mult_ch, emb_dim, c.dropout_p))
                ch = mult_ch
                stage["attns"].append(AttnBlock(ch) if res == c.attention_resolution else nn.Identity())
            if level > 0:
                stage["sample"] = Upsample(ch)
            self.up.append(stage)

        self.norm_out = nn.GroupNorm(num_groups(ch), ch)
        self.conv_out = nn.Conv2d(ch, c.in_channels, 3, padding=1)

    def set_dropout_generator(self, generator: Optional[torch.Generator]) -> None:
        for m in self.modules():
            if isinstance(m, SeededDropout):
                m.generator = generator

    def embed(self, t: torch.Tensor, class_ids: Optional[torch.Tensor]) -> torch.Tensor:
        emb = self.time_mlp(timestep_embedding(t, self.config.base_channels).to(self.conv_in.weight.dtype))
        if self.class_embed is not None:
            emb = emb + self.class_embed(class_ids)
        return emb

    def forward(self, x: torch.Tensor, t: torch.Tensor, class_ids: Optional[torch.Tensor] = None) -> torch.Tensor:
        emb = self.embed(t, class_ids)
        h = self.conv_in(x)
        skips = []
        for stage in self.down:
            for block, attn in zip(stage["blocks"], stage["attns"]):
                h = attn(block(h, emb))
                skips.append(h)
            if "sample" in stage:
                h = stage["sample"](h)
        h = self.mid_block2(self.mid_attn(self.mid_block1(h, emb)), emb)
        for stage in self.up:
            for block, attn in zip(stage["blocks"], stage["attns"]):
                h = attn(block(torch.cat([h, skips.pop()], dim=1), emb))
            if "sample" in stage:
                h = stage["sample"](h)
        return self.conv_out(F.silu(self.norm_out(h)))

    def predict_noise(
        self,
        xt: torch.Tensor,
        t: torch.Tensor,
        class_ids: Optional[torch.Tensor] = None,
        train_mode: bool = False,
    ) -> torch.Tensor:
        """Validated entry point: checks shapes, timestep range and conditioning."""
        c = self.config
        if xt.ndim != 4 or xt.shape[1] != c.in_channels or xt.shape[2] != c.image_size or xt.shape[3] != c.image_size:
            raise ValueError(
                f"expected input [B, {c.in_channels}, {c.image_size}, {c.image_size}], got {list(xt.shape)}"
            )
        t = torch.as_tensor(t, device=xt.device)
        if t.ndim == 0:
            t = t.expand(xt.shape[0])
        if t.shape[0] != xt.shape[0]:
            raise ValueError(f"expected {xt.shape[0]} timesteps, got {t.shape[0]}")
        if t.numel() and (int(t.min()) < 1 or int(t.max()) > c.num_timesteps):
            raise ValueError(f"timestep out of range 1..{c.num_timesteps}")
        if c.conditional:
            if class_ids is None:
                raise ValueError("class_ids are required for a conditional model")
            class_ids = torch.as_tensor(class_ids, dtype=torch.long, device=xt.device).reshape(-1)
            if class_ids.shape[0] != xt.shape[0]:
                raise ValueError(f"expected {xt.shape[0]} class ids, got {class_ids.shape[0]}")
            if class_ids.numel() and (int(class_ids.min()) < 0 or int(class_ids.max()) >= c.num_classes):
                raise ValueError(f"class id out of range 0..{c.num_classes - 1}")
        else:
            class_ids = None
        was_training = self.training
        self.train(train_mode)
        try:
            return self(xt, t, class_ids)
        finally:
            self.train(was_training)


def build(config: UNetConfig, seed: int = 0) -> UNet:
    """Construct a UNet with parameters initialised reproducibly from ``seed``."""
    config.validate()
    state = torch.random.get_rng_state()
    try:
        torch.manual_seed(int(seed))
        model = UNet(config)
    finally:
        torch.random.set_rng_state(state)
    model.eval()
    return model


def parameter_count(config: UNetConfig) -> int:
    """Closed-form number of trainable scalars, without building the model.

    Per component: conv k x k from a to b channels has ``k*k*a*b + b``;
    linear a -> b has ``a*b + b``; group norm over c channels has ``2c``;
    a residual block a -> b with embedding size e is
    ``2a + (9ab + b) + (eb + b) + 2b + (9b^2 + b)`` plus ``ab + b`` for the
    1 x 1 shortcut when a != b; attention over c channels is
    ``2c + (3c^2 + 3c) + (c^2 + c)``.
    """
    c = config
    e = c.time_embed_dim

    def res(a, b):
        n = 2 * a + 9 * a * b + b + e * b + b + 2 * b + 9 * b * b + b
        return n + (a * b + b if a != b else 0)

    def attn(ch):
        return 2 * ch + 3 * ch * ch + 3 * ch + ch * ch + ch

    def conv3(a, b):
        return 9 * a * b + b

    total = c.base_channels * e + e + e * e + e
    if c.conditional:
        total += c.num_classes * e
    total += conv3(c.in_channels, c.base_channels)
    ch = c.base_channels
    skips = []
    levels = len(c.channel_multipliers)
    for level in range(levels):
        out = c.level_channels[level]
        for _ in range(c.blocks_per_level[level]):
            total += res(ch, out)
            ch = out
            if c.resolutions[level] == c.attention_resolution:
                total += attn(ch)
            skips.append(ch)
        if level < levels - 1:
            total += conv3(ch, ch)
    total += 2 * res(ch, ch) + attn(ch)
    for level in reversed(range(levels)):
        out = c.level_channels[level]
        for _ in range(c.blocks_per_level[level]):
            total += res(ch + skips.pop(), out)
            ch = out
            if c.resolutions[level] == c.attention_resolution:
                total += attn(ch)
        if level > 0:
            total += conv3(ch, ch)
    total += 2 * ch + conv3(ch, c.in_channels)
    return total


def parameter_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
