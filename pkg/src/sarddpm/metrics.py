"""Inception Score, Frechet distance and kernel distance over a pluggable feature extractor."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Protocol

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import rel_entr
from torch import nn

from sarddpm.checkpoint import CheckpointError, load_into, load_state, save_state
from sarddpm.data import Dataset
from sarddpm.unet import num_groups

logger = logging.getLogger(__name__)

COV_REGULARIZATION = 1e-6
PROB_TOLERANCE = 1e-5


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSet:
    features: np.ndarray
    probs: Optional[np.ndarray] = None

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2:
            raise MetricError(f"features must be [n, d], got shape {f.shape}")
        if not np.all(np.isfinite(f)):
            raise MetricError("features contain non-finite values")
        object.__setattr__(self, "features", f)
        if self.probs is not None:
            p = np.asarray(self.probs, dtype=np.float64)
            if p.ndim != 2 or p.shape[0] != f.shape[0]:
                raise MetricError("probs must be [n, K] with one row per feature vector")
            object.__setattr__(self, "probs", p)

    def __len__(self) -> int:
        return self.features.shape[0]


def _check_probs(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1:
        raise MetricError(f"probabilities must be a non-empty [n, K] matrix, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise MetricError("probabilities must be finite and non-negative")
    if np.max(np.abs(p.sum(axis=1) - 1.0)) > PROB_TOLERANCE:
        raise MetricError("probability rows must sum to 1")
    return p


def inception_score(probs: np.ndarray, splits: int = 1) -> float:
    """exp of the mean KL divergence between each row and the row mean.

    With ``splits > 1`` the rows are cut into that many consecutive chunks
    and the per-chunk scores are averaged.
    """
    p = _check_probs(probs)
    if splits < 1 or splits > p.shape[0]:
        raise MetricError(f"splits must lie in 1..{p.shape[0]}")
    scores = []
    for chunk in np.array_split(p, splits):
        marginal = chunk.mean(axis=0, keepdims=True)
        kl = rel_entr(chunk, marginal).sum(axis=1)
        scores.append(math.exp(float(kl.mean())))
    return float(np.mean(scores))


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _features(x) -> np.ndarray:
    return x.features if isinstance(x, FeatureSet) else np.asarray(x, dtype=np.float64)


def frechet_distance(real, fake, regularization: float = COV_REGULARIZATION) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    Covariances are unbiased sample covariances with ``regularization * I``
    added to both. The trace of the matrix square root is taken from the
    eigenvalues of ``S_r^(1/2) S_f S_r^(1/2)``, negative ones clamped to 0.
    """
    a, b = _features(real), _features(fake)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise MetricError(f"feature dimension mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise MetricError("each feature set needs at least 2 samples")
    d = a.shape[1]
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    eye = regularization * np.eye(d)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False)) + eye
    cov_b = np.atleast_2d(np.cov(b, rowvar=False)) + eye
    root_a = _sqrtm_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    eig = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = float(np.sum(np.sqrt(np.clip(eig, 0.0, None))))
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    """Unbiased squared MMD under the cubic polynomial kernel (equal set sizes)."""
    m = x.shape[0]
    if m < 2 or y.shape[0] != m:
        raise MetricError("mmd2_unbiased needs two sets of the same size >= 2")
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    within_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    within_y = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(within_x + within_y - 2.0 * kxy.mean())


def kernel_distance_subsets(real, fake, subset_size: Optional[int] = None, num_subsets: int = 10, seed: int = 0) -> np.ndarray:
    """Per-subset unbiased MMD^2 values; ``kernel_distance`` is their mean."""
    a, b = _features(real), _features(fake)
    if a.shape[1] != b.shape[1]:
        raise MetricError(f"feature dimension mismatch: {a.shape} vs {b.shape}")
    if subset_size is None:
        subset_size = min(a.shape[0], b.shape[0], 1000)
    if subset_size < 2:
        raise MetricError("subset_size must be at least 2")
    if subset_size > a.shape[0] or subset_size > b.shape[0]:
        raise MetricError(f"subset_size {subset_size} exceeds set sizes {a.shape[0]} / {b.shape[0]}")
    if num_subsets < 1:
        raise MetricError("num_subsets must be >= 1")
    rng = np.random.default_rng(seed)
    values = np.empty(num_subsets)
    for i in range(num_subsets):
        ia = rng.choice(a.shape[0], subset_size, replace=False)
        ib = rng.choice(b.shape[0], subset_size, replace=False)
        values[i] = mmd2_unbiased(a[ia], b[ib])
    return values


def kernel_distance(real, fake, subset_size: Optional[int] = None, num_subsets: int = 10, seed: int = 0) -> float:
    return float(kernel_distance_subsets(real, fake, subset_size, num_subsets, seed).mean())


# -- feature extractors -------------------------------------------------------------------


class FeatureExtractor(Protocol):
    """Anything that maps ``[n, C, H, W]`` images in [-1, 1] to (features, class probabilities)."""

    feature_dim: int
    num_classes: int
    image_size: int

    def extract(self, images: np.ndarray) -> FeatureSet: ...


@dataclass(frozen=True)
class ExtractorConfig:
    image_size: int
    num_classes: int
    in_channels: int = 1
    feature_dim: int = 256
    width: int = 32
    epochs: int = 15
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0


class ClassifierNet(nn.Module):
    """Small convolutional classifier; the penultimate activations serve as features."""

    def __init__(self, cfg: ExtractorConfig):
        super().__init__()
        w = cfg.width
        layers, ch, size = [], cfg.in_channels, cfg.image_size
        for out in (w, 2 * w, 4 * w):
            layers += [
                nn.Conv2d(ch, out, 3, padding=1),
                nn.GroupNorm(num_groups(out, 8), out),
                nn.SiLU(),
                nn.Conv2d(out, out, 3, padding=1, stride=2 if size > 4 else 1),
                nn.SiLU(),
            ]
            ch, size = out, max(size // 2, 4)
        self.body = nn.Sequential(*layers)
        self.embed = nn.Linear(ch, cfg.feature_dim)
        self.head = nn.Linear(cfg.feature_dim, cfg.num_classes)

    def forward(self, x):
        h = self.body(x).mean(dim=(2, 3))
        feats = torch.tanh(self.embed(h))
        return feats, self.head(feats)


class TrainedExtractor:
    def __init__(self, config: ExtractorConfig, net: Optional[ClassifierNet] = None):
        self.config = config
        if net is None:
            state = torch.random.get_rng_state()
            torch.manual_seed(config.seed)
            net = ClassifierNet(config)
            torch.random.set_rng_state(state)
        self.net = net.eval()

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def image_size(self) -> int:
        return self.config.image_size

    @torch.no_grad()
    def extract(self, images: np.ndarray, batch_size: int = 256) -> FeatureSet:
        images = np.asarray(images, dtype=np.float32)
        c = self.config
        if images.ndim != 4 or images.shape[1:] != (c.in_channels, c.image_size, c.image_size):
            raise MetricError(
                f"extractor expects [n, {c.in_channels}, {c.image_size}, {c.image_size}] images, got {images.shape}"
            )
        self.net.eval()
        feats, probs = [], []
        for lo in range(0, len(images), batch_size):
            f, logits = self.net(torch.from_numpy(images[lo : lo + batch_size]))
            feats.append(f.double().numpy())
            probs.append(torch.softmax(logits.double(), dim=1).numpy())
        if not feats:
            return FeatureSet(np.zeros((0, c.feature_dim)), np.zeros((0, c.num_classes)))
        return FeatureSet(np.concatenate(feats), np.concatenate(probs))

    @torch.no_grad()
    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.extract(images).probs.argmax(axis=1)

    def save(self, path) -> None:
        save_state(path, "extractor", asdict(self.config), self.net.state_dict())

    @classmethod
    def load(cls, path) -> "TrainedExtractor":
        kind, config, _, state = load_state(path)
        if kind != "extractor":
            raise CheckpointError(f"{path}: expected an extractor checkpoint, found {kind!r}")
        ext = cls(ExtractorConfig(**config))
        load_into(ext.net, state, source=str(path))
        ext.net.eval()
        return ext


def train_feature_extractor(dataset: Dataset, config: Optional[ExtractorConfig] = None, **overrides) -> TrainedExtractor:
    """Fit the classifier on a labelled dataset with cross-entropy."""
    if not dataset.labeled:
        raise MetricError("the feature extractor needs a labelled dataset")
    if config is None:
        config = ExtractorConfig(image_size=dataset.image_size, num_classes=dataset.num_classes, **overrides)
    if config.image_size != dataset.image_size or config.num_classes < dataset.num_classes:
        raise MetricError("extractor config does not match the dataset")
    ext = TrainedExtractor(config)
    net = ext.net
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    images = torch.from_numpy(dataset.images)
    labels = torch.from_numpy(dataset.labels)
    n = len(dataset)
    net.train()
    for epoch in range(config.epochs):
        order = torch.from_numpy(np.random.default_rng([config.seed, epoch]).permutation(n))
        total = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            _, logits = net(images[idx])
            loss = F.cross_entropy(logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        logger.info("extractor epoch %d loss %.4f", epoch + 1, total / n)
    net.eval()
    return ext


# -- evaluation -----------------------------------------------------------------------------


@dataclass
class MetricReport:
    is_mean: float
    fid: float
    kid: float
    kid_std: float
    n_generated: int
    n_real: int
    kid_subset_size: int
    kid_num_subsets: int
    is_splits: int
    seed: int
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {"is": self.is_mean, "fid": self.fid, "kid": self.kid}
        d.update({k: v for k, v in asdict(self).items() if k not in ("is_mean", "fid", "kid", "extra")})
        d.update(self.extra)
        return d

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in self.as_dict().items())

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)

    def table(self, label: str = "model") -> str:
        head = f"{'Model':<16}{'IS ↑':>10}{'FID ↓':>12}{'KID ↓':>12}"
        row = f"{label:<16}{self.is_mean:>10.3f}{self.fid:>12.4f}{self.kid:>12.5f}"
        counts = f"n_generated={self.n_generated} n_real={self.n_real}"
        return f"{head}\n{row}\n{counts}"

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "metrics.txt").write_text(self.to_text())
        (directory / "metrics.json").write_text(self.to_json() + "\n")


@dataclass(frozen=True)
class EvalOptions:
    kid_subset_size: Optional[int] = None
    kid_num_subsets: int = 10
    is_splits: int = 1
    seed: int = 0


def evaluate(generated: np.ndarray, real: "Dataset | np.ndarray", extractor: FeatureExtractor, options: EvalOptions = EvalOptions()) -> MetricReport:
    """IS of the generated set, plus FID and KID against the real set."""
    real_images = real.images if isinstance(real, Dataset) else np.asarray(real)
    generated = np.asarray(generated, dtype=np.float32)
    if generated.shape[1:] != real_images.shape[1:]:
        raise MetricError(f"generated images {generated.shape[1:]} and real images {real_images.shape[1:]} differ")
    if generated.shape[-1] != extractor.image_size:
        raise MetricError(f"extractor expects {extractor.image_size}px images, got {generated.shape[-1]}px")
    fake = extractor.extract(generated)
    ref = extractor.extract(real_images)
    subset = options.kid_subset_size or min(len(fake), len(ref), 1000)
    kids = kernel_distance_subsets(ref, fake, subset, options.kid_num_subsets, options.seed)
    return MetricReport(
        is_mean=inception_score(fake.probs, options.is_splits),
        fid=frechet_distance(ref, fake),
        kid=float(kids.mean()),
        kid_std=float(kids.std(ddof=1)) if len(kids) > 1 else 0.0,
        n_generated=len(fake),
        n_real=len(ref),
        kid_subset_size=subset,
        kid_num_subsets=options.kid_num_subsets,
        is_splits=options.is_splits,
        seed=options.seed,
    )
