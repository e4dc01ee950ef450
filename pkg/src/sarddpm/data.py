"""Dataset preparation: tiling, dB scaling, [-1, 1] normalisation and ingestion."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from sarddpm.tensorio import read_tensor, write_tensor

logger = logging.getLogger(__name__)

DEFAULT_LOG_EPSILON = 1e-6
NORM_PERCENTILES = (0.1, 99.9)
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp", ".pgm", ".gif"}


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class NormalizationParams:
    """Affine map from post-log values onto [-1, 1].

    ``log_scale`` records whether ``to_log_scale`` was applied before the
    affine map, so generated images can be mapped back to input units.
    """

    input_min: float
    input_max: float
    log_epsilon: float = DEFAULT_LOG_EPSILON
    log_scale: bool = True

    def __post_init__(self):
        if not self.input_min < self.input_max:
            raise DataError(f"degenerate normalisation range [{self.input_min}, {self.input_max}]")
        if not self.log_epsilon > 0:
            raise DataError("log_epsilon must be positive")

    def to_text(self) -> str:
        return (
            f"input_min={self.input_min!r}\n"
            f"input_max={self.input_max!r}\n"
            f"log_epsilon={self.log_epsilon!r}\n"
            f"log_scale={int(self.log_scale)}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> "NormalizationParams":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, value = line.partition("=")
                kv[key.strip()] = value.strip()
        try:
            return cls(
                input_min=float(kv["input_min"]),
                input_max=float(kv["input_max"]),
                log_epsilon=float(kv.get("log_epsilon", DEFAULT_LOG_EPSILON)),
                log_scale=bool(int(kv.get("log_scale", 1))),
            )
        except KeyError as exc:
            raise DataError(f"normalisation file lacks key {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "NormalizationParams":
        return cls.from_text(Path(path).read_text())


@dataclass(frozen=True)
class TilingSpec:
    tile: int = 128
    mode: str = "non_overlapping"

    def __post_init__(self):
        if self.tile <= 0:
            raise DataError(f"tile must be positive, got {self.tile}")
        if self.mode != "non_overlapping":
            raise DataError(f"unsupported tiling mode {self.mode!r}")


@dataclass
class Dataset:
    """Normalised images ``[N, 1, H, W]`` (float32) with optional labels."""

    images: np.ndarray
    labels: Optional[np.ndarray]
    num_classes: int
    norm_params: NormalizationParams
    split: str = "train"
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        if self.images.ndim != 4:
            raise DataError(f"images must be [N, C, H, W], got shape {self.images.shape}")
        if self.images.size and (np.abs(self.images).max() > 1.0 or not np.all(np.isfinite(self.images))):
            raise DataError("dataset pixels must be finite and lie in [-1, 1]")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise DataError("labels must have one entry per image")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise DataError(f"labels must lie in [0, {self.num_classes})")
        if self.split not in ("train", "test"):
            raise DataError(f"split must be 'train' or 'test', got {self.split!r}")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_size(self) -> int:
        return int(self.images.shape[-1])

    @property
    def labeled(self) -> bool:
        return self.labels is not None and self.num_classes > 0


def tile_scene(scene: np.ndarray, spec: TilingSpec = TilingSpec()) -> list[np.ndarray]:
    """Cut a scene into non-overlapping ``tile x tile`` pieces in row-major order.

    Trailing rows and columns that do not fill a whole tile are dropped.
    """
    scene = np.asarray(scene)
    if scene.ndim != 2:
        raise DataError(f"scene must be a 2-D matrix, got shape {scene.shape}")
    h, w = scene.shape
    k = spec.tile
    if h < k or w < k:
        raise DataError(f"scene {h}x{w} is smaller than the {k}x{k} tile")
    rows, cols = h // k, w // k
    return [scene[r * k : (r + 1) * k, c * k : (c + 1) * k].copy() for r in range(rows) for c in range(cols)]


def to_log_scale(raw: np.ndarray, eps: float = DEFAULT_LOG_EPSILON) -> np.ndarray:
    """Decibels of magnitude, ``20 * log10(raw + eps)``."""
    raw = np.asarray(raw, dtype=np.float64)
    if eps <= 0:
        raise DataError("eps must be positive")
    if np.any(raw < 0):
        raise DataError("magnitude images must be non-negative")
    return 20.0 * np.log10(raw + eps)


def fit_normalization(
    values: np.ndarray,
    log_epsilon: float = DEFAULT_LOG_EPSILON,
    log_scale: bool = True,
    percentiles: Sequence[float] = NORM_PERCENTILES,
) -> NormalizationParams:
    """Normalisation endpoints from the given percentiles of (post-log) values."""
    lo, hi = np.percentile(np.asarray(values, dtype=np.float64), percentiles)
    if not lo < hi:
        lo, hi = float(np.min(values)), float(np.max(values))
    if not lo < hi:
        raise DataError("cannot normalise constant data")
    return NormalizationParams(float(lo), float(hi), log_epsilon, log_scale)


def normalize(values: np.ndarray, params: NormalizationParams) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    out = 2.0 * (v - params.input_min) / (params.input_max - params.input_min) - 1.0
    return np.clip(out, -1.0, 1.0)


def denormalize(values: np.ndarray, params: NormalizationParams) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return (v + 1.0) * 0.5 * (params.input_max - params.input_min) + params.input_min


def preprocess(raw: np.ndarray, params: NormalizationParams) -> np.ndarray:
    """Apply the stored log/normalise pipeline to raw magnitudes."""
    v = to_log_scale(raw, params.log_epsilon) if params.log_scale else np.asarray(raw, dtype=np.float64)
    return normalize(v, params)


def _prepare_stack(raw: np.ndarray, params: Optional[NormalizationParams], log_scale: bool, log_epsilon: float):
    values = to_log_scale(raw, log_epsilon) if log_scale else np.asarray(raw, dtype=np.float64)
    if params is None:
        params = fit_normalization(values, log_epsilon, log_scale)
    return normalize(values, params).astype(np.float32), params


# -- synthetic data -----------------------------------------------------------


def class_layouts(num_classes: int, image_size: int, layout_seed: int = 0) -> list[np.ndarray]:
    """Point-scatterer layouts, one ``[k, 3]`` array of (row, col, amplitude) per class."""
    rng = np.random.default_rng([layout_seed, 0x5A4])
    lo, hi = 0.2 * image_size, 0.8 * image_size
    layouts = []
    for _ in range(num_classes):
        k = int(rng.integers(3, 7))
        rows = rng.uniform(lo, hi, k)
        cols = rng.uniform(lo, hi, k)
        amps = rng.uniform(0.5, 1.0, k)
        layouts.append(np.stack([rows, cols, amps], axis=1))
    return layouts


def render_target(layout: np.ndarray, image_size: int, rng: np.random.Generator, clutter_floor: float = 0.03) -> np.ndarray:
    """One speckled magnitude image of a scatterer layout."""
    shift = rng.uniform(-1.0, 1.0, 2)
    img = np.zeros((image_size, image_size))
    for r, c, a in layout:
        ri = int(np.clip(round(r + shift[0]), 0, image_size - 1))
        ci = int(np.clip(round(c + shift[1]), 0, image_size - 1))
        img[ri, ci] += a * rng.uniform(0.8, 1.2)
    sigma = max(0.8, image_size / 32.0)
    img = ndimage.gaussian_filter(img, sigma, mode="constant") * (2.0 * np.pi * sigma**2)
    img = img * rng.exponential(1.0, img.shape)
    return img + clutter_floor * rng.exponential(1.0, img.shape)


def generate_synthetic_dataset(
    num_classes: int,
    per_class: int,
    image_size: int,
    seed: int = 0,
    norm_params: Optional[NormalizationParams] = None,
    layout_seed: int = 0,
    split: str = "train",
    log_scale: bool = True,
) -> Dataset:
    """Desk-scale stand-in for a labelled target set.

    Class identity comes from ``layout_seed`` so train and test splits drawn
    with different ``seed`` values share classes. Pass the training split's
    ``norm_params`` when generating a test split.
    """
    for name, v in (("num_classes", num_classes), ("per_class", per_class), ("image_size", image_size)):
        if int(v) < 1:
            raise DataError(f"{name} must be positive, got {v}")
    layouts = class_layouts(num_classes, image_size, layout_seed)
    rng = np.random.default_rng([seed, 0xD47A])
    raw = np.empty((num_classes * per_class, 1, image_size, image_size))
    labels = np.repeat(np.arange(num_classes), per_class)
    for i, label in enumerate(labels):
        raw[i, 0] = render_target(layouts[label], image_size, rng)
    images, params = _prepare_stack(raw, norm_params, log_scale, DEFAULT_LOG_EPSILON)
    return Dataset(images, labels, num_classes, params, split, [f"class_{k}" for k in range(num_classes)])


def generate_clutter_scene(height: int, width: int, seed: int = 0) -> np.ndarray:
    """Speckled background scene with smooth large-scale texture (magnitudes >= 0)."""
    rng = np.random.default_rng([seed, 0xC1A7])
    texture = ndimage.gaussian_filter(rng.normal(size=(height, width)), sigma=8.0)
    texture = np.exp(texture / (texture.std() + 1e-12) * 0.5)
    return 0.1 * texture * rng.exponential(1.0, (height, width))


# -- ingestion -------------------------------------------------------------------


def read_magnitude_image(path) -> np.ndarray:
    """Read a grayscale image file or a 2-D flat-binary tensor as float64."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".bin":
            arr = read_tensor(path)
            if arr.ndim == 3 and arr.shape[0] == 1:
                arr = arr[0]
        else:
            from PIL import Image

            with Image.open(path) as im:
                if im.mode not in ("L", "I", "I;16", "F"):
                    im = im.convert("L")
                arr = np.asarray(im)
    except Exception as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim != 2:
        raise DataError(f"{path}: expected a single-channel 2-D image, got shape {arr.shape}")
    return arr.astype(np.float64)


def _image_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and (p.suffix.lower() in IMAGE_SUFFIXES or p.suffix == ".bin"))


@dataclass(frozen=True)
class FolderLayout:
    """Where splits live under a dataset root.

    If ``root/<train>`` exists the root holds split directories, each laid out
    as ``<split>/<class_name>/<files>``; otherwise the root itself is the
    training split.
    """

    train: str = "train"
    test: str = "test"
    log_scale: bool = True
    log_epsilon: float = DEFAULT_LOG_EPSILON


def _scan_split(directory: Path, class_names: Optional[list[str]] = None):
    if not directory.is_dir():
        raise DataError(f"dataset directory {directory} does not exist")
    found = sorted(p.name for p in directory.iterdir() if p.is_dir())
    if not found:
        raise DataError(f"{directory} contains no class directories")
    if class_names is None:
        class_names = found
    unknown = set(found) - set(class_names)
    if unknown:
        raise DataError(f"{directory}: classes {sorted(unknown)} do not appear in the training split")
    images, labels, size = [], [], None
    for name in found:
        files = _image_files(directory / name)
        if not files:
            raise DataError(f"class directory {name!r} in {directory} is empty")
        for f in files:
            arr = read_magnitude_image(f)
            if size is None:
                size = arr.shape
            elif arr.shape != size:
                raise DataError(f"{f}: image size {arr.shape} differs from {size}")
            if arr.shape[0] != arr.shape[1]:
                raise DataError(f"{f}: images must be square, got {arr.shape}")
            images.append(arr)
            labels.append(class_names.index(name))
    return np.stack(images)[:, None], np.asarray(labels), class_names


def load_image_folder(root, layout: FolderLayout = FolderLayout()) -> tuple[Dataset, Optional[Dataset]]:
    """Load ``root/<class>/<files>`` (or per-split subdirectories) into datasets.

    Normalisation endpoints are fitted on the training split only and reused
    for the test split. Returns ``(train, test_or_None)``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    split_root = (root / layout.train).is_dir()
    train_dir = root / layout.train if split_root else root
    raw, labels, names = _scan_split(train_dir)
    images, params = _prepare_stack(raw, None, layout.log_scale, layout.log_epsilon)
    train = Dataset(images, labels, len(names), params, "train", names)
    test = None
    if split_root and (root / layout.test).is_dir():
        raw_t, labels_t, _ = _scan_split(root / layout.test, names)
        if raw_t.shape[2:] != raw.shape[2:]:
            raise DataError(f"test images are {raw_t.shape[2:]}, training images are {raw.shape[2:]}")
        images_t, _ = _prepare_stack(raw_t, params, layout.log_scale, layout.log_epsilon)
        test = Dataset(images_t, labels_t, len(names), params, "test", names)
    return train, test


def prepare_scenes(
    scenes: Iterable[np.ndarray],
    spec: TilingSpec = TilingSpec(),
    log_scale: bool = True,
    log_epsilon: float = DEFAULT_LOG_EPSILON,
) -> Dataset:
    """Tile raw clutter scenes into an unlabeled dataset."""
    tiles = [t for scene in scenes for t in tile_scene(scene, spec)]
    if not tiles:
        raise DataError("no scenes supplied")
    raw = np.stack(tiles)[:, None]
    images, params = _prepare_stack(raw, None, log_scale, log_epsilon)
    return Dataset(images, None, 0, params, "train")


def scramble_pixels(images: np.ndarray, seed: int = 0) -> np.ndarray:
    """Independently permute the pixels of every image (keeps the histogram, destroys structure)."""
    rng = np.random.default_rng(seed)
    n = images.shape[0]
    flat = images.reshape(n, -1).copy()
    for row in flat:
        rng.shuffle(row)
    return flat.reshape(images.shape)


# -- on-disk dataset directories ---------------------------------------------------


def save_dataset(root, *datasets: Dataset) -> None:
    """Write datasets sharing one set of normalisation parameters under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    params = datasets[0].norm_params
    for ds in datasets:
        if ds.norm_params != params:
            raise DataError("all splits in a dataset directory must share normalisation parameters")
        split_dir = root / ds.split
        split_dir.mkdir(exist_ok=True)
        write_tensor(split_dir / "images.bin", ds.images)
        if ds.labels is not None:
            write_tensor(split_dir / "labels.bin", ds.labels)
    params.save(root / "norm_params.txt")
    names = datasets[0].class_names
    (root / "classes.txt").write_text("".join(f"{n}\n" for n in names))


def load_dataset(root, split: str = "train") -> Dataset:
    root = Path(root)
    split_dir = root / split
    if not (split_dir / "images.bin").is_file():
        raise DataError(f"{root} has no {split!r} split")
    params = NormalizationParams.load(root / "norm_params.txt")
    names_file = root / "classes.txt"
    names = [n for n in names_file.read_text().splitlines() if n] if names_file.exists() else []
    labels = read_tensor(split_dir / "labels.bin") if (split_dir / "labels.bin").is_file() else None
    num_classes = len(names) if labels is not None else 0
    return Dataset(read_tensor(split_dir / "images.bin"), labels, num_classes, params, split, names)


def subset(ds: Dataset, index: np.ndarray) -> Dataset:
    labels = None if ds.labels is None else ds.labels[index]
    return replace(ds, images=ds.images[index], labels=labels)
