"""Dataset ingestion and geometric augmentation.

Supports the LoveDA layout (single-channel index masks, raw 0 = no-data) and
the Potsdam layout (RGB color-coded labels decoded through a palette), plus a
deterministic synthetic toy set for desk-scale tests. Images are carried as
float32 [3, H, W] arrays in [0, 1]; labels as int64 [H, W] with 255 reserved
for ignored pixels.

Expected directory layouts (documented in the README):
    loveda:  root/{train,val,test}/images/*.png + root/<split>/masks/*.png
    potsdam: root/{train,test}/images/*.{png,tif} + root/<split>/labels/*.{png,tif}
Pairs are matched by filename stem.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import IGNORE_INDEX
from .exceptions import ConfigError, DataError, ShapeError

LOVEDA_SPLITS = ("train", "val", "test")
POTSDAM_SPLITS = ("train", "test")
_IMAGE_EXTS = (".png", ".tif", ".tiff", ".jpg", ".jpeg")


@dataclass
class Sample:
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    label: np.ndarray  # int64 [H, W]
    id: str

    def validate(self, num_classes: Optional[int] = None) -> "Sample":
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DataError(f"{self.id}: image must be [3, H, W], got {self.image.shape}")
        if self.label.shape != self.image.shape[1:]:
            raise DataError(f"{self.id}: label dims {self.label.shape} do not match "
                            f"image dims {self.image.shape[1:]}")
        if num_classes is not None:
            bad = (self.label != IGNORE_INDEX) & (self.label >= num_classes)
            if bad.any():
                raise DataError(f"{self.id}: label values outside "
                                f"[0, {num_classes}) + ignore")
        return self


class Palette:
    """Ordered RGB -> class index mapping with an ignore fallback."""

    def __init__(self, entries: list[tuple[tuple[int, int, int], int, str]]):
        colors = [tuple(rgb) for rgb, _, _ in entries]
        if len(set(colors)) != len(colors):
            raise ConfigError("palette colors must be unique")
        indices = sorted(idx for _, idx, _ in entries)
        if indices != list(range(len(entries))):
            raise ConfigError("palette indices must be dense from 0")
        self.entries = [(tuple(rgb), int(idx), str(name)) for rgb, idx, name in entries]

    @property
    def num_classes(self) -> int:
        return len(self.entries)

    def class_names(self) -> list[str]:
        ordered = sorted(self.entries, key=lambda e: e[1])
        return [name for _, _, name in ordered]

    @classmethod
    def from_file(cls, path) -> "Palette":
        entries = []
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 5:
                raise ConfigError(f"{path}:{lineno}: expected R,G,B,index,name")
            r, g, b, idx = (int(p) for p in parts[:4])
            entries.append(((r, g, b), idx, parts[4]))
        if not entries:
            raise ConfigError(f"palette file {path} has no entries")
        return cls(entries)

    def decode(self, rgb: np.ndarray) -> np.ndarray:
        """RGB [H, W, 3] uint8 -> class indices; unlisted colors become ignore."""
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise DataError(f"palette decode expects [H, W, 3], got {rgb.shape}")
        label = np.full(rgb.shape[:2], IGNORE_INDEX, dtype=np.int64)
        for color, idx, _ in self.entries:
            match = np.all(rgb == np.array(color, dtype=rgb.dtype), axis=2)
            label[match] = idx
        return label

    def encode(self, label: np.ndarray) -> np.ndarray:
        """Class indices -> RGB [H, W, 3] uint8; ignore renders black."""
        rgb = np.zeros((*label.shape, 3), dtype=np.uint8)
        for color, idx, _ in self.entries:
            rgb[label == idx] = color
        return rgb


def _bundled_palette(name: str) -> Palette:
    ref = importlib.resources.files("remotenet") / "palettes" / f"{name}.txt"
    with importlib.resources.as_file(ref) as path:
        return Palette.from_file(path)


def default_potsdam_palette() -> Palette:
    return _bundled_palette("potsdam")


def default_loveda_palette() -> Palette:
    return _bundled_palette("loveda")


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _load_raster(path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert(mode))
    except OSError as exc:
        raise DataError(f"cannot read label {path}: {exc}") from exc


def _pair_files(image_dir: Path, label_dir: Path, what: str) -> list[tuple[str, Path, Path]]:
    if not image_dir.is_dir():
        raise DataError(f"missing directory {image_dir}")
    if not label_dir.is_dir():
        raise DataError(f"missing directory {label_dir}")
    images = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in _IMAGE_EXTS)
    if not images:
        raise DataError(f"no images found under {image_dir}")
    pairs = []
    for img_path in images:
        candidates = [label_dir / (img_path.stem + ext) for ext in _IMAGE_EXTS]
        label_path = next((c for c in candidates if c.is_file()), None)
        if label_path is None:
            raise DataError(f"{what} sample {img_path.stem!r} has no label file "
                            f"under {label_dir}")
        pairs.append((img_path.stem, img_path, label_path))
    return pairs


def remap_loveda_mask(raw: np.ndarray) -> np.ndarray:
    """Raw LoveDA masks use 0 = no-data and 1..7 = classes; shift to 0..6 + ignore."""
    label = raw.astype(np.int64)
    out = np.where(label == 0, IGNORE_INDEX, label - 1)
    return out.astype(np.int64)


def load_loveda(root, split: str) -> Iterator[Sample]:
    if split not in LOVEDA_SPLITS:
        raise ConfigError(f"unknown loveda split {split!r}, expected {LOVEDA_SPLITS}")
    base = Path(root) / split
    for stem, img_path, mask_path in _pair_files(base / "images", base / "masks",
                                                 f"loveda/{split}"):
        image = load_image(img_path)
        label = remap_loveda_mask(_load_raster(mask_path, "L"))
        yield Sample(image, label, stem).validate(num_classes=7)


def load_potsdam(root, split: str, palette: Optional[Palette] = None) -> Iterator[Sample]:
    if split not in POTSDAM_SPLITS:
        raise ConfigError(f"unknown potsdam split {split!r}, expected {POTSDAM_SPLITS}")
    palette = palette or default_potsdam_palette()
    base = Path(root) / split
    for stem, img_path, label_path in _pair_files(base / "images", base / "labels",
                                                  f"potsdam/{split}"):
        image = load_image(img_path)
        label = palette.decode(_load_raster(label_path, "RGB"))
        yield Sample(image, label, stem).validate(num_classes=palette.num_classes)


@dataclass
class AugmentSpec:
    hflip: bool = False
    vflip: bool = False
    scale_range: tuple[float, float] = (1.0, 1.0)
    crop: int = 0  # 0 = no crop

    def is_identity(self) -> bool:
        return (not self.hflip and not self.vflip and self.crop == 0
                and self.scale_range == (1.0, 1.0))


def hflip_sample(s: Sample) -> Sample:
    return Sample(np.ascontiguousarray(s.image[:, :, ::-1]),
                  np.ascontiguousarray(s.label[:, ::-1]), s.id)


def vflip_sample(s: Sample) -> Sample:
    return Sample(np.ascontiguousarray(s.image[:, ::-1, :]),
                  np.ascontiguousarray(s.label[::-1, :]), s.id)


def scale_sample(s: Sample, factor: float) -> Sample:
    """Resize image bilinearly and label nearest-neighbor by the same factor."""
    if factor <= 0:
        raise ConfigError(f"scale factor must be positive, got {factor}")
    if factor == 1.0:
        return s
    h, w = s.label.shape
    new_h = max(1, round(h * factor))
    new_w = max(1, round(w * factor))
    image = F.interpolate(torch.from_numpy(s.image).unsqueeze(0),
                          size=(new_h, new_w), mode="bilinear",
                          align_corners=False)[0].numpy()
    label = F.interpolate(torch.from_numpy(s.label.astype(np.float32))[None, None],
                          size=(new_h, new_w), mode="nearest-exact")[0, 0]
    return Sample(image, label.numpy().astype(np.int64), s.id)


def crop_sample(s: Sample, size: int, top: int, left: int) -> Sample:
    """Crop a size x size patch; areas beyond the sample pad with 0 / ignore."""
    if size <= 0:
        raise ConfigError(f"crop size must be positive, got {size}")
    h, w = s.label.shape
    image = np.zeros((3, size, size), dtype=s.image.dtype)
    label = np.full((size, size), IGNORE_INDEX, dtype=np.int64)
    src_t, src_l = max(top, 0), max(left, 0)
    src_b, src_r = min(top + size, h), min(left + size, w)
    if src_b > src_t and src_r > src_l:
        dst_t, dst_l = src_t - top, src_l - left
        dst_b, dst_r = dst_t + (src_b - src_t), dst_l + (src_r - src_l)
        image[:, dst_t:dst_b, dst_l:dst_r] = s.image[:, src_t:src_b, src_l:src_r]
        label[dst_t:dst_b, dst_l:dst_r] = s.label[src_t:src_b, src_l:src_r]
    return Sample(image, label, s.id)


def augment(s: Sample, spec: AugmentSpec, rng: np.random.Generator) -> Sample:
    """Apply one random draw of the spec; image and label share every transform."""
    if spec.is_identity():
        return s
    lo, hi = spec.scale_range
    if (lo, hi) != (1.0, 1.0):
        if lo <= 0 or hi < lo:
            raise ConfigError(f"bad scale range {spec.scale_range}")
        s = scale_sample(s, float(rng.uniform(lo, hi)))
    if spec.hflip and rng.random() < 0.5:
        s = hflip_sample(s)
    if spec.vflip and rng.random() < 0.5:
        s = vflip_sample(s)
    if spec.crop:
        h, w = s.label.shape
        top = int(rng.integers(0, max(h - spec.crop, 0) + 1))
        left = int(rng.integers(0, max(w - spec.crop, 0) + 1))
        s = crop_sample(s, spec.crop, top, left)
    return s


def sliding_windows(hw: tuple[int, int], window: int, stride: int) -> list[tuple[int, int]]:
    """Window offsets covering every pixel; the final offset per axis is
    clipped to dim - window.

    Full coverage is a postcondition, so an effective stride larger than the
    window is capped at the window size (otherwise interior gaps would open).
    """
    h, w = hw
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if window > h or window > w:
        raise ShapeError(f"window {window} exceeds extent {hw}")
    step = min(stride, window)

    def axis_offsets(dim: int) -> list[int]:
        offsets = list(range(0, dim - window + 1, step))
        if offsets[-1] != dim - window:
            offsets.append(dim - window)
        return offsets

    return [(top, left) for top in axis_offsets(h) for left in axis_offsets(w)]


_TOY_COLORS = np.array([
    [0.15, 0.25, 0.75],
    [0.80, 0.20, 0.15],
    [0.15, 0.75, 0.25],
    [0.85, 0.80, 0.20],
    [0.70, 0.25, 0.75],
    [0.20, 0.75, 0.75],
    [0.55, 0.40, 0.20],
    [0.85, 0.55, 0.70],
], dtype=np.float32)


def toy_dataset(n: int, hw: int, classes: int, seed: int) -> list[Sample]:
    """Deterministic colored-rectangle scenes whose label follows the color.

    Rectangle corners snap to an 8-pixel grid so region boundaries align with
    the network's stride-4 output grid.
    """
    if classes < 2:
        raise ConfigError(f"toy dataset needs >= 2 classes, got {classes}")
    if classes > len(_TOY_COLORS):
        raise ConfigError(f"toy dataset supports at most {len(_TOY_COLORS)} classes")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        label = np.zeros((hw, hw), dtype=np.int64)
        # a few large grid-aligned rectangles; later ones overwrite earlier
        for _ in range(4):
            cls = int(rng.integers(1, classes))
            t = int(rng.integers(0, max(hw // 8 - 2, 1))) * 8
            l = int(rng.integers(0, max(hw // 8 - 2, 1))) * 8
            bh = int(rng.integers(2, max(hw // 16, 3))) * 8
            bw = int(rng.integers(2, max(hw // 16, 3))) * 8
            label[t:min(t + bh, hw), l:min(l + bw, hw)] = cls
        noise = rng.normal(0.0, 0.02, size=(3, hw, hw)).astype(np.float32)
        image = _TOY_COLORS[label].transpose(2, 0, 1) + noise
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
        samples.append(Sample(image, label, f"toy-{seed}-{i}"))
    return samples


def normalize_image(image: np.ndarray, mean: float, std: float) -> np.ndarray:
    if std <= 0:
        raise ConfigError(f"normalization std must be positive, got {std}")
    return (image - np.float32(mean)) / np.float32(std)


def collate(samples: list[Sample], mean: float, std: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack samples into a normalized image batch and a label batch."""
    images = np.stack([normalize_image(s.image, mean, std) for s in samples])
    labels = np.stack([s.label for s in samples])
    return torch.from_numpy(images), torch.from_numpy(labels)


def tile_samples(samples, size: int, stride: int) -> Iterator[Sample]:
    """Cut each sample into size x size patches on a sliding grid (whole tiles
    only when the sample is smaller than the patch)."""
    for s in samples:
        h, w = s.label.shape
        if h <= size and w <= size:
            yield s
            continue
        for idx, (top, left) in enumerate(sliding_windows((h, w), min(size, h, w), stride)):
            patch_img = s.image[:, top:top + size, left:left + size]
            patch_lbl = s.label[top:top + size, left:left + size]
            yield Sample(np.ascontiguousarray(patch_img),
                         np.ascontiguousarray(patch_lbl), f"{s.id}#{idx}")
