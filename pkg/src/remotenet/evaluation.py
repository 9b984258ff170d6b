"""Confusion-matrix metrics, test-time augmentation, and sliding-window inference."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import IGNORE_INDEX
from .data import Palette, Sample, normalize_image, sliding_windows
from .exceptions import ConfigError, DataError, ShapeError


class ConfusionMatrix:
    """K x K counts; rows are reference classes, columns predictions."""

    def __init__(self, num_classes: int, counts: Optional[np.ndarray] = None):
        if num_classes < 1:
            raise ConfigError(f"need at least one class, got {num_classes}")
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        elif counts.shape != (num_classes, num_classes):
            raise ShapeError(f"counts must be {num_classes}x{num_classes}")
        self.counts = counts.astype(np.int64)

    def update(self, pred: np.ndarray, ref: np.ndarray) -> "ConfusionMatrix":
        if pred.shape != ref.shape:
            raise ShapeError(f"prediction {pred.shape} and reference {ref.shape} differ")
        valid = ref != IGNORE_INDEX
        p, r = pred[valid].astype(np.int64), ref[valid].astype(np.int64)
        k = self.num_classes
        if p.size:
            if p.min() < 0 or p.max() >= k:
                raise DataError(f"prediction values outside [0, {k})")
            if r.min() < 0 or r.max() >= k:
                raise DataError(f"reference values outside [0, {k}) + ignore")
            self.counts += np.bincount(r * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge confusion matrices of different sizes")
        self.counts += other.counts
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts.copy()).merge(other)

    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class MetricsReport:
    """Per-class and aggregate scores; None marks undefined values."""

    iou: list[Optional[float]]
    f1: list[Optional[float]]
    miou: Optional[float]
    mean_f1: Optional[float]
    oa: Optional[float]
    excluded: tuple[int, ...] = ()
    class_names: Optional[list[str]] = None

    @property
    def defined(self) -> bool:
        return self.oa is not None


def metrics(cm: ConfusionMatrix, exclude: Sequence[int] = ()) -> MetricsReport:
    """IoU/F1 per class plus mIoU, mean F1, and overall accuracy.

    Excluded classes (and classes absent from both prediction and reference)
    stay out of the means; excluded classes also leave the OA numerator and
    denominator. An empty matrix yields all-None, never NaN.
    """
    counts = cm.counts
    k = cm.num_classes
    excluded = tuple(sorted(set(int(e) for e in exclude)))
    for e in excluded:
        if e < 0 or e >= k:
            raise ConfigError(f"excluded class {e} outside [0, {k})")
    tp = np.diag(counts).astype(np.float64)
    row = counts.sum(axis=1).astype(np.float64)  # reference totals (TP + FN)
    col = counts.sum(axis=0).astype(np.float64)  # prediction totals (TP + FP)

    iou: list[Optional[float]] = []
    f1: list[Optional[float]] = []
    for i in range(k):
        union = row[i] + col[i] - tp[i]
        if union <= 0:
            iou.append(None)
            f1.append(None)
        else:
            iou.append(float(tp[i] / union))
            f1.append(float(2.0 * tp[i] / (row[i] + col[i])))

    keep = [i for i in range(k) if i not in excluded and iou[i] is not None]
    miou = float(np.mean([iou[i] for i in keep])) if keep else None
    mean_f1 = float(np.mean([f1[i] for i in keep])) if keep else None

    oa_classes = [i for i in range(k) if i not in excluded]
    oa_den = float(sum(row[i] for i in oa_classes))
    oa = float(sum(tp[i] for i in oa_classes) / oa_den) if oa_den > 0 else None
    return MetricsReport(iou, f1, miou, mean_f1, oa, excluded)


# ---------------------------------------------------------------------------
# Test-time augmentation
# ---------------------------------------------------------------------------

def _rot(k: int):
    return lambda t: torch.rot90(t, k, dims=(-2, -1))


_TRANSFORMS = {
    "identity": (lambda t: t, lambda t: t),
    "hflip": (lambda t: t.flip(-1), lambda t: t.flip(-1)),
    "vflip": (lambda t: t.flip(-2), lambda t: t.flip(-2)),
    "rot90": (_rot(1), _rot(-1)),
    "rot180": (_rot(2), _rot(-2)),
    "rot270": (_rot(3), _rot(-3)),
}

MULTISCALE = (0.75, 1.0, 1.25)


@dataclass(frozen=True)
class TtaSpec:
    """Invertible transform set for prediction averaging; identity always runs."""

    transforms: tuple[str, ...] = ("identity",)
    scales: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        for name in self.transforms:
            if name not in _TRANSFORMS:
                raise ConfigError(f"transform {name!r} has no exact inverse; "
                                  f"known: {sorted(_TRANSFORMS)}")
        for s in self.scales:
            if s <= 0:
                raise ConfigError(f"TTA scale must be positive, got {s}")
        if "identity" not in self.transforms:
            object.__setattr__(self, "transforms", ("identity",) + self.transforms)
        if 1.0 not in self.scales:
            object.__setattr__(self, "scales", (1.0,) + self.scales)

    @classmethod
    def parse(cls, text: str) -> "TtaSpec":
        """Parse a flag value like ``none``, ``hflip,msc``, or ``hflip,rot90``."""
        tokens = [t.strip() for t in (text or "none").split(",") if t.strip()]
        transforms: list[str] = ["identity"]
        scales: tuple[float, ...] = (1.0,)
        for token in tokens:
            if token == "none":
                continue
            if token == "msc":
                scales = MULTISCALE
            elif token in _TRANSFORMS:
                if token not in transforms:
                    transforms.append(token)
            else:
                raise ConfigError(f"unknown TTA token {token!r}")
        return cls(tuple(transforms), scales)


def pad_to_multiple(x: torch.Tensor, multiple: int) -> tuple[torch.Tensor, tuple[int, int]]:
    """Pad bottom/right so H and W are multiples; returns original dims."""
    h, w = x.shape[-2], x.shape[-1]
    pad_b = (-h) % multiple
    pad_r = (-w) % multiple
    if pad_b == 0 and pad_r == 0:
        return x, (h, w)
    mode = "reflect" if pad_b < h and pad_r < w else "replicate"
    return F.pad(x, (0, pad_r, 0, pad_b), mode=mode), (h, w)


def _prepare(image) -> torch.Tensor:
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image))
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected [3, H, W] image, got {tuple(image.shape)}")
    return image.float().unsqueeze(0)


@torch.no_grad()
def predict_probs(net, image, tta: TtaSpec = TtaSpec(),
                  mean: float = 0.5, std: float = 0.5) -> np.ndarray:
    """Averaged softmax map [K, H, W] over every (scale, transform) pair.

    Scaled inputs are padded up to a stride multiple, the softmax map is
    cropped and inverse-transformed back to native geometry, and all maps are
    averaged uniformly.
    """
    net.eval()
    x = _prepare(image)
    x = (x - mean) / std
    h, w = x.shape[-2], x.shape[-1]
    stride = net.cfg.total_stride
    accum: Optional[torch.Tensor] = None
    n_maps = 0
    for scale in tta.scales:
        if scale == 1.0:
            xs = x
        else:
            xs = F.interpolate(x, size=(max(1, round(h * scale)),
                                        max(1, round(w * scale))),
                               mode="bilinear", align_corners=False)
        for name in tta.transforms:
            forward_t, inverse_t = _TRANSFORMS[name]
            xt = forward_t(xs)
            xp, (th, tw) = pad_to_multiple(xt, stride)
            probs = net(xp).softmax(dim=1)[:, :, :th, :tw]
            probs = inverse_t(probs)
            if probs.shape[-2:] != (h, w):
                probs = F.interpolate(probs, size=(h, w), mode="bilinear",
                                      align_corners=False)
            accum = probs if accum is None else accum + probs
            n_maps += 1
    return (accum[0] / n_maps).numpy()


def predict_labels(net, image, tta: TtaSpec = TtaSpec(),
                   mean: float = 0.5, std: float = 0.5) -> np.ndarray:
    """Argmax of the averaged softmax map; ties go to the lowest class index."""
    return np.argmax(predict_probs(net, image, tta, mean, std), axis=0).astype(np.int64)


def predict_probs_windowed(net, image, tta: TtaSpec = TtaSpec(), window: int = 0,
                           stride: int = 0, mean: float = 0.5,
                           std: float = 0.5) -> np.ndarray:
    """Sliding-window prediction with probability averaging in overlaps.

    window <= 0 or window covering the whole image reduces to a single pass.
    """
    h, w = image.shape[-2], image.shape[-1]
    if window <= 0 or (window >= h and window >= w):
        return predict_probs(net, image, tta, mean, std)
    window = min(window, h, w)
    stride = stride if stride > 0 else window
    accum = np.zeros((net.cfg.num_classes, h, w), dtype=np.float64)
    hits = np.zeros((h, w), dtype=np.float64)
    for top, left in sliding_windows((h, w), window, stride):
        patch = image[:, top:top + window, left:left + window]
        probs = predict_probs(net, patch, tta, mean, std)
        accum[:, top:top + window, left:left + window] += probs
        hits[top:top + window, left:left + window] += 1.0
    return (accum / hits).astype(np.float32)


def evaluate(net, samples: Iterable[Sample], num_classes: int,
             tta: TtaSpec = TtaSpec(), window: int = 0, stride: int = 0,
             mean: float = 0.5, std: float = 0.5,
             exclude: Sequence[int] = ()) -> tuple[MetricsReport, ConfusionMatrix]:
    """Accumulate a confusion matrix over samples and compute metrics."""
    cm = ConfusionMatrix(num_classes)
    for sample in samples:
        probs = predict_probs_windowed(net, sample.image, tta, window, stride,
                                       mean, std)
        pred = np.argmax(probs, axis=0).astype(np.int64)
        cm.update(pred, sample.label)
    return metrics(cm, exclude), cm


def pixel_accuracy(net, samples: Iterable[Sample], mean: float = 0.5,
                   std: float = 0.5) -> float:
    """Plain (no TTA, whole-image) accuracy over non-ignored pixels."""
    correct = 0
    total = 0
    for sample in samples:
        pred = predict_labels(net, sample.image, TtaSpec(), mean, std)
        valid = sample.label != IGNORE_INDEX
        correct += int((pred[valid] == sample.label[valid]).sum())
        total += int(valid.sum())
    return correct / total if total else 0.0


def render_report(report: MetricsReport, class_names: Optional[list[str]] = None,
                  notes: Optional[list[str]] = None) -> str:
    """Structured text report with per-class IoU/F1 and aggregate rows."""
    k = len(report.iou)
    names = class_names or [f"class_{i}" for i in range(k)]
    width = max(len(n) for n in names + ["mean", "OA"]) + 2

    def fmt(v: Optional[float]) -> str:
        return "n/a" if v is None else f"{100.0 * v:7.2f}"

    lines = []
    if report.excluded:
        excluded_names = ", ".join(names[i] for i in report.excluded)
        lines.append(f"# classes excluded from aggregate scores: {excluded_names}")
        lines.append("# OA computed over non-excluded reference pixels")
    for note in notes or []:
        lines.append(f"# {note}")
    lines.append(f"{'Class':<{width}} {'IoU(%)':>8} {'F1(%)':>8}")
    for i in range(k):
        marker = " (excluded)" if i in report.excluded else ""
        lines.append(f"{names[i]:<{width}} {fmt(report.iou[i]):>8} "
                     f"{fmt(report.f1[i]):>8}{marker}")
    lines.append(f"{'mean':<{width}} {fmt(report.miou):>8} {fmt(report.mean_f1):>8}")
    lines.append(f"{'OA':<{width}} {fmt(report.oa):>8}")
    return "\n".join(lines)


def save_prediction(out_dir, sample_id: str, label: np.ndarray,
                    palette: Optional[Palette] = None) -> list[Path]:
    """Write the index raster and, with a palette, a color rendition."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    index_path = out_dir / f"{sample_id}_pred.png"
    Image.fromarray(label.astype(np.uint8), mode="L").save(index_path)
    written.append(index_path)
    if palette is not None:
        color_path = out_dir / f"{sample_id}_color.png"
        Image.fromarray(palette.encode(label), mode="RGB").save(color_path)
        written.append(color_path)
    return written
