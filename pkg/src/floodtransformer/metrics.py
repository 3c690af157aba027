"""Flood Capacity, per-class IoU / mIoU and pixel accuracy on binary masks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Sequence

import numpy as np

from .errors import EmptyInput, EmptyMask, InvalidParam, ShapeMismatch
from .tensor import Tensor


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """An ``height x width`` grid of 0/1 labels, 1 meaning water."""

    height: int
    width: int
    pixels: np.ndarray  # flat uint8, row-major

    def __post_init__(self):
        px = np.ascontiguousarray(np.asarray(self.pixels).reshape(-1))
        if self.height < 0 or self.width < 0 or px.size != self.height * self.width:
            raise ShapeMismatch(
                f"{px.size} pixels do not fill a {self.height}x{self.width} mask"
            )
        if px.size and not np.all((px == 0) | (px == 1)):
            raise InvalidParam("mask pixels must be exactly 0 or 1")
        px = px.astype(np.uint8)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.pixels, other.pixels)

    def __hash__(self):
        return hash((self.height, self.width, self.pixels.tobytes()))

    @classmethod
    def from_array(cls, arr) -> "BinaryMask":
        a = np.asarray(arr)
        if a.ndim == 3 and a.shape[0] == 1:
            a = a[0]
        if a.ndim != 2:
            raise ShapeMismatch(f"expected a 2-D array, got shape {a.shape}")
        return cls(a.shape[0], a.shape[1], a.reshape(-1))

    @property
    def shape(self):
        return self.height, self.width

    def to_array(self) -> np.ndarray:
        return self.pixels.reshape(self.height, self.width)

    def complement(self) -> "BinaryMask":
        return BinaryMask(self.height, self.width, 1 - self.pixels)

    def transpose(self) -> "BinaryMask":
        return BinaryMask.from_array(self.to_array().T)


def flood_capacity(mask: BinaryMask) -> float:
    """Fraction of pixels labelled water."""
    total = mask.pixels.size
    if total == 0:
        raise EmptyMask("flood capacity of an empty mask is undefined")
    return int(np.count_nonzero(mask.pixels)) / total


def _check_pair(pred: BinaryMask, truth: BinaryMask) -> None:
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"mask shapes differ: {pred.shape} vs {truth.shape}")


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = int(np.count_nonzero(a | b))
    if union == 0:
        # class absent from both masks counts as a perfect match
        return 1.0
    return int(np.count_nonzero(a & b)) / union


def miou(pred: BinaryMask, truth: BinaryMask) -> dict:
    """Per-class IoU for water (1) and background (0), and their mean."""
    _check_pair(pred, truth)
    p = pred.pixels.astype(bool)
    t = truth.pixels.astype(bool)
    water = _iou(p, t)
    background = _iou(~p, ~t)
    return {
        "iou_water": water,
        "iou_background": background,
        "miou": (water + background) / 2.0,
    }


def pixel_accuracy(pred: BinaryMask, truth: BinaryMask) -> float:
    _check_pair(pred, truth)
    if pred.pixels.size == 0:
        raise EmptyMask("pixel accuracy of empty masks is undefined")
    return int(np.count_nonzero(pred.pixels == truth.pixels)) / pred.pixels.size


def binarize(probabilities, threshold: float = 0.5) -> BinaryMask:
    """Pixel is water iff its probability is >= ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise InvalidParam(f"threshold must lie in (0, 1), got {threshold}")
    if isinstance(probabilities, Tensor):
        probabilities = probabilities.data
    arr = np.asarray(probabilities, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ShapeMismatch(f"expected 1 x H x W probabilities, got {arr.shape}")
        arr = arr[0]
    if arr.ndim != 2:
        raise ShapeMismatch(f"expected 1 x H x W probabilities, got {arr.shape}")
    return BinaryMask.from_array((arr >= threshold).astype(np.uint8))


@dataclass(frozen=True)
class ImageScore:
    id: str
    fc: float
    iou_water: float
    iou_background: float
    miou: float
    pa: float


def score(image_id: str, pred: BinaryMask, truth: BinaryMask) -> ImageScore:
    """All per-image metrics; FC is measured on the prediction."""
    m = miou(pred, truth)
    return ImageScore(
        id=image_id,
        fc=flood_capacity(pred),
        iou_water=m["iou_water"],
        iou_background=m["iou_background"],
        miou=m["miou"],
        pa=pixel_accuracy(pred, truth),
    )


@dataclass
class FloodReport:
    per_image: List[ImageScore]
    miou_mean: float
    miou_std: float
    pa_mean: float
    pa_std: float
    fc_mean: float = field(default=float("nan"))

    def write(self, path) -> None:
        write_report(self, path)


def _mean_std(values: Sequence[float]):
    arr = np.asarray(values, dtype=np.float64)
    mu = float(arr.mean())
    return mu, float(math.sqrt(np.mean((arr - mu) ** 2)))


def aggregate(entries: Iterable[ImageScore]) -> FloodReport:
    """Mean and population standard deviation of mIoU and PA."""
    entries = list(entries)
    if not entries:
        raise EmptyInput("cannot aggregate an empty list of scores")
    # sort so the floating-point sums do not depend on input order
    ordered = sorted(entries, key=lambda e: (e.miou, e.pa, e.fc, e.id))
    miou_mu, miou_sd = _mean_std([e.miou for e in ordered])
    pa_mu, pa_sd = _mean_std([e.pa for e in ordered])
    fc_mu, _ = _mean_std([e.fc for e in ordered])
    return FloodReport(entries, miou_mu, miou_sd, pa_mu, pa_sd, fc_mu)


REPORT_FIELDS = ("id", "fc", "iou_water", "iou_background", "miou", "pa")


def write_report(report: FloodReport, path) -> None:
    """Tab-separated, one line per image, then a line starting with ``AGGREGATE``."""
    lines = ["#" + "\t".join(REPORT_FIELDS)]
    for e in report.per_image:
        lines.append(
            "\t".join(
                [e.id] + [f"{getattr(e, k):.6f}" for k in REPORT_FIELDS[1:]]
            )
        )
    lines.append(
        f"AGGREGATE\tmiou_mean={report.miou_mean:.6f}\tmiou_std={report.miou_std:.6f}"
        f"\tpa_mean={report.pa_mean:.6f}\tpa_std={report.pa_std:.6f}"
    )
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path) -> FloodReport:
    per_image = []
    agg = {}
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if parts[0] == "AGGREGATE":
            agg = {k: float(v) for k, v in (p.split("=", 1) for p in parts[1:])}
            continue
        vals = [float(x) for x in parts[1:]]
        per_image.append(ImageScore(parts[0], *vals))
    if not agg:
        raise InvalidParam(f"{path}: no AGGREGATE line")
    fc = float(np.mean([e.fc for e in per_image])) if per_image else float("nan")
    return FloodReport(per_image, agg["miou_mean"], agg["miou_std"], agg["pa_mean"], agg["pa_std"], fc)
