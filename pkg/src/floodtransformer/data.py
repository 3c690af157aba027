"""Manifests, image/mask loading, the seeded train/test split, synthetic flood
scenes and flip augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, DimensionMismatch, DuplicateId, InvalidParam
from .metrics import BinaryMask
from .tensor import Tensor, bilinear_matrix

MASK_THRESHOLD = 128
TRAIN, TEST = "train", "test"


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image_path: str
    mask_path: str
    split: str = TRAIN


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    seed: int = 0
    ratio: float = 0.1
    root: Optional[Path] = None  # relative paths resolve against this

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise DuplicateId(f"duplicate id {e.id!r}")
            seen.add(e.id)
            if not e.id or not e.image_path or not e.mask_path:
                raise InvalidParam(f"entry {e!r} has an empty field")
            if e.split not in (TRAIN, TEST):
                raise InvalidParam(f"entry {e.id!r}: unknown split {e.split!r}")

    @property
    def train(self) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == TRAIN]

    @property
    def test(self) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == TEST]

    @property
    def ids(self) -> List[str]:
        return [e.id for e in self.entries]

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def write(self, path) -> None:
        lines = [f"# seed={self.seed}\tratio={self.ratio}"]
        lines += [f"{e.id}\t{e.image_path}\t{e.mask_path}\t{e.split}" for e in self.entries]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        seed, ratio = 0, 0.1
        entries = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    key, _, val = tok.partition("=")
                    if key == "seed":
                        seed = int(val)
                    elif key == "ratio":
                        ratio = float(val)
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DecodeError(f"{path}:{lineno}: expected 4 tab-separated fields")
            entries.append(ManifestEntry(*parts))
        return cls(entries, seed=seed, ratio=ratio, root=path.parent)


@dataclass
class Sample:
    id: str
    image: Tensor  # 3 x H x W, values in [0, 1]
    mask: BinaryMask

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DimensionMismatch(f"image must be 3 x H x W, got {self.image.shape}")
        if self.image.shape[1:] != self.mask.shape:
            raise DimensionMismatch(f"image {self.image.shape[1:]} and mask {self.mask.shape} differ")


def test_count(n: int, ratio: float) -> int:
    # round() guards ceil against float noise such as 0.9 * 100 = 90.00000000000001
    return n - math.ceil(round((1.0 - ratio) * n, 9))


def split(
    items: Sequence[Union[str, ManifestEntry]], ratio: float = 0.1, seed: int = 0
) -> DatasetManifest:
    """Seeded random train/test partition.

    After a shuffle by ``seed`` the first ``ceil((1 - ratio) * n)`` items are
    train, the rest test. Entries keep their input order in the manifest.
    Bare ids get the ``images/<id>.png`` / ``masks/<id>.png`` layout.
    """
    if not 0.0 < ratio < 1.0:
        raise InvalidParam(f"ratio must lie in (0, 1), got {ratio}")
    entries = [
        it if isinstance(it, ManifestEntry) else ManifestEntry(str(it), f"images/{it}.png", f"masks/{it}.png")
        for it in items
    ]
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise DuplicateId(f"duplicate id {dup!r}")
    n = len(entries)
    n_test = test_count(n, ratio)
    order = np.random.default_rng(seed).permutation(n)
    test_idx = set(order[n - n_test :].tolist())
    out = [replace(e, split=TEST if i in test_idx else TRAIN) for i, e in enumerate(entries)]
    return DatasetManifest(out, seed=seed, ratio=ratio)


# --- loading ---------------------------------------------------------------


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    """Source index for each output index under half-pixel-centred nearest sampling."""
    idx = np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64)
    return np.minimum(idx, n_in - 1)


def resize_nearest(arr: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    h, w = arr.shape[:2]
    return arr[nearest_indices(h, size[0])][:, nearest_indices(w, size[1])]


def _open(path: Path, mode: str) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode))
    except (UnidentifiedImageError, OSError) as err:
        raise DecodeError(f"cannot decode {path}: {err}") from err


def read_image(path) -> np.ndarray:
    """8-bit RGB file as a ``3 x H x W`` float array in [0, 1]."""
    return _open(Path(path), "RGB").transpose(2, 0, 1) / 255.0


def read_mask(path) -> BinaryMask:
    gray = _open(Path(path), "L")
    return BinaryMask.from_array((gray >= MASK_THRESHOLD).astype(np.uint8))


def load_sample(entry: ManifestEntry, target_size: Tuple[int, int], root=None) -> Sample:
    """Read an image/mask pair and resize it to ``target_size`` (H, W)."""
    root = Path(root) if root is not None else None

    def _p(s):
        p = Path(s)
        return root / p if root is not None and not p.is_absolute() else p

    rgb = _open(_p(entry.image_path), "RGB")
    gray = _open(_p(entry.mask_path), "L")
    if rgb.shape[:2] != gray.shape:
        raise DimensionMismatch(
            f"{entry.id}: image {rgb.shape[:2]} and mask {gray.shape} differ in size"
        )
    th, tw = target_size
    if rgb.shape[:2] != (th, tw):
        rgb = np.asarray(Image.fromarray(rgb).resize((tw, th), Image.BILINEAR))
        gray = resize_nearest(gray, (th, tw))
    image = rgb.transpose(2, 0, 1) / 255.0
    mask = BinaryMask.from_array((gray >= MASK_THRESHOLD).astype(np.uint8))
    return Sample(entry.id, Tensor(image), mask)


def load_split(manifest: DatasetManifest, which: str, target_size) -> List[Sample]:
    entries = manifest.train if which == TRAIN else manifest.test
    return [load_sample(e, target_size, root=manifest.root) for e in entries]


def save_image(path, image) -> None:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    rgb = np.clip(np.round(arr.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(path, optimize=False)


def save_mask(path, mask: BinaryMask) -> None:
    """Write as 8-bit grayscale with water = 255."""
    Image.fromarray((mask.to_array() * 255).astype(np.uint8), mode="L").save(path, optimize=False)


# --- synthetic scenes ------------------------------------------------------

LAND_PALETTE = np.array(
    [
        [0.36, 0.47, 0.22],  # grass
        [0.27, 0.36, 0.17],  # trees
        [0.62, 0.52, 0.36],  # bare soil
        [0.55, 0.45, 0.38],  # dirt road
        [0.66, 0.38, 0.30],  # roof tiles
    ]
)
WATER_PALETTE = np.array(
    [
        [0.22, 0.34, 0.48],
        [0.28, 0.40, 0.52],
        [0.18, 0.30, 0.40],
    ]
)


def _smooth_noise(rng: np.random.Generator, size: Tuple[int, int], cell: int = 8) -> np.ndarray:
    h, w = size
    gh, gw = -(-h // cell), -(-w // cell)
    coarse = rng.standard_normal((gh, gw))
    up = bilinear_matrix(gh, cell) @ coarse @ bilinear_matrix(gw, cell).T
    return up[:h, :w]


def _blob_support(rng, size, radius_range) -> np.ndarray:
    h, w = size
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    r = rng.uniform(*radius_range) * min(h, w)
    amps = rng.uniform(0.0, 0.12, size=3)
    phases = rng.uniform(0.0, 2 * math.pi, size=3)
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    theta = np.arctan2(dy, dx)
    edge = r * (1.0 + sum(a * np.cos(k * theta + p) for k, a, p in zip((2, 3, 4), amps, phases)))
    return np.hypot(dy, dx) <= edge


def synthesize_scene(
    seed: int,
    size: Tuple[int, int] = (32, 32),
    n_blobs: int = 2,
    radius_range: Tuple[float, float] = (0.15, 0.4),
    id: str | None = None,
) -> Sample:
    """Textured dry land with ``n_blobs`` smooth water regions.

    ``radius_range`` is relative to the shorter image side. The mask is the
    exact union of blob supports, evaluated at pixel centres.
    """
    h, w = size
    if h <= 0 or w <= 0:
        raise InvalidParam(f"image size must be positive, got {size}")
    if n_blobs < 0:
        raise InvalidParam(f"n_blobs must be >= 0, got {n_blobs}")
    rng = np.random.default_rng(seed)

    # land: two palette colours mixed by a smooth field, plus a few rectangles
    c1, c2 = LAND_PALETTE[rng.choice(len(LAND_PALETTE), size=2, replace=False)]
    mix = 1.0 / (1.0 + np.exp(-2.0 * _smooth_noise(rng, size)))
    image = c1[:, None, None] * mix + c2[:, None, None] * (1.0 - mix)
    for _ in range(rng.integers(0, 4)):
        y0, x0 = rng.integers(0, h), rng.integers(0, w)
        bh, bw = rng.integers(2, max(3, h // 5)), rng.integers(2, max(3, w // 5))
        image[:, y0 : y0 + bh, x0 : x0 + bw] = LAND_PALETTE[rng.integers(len(LAND_PALETTE))][:, None, None]
    image = image + 0.04 * rng.standard_normal((3, h, w))

    mask = np.zeros((h, w), dtype=bool)
    for _ in range(n_blobs):
        mask |= _blob_support(rng, size, radius_range)
    water_col = WATER_PALETTE[rng.integers(len(WATER_PALETTE))]
    ripple = 0.03 * _smooth_noise(rng, size, cell=4)
    water = water_col[:, None, None] + ripple[None] + 0.02 * rng.standard_normal((3, h, w))
    image = np.where(mask[None], water, image)

    image = np.clip(image, 0.0, 1.0)
    return Sample(id if id is not None else f"scene{seed}", Tensor(image), BinaryMask.from_array(mask.astype(np.uint8)))


# --- augmentation ----------------------------------------------------------


def flip(sample: Sample, horizontal: bool, vertical: bool) -> Sample:
    img = sample.image.data
    m = sample.mask.to_array()
    if horizontal:
        img, m = img[:, :, ::-1], m[:, ::-1]
    if vertical:
        img, m = img[:, ::-1, :], m[::-1, :]
    return Sample(sample.id, Tensor(np.ascontiguousarray(img)), BinaryMask.from_array(np.ascontiguousarray(m)))


def augment(sample: Sample, seed: int) -> Sample:
    """Random horizontal/vertical flips, applied identically to image and mask."""
    rng = np.random.default_rng(seed)
    h, v = rng.random(2) < 0.5
    return flip(sample, bool(h), bool(v))
