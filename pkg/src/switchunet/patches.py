"""Image I/O, normalization, overlapped patch tiling/stitching and dataset manifests."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import DataError, ShapeError
from .tensor import Tensor, get_default_dtype

PATCH = 512
OVERLAP = 10
MASK_THRESHOLD = 128
SPLITS = ("train", "val", "test")
TARGET_RATIOS = {"train": 0.60, "val": 0.10, "test": 0.30}
MANIFEST_HEADER = ["image", "mask", "category", "split"]


# Category attributes of the 1500-image panoramic benchmark.
@dataclass(frozen=True)
class CategoryInfo:
    category: int
    missing_teeth: bool
    restoration: bool
    appliance: bool
    implant: bool
    images: int
    average_teeth: int


CATEGORY_TABLE = {
    c.category: c
    for c in [
        CategoryInfo(1, False, True, True, False, 73, 32),
        CategoryInfo(2, False, True, False, False, 220, 32),
        CategoryInfo(3, False, False, True, False, 45, 32),
        CategoryInfo(4, False, False, False, False, 140, 32),
        CategoryInfo(5, True, False, False, True, 120, 18),
        CategoryInfo(6, False, False, False, False, 170, 37),
        CategoryInfo(7, True, True, True, False, 115, 27),
        CategoryInfo(8, True, True, False, False, 457, 29),
        CategoryInfo(9, True, False, True, False, 45, 28),
        CategoryInfo(10, True, False, False, False, 115, 28),
    ]
}


def read_gray(path) -> np.ndarray:
    """8-bit grayscale pixels of an image file as a (h, w) uint8 array."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def read_mask(path) -> np.ndarray:
    """Binary (h, w) uint8 mask; foreground is any pixel >= 128."""
    return (read_gray(path) >= MASK_THRESHOLD).astype(np.uint8)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def write_gray(path, pixels: np.ndarray) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L").save(path)


def normalize(image: np.ndarray, dtype=None) -> Tensor:
    """Map 8-bit pixels to [0, 1] as a (1, 1, h, w) tensor."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ShapeError(f"expected a (h, w) grayscale image, got {image.shape}")
    dtype = np.dtype(dtype or get_default_dtype())
    return Tensor((image.astype(dtype) / dtype.type(255))[None, None], dtype=dtype)


@dataclass(frozen=True)
class PatchGrid:
    patch: int
    overlap: int
    image_w: int
    image_h: int
    xs: tuple[int, ...]
    ys: tuple[int, ...]

    @property
    def stride(self) -> int:
        return self.patch - self.overlap

    @property
    def origins(self) -> list[tuple[int, int]]:
        """Top-left (x, y) corners in row-major order."""
        return [(x, y) for y in self.ys for x in self.xs]

    @property
    def padded_w(self) -> int:
        return max(self.image_w, self.patch)

    @property
    def padded_h(self) -> int:
        return max(self.image_h, self.patch)

    def __len__(self) -> int:
        return len(self.xs) * len(self.ys)


def _axis_origins(size: int, patch: int, stride: int) -> tuple[int, ...]:
    if size <= patch:
        return (0,)
    origins = list(range(0, size - patch + 1, stride))
    if origins[-1] + patch < size:
        origins.append(size - patch)
    return tuple(origins)


def plan_patches(image_w: int, image_h: int, patch: int = PATCH, overlap: int = OVERLAP) -> PatchGrid:
    """Stride-then-clamp tiling: origins every ``patch - overlap`` pixels, with
    the last window pulled back to end at the image edge."""
    if patch < 1 or overlap < 0 or patch <= overlap:
        raise ValueError(f"need patch > overlap >= 0, got patch={patch}, overlap={overlap}")
    if image_w < 1 or image_h < 1:
        raise ValueError(f"image size must be positive, got {image_w}x{image_h}")
    stride = patch - overlap
    return PatchGrid(
        patch, overlap, image_w, image_h, _axis_origins(image_w, patch, stride), _axis_origins(image_h, patch, stride)
    )


def _as_array(image) -> np.ndarray:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim != 4 or arr.shape[0] != 1:
        raise ShapeError(f"expected a (1, c, h, w) image, got {arr.shape}")
    return arr


def extract_patches(image, grid: PatchGrid) -> list[Tensor]:
    arr = _as_array(image)
    _, c, h, w = arr.shape
    if (w, h) != (grid.image_w, grid.image_h):
        raise ValueError(f"grid planned for {grid.image_w}x{grid.image_h}, image is {w}x{h}")
    p = grid.patch
    if h < p or w < p:
        padded = np.zeros((1, c, grid.padded_h, grid.padded_w), dtype=arr.dtype)
        padded[:, :, :h, :w] = arr
        arr = padded
    return [Tensor(arr[:, :, y : y + p, x : x + p].copy()) for x, y in grid.origins]


def stitch(patch_outputs: Sequence, grid: PatchGrid) -> Tensor:
    """Average overlapping patch outputs back onto the image canvas."""
    if len(patch_outputs) != len(grid):
        raise ValueError(f"expected {len(grid)} patch outputs, got {len(patch_outputs)}")
    arrays = [_as_array(t) for t in patch_outputs]
    p = grid.patch
    c = arrays[0].shape[1]
    dtype = arrays[0].dtype
    for a in arrays:
        if a.shape != (1, c, p, p):
            raise ShapeError(f"patch output must be (1, {c}, {p}, {p}), got {a.shape}")
    # wide accumulator keeps sums of at most four equal values exact
    acc_dtype = np.longdouble if dtype == np.float64 else np.float64
    acc = np.zeros((1, c, grid.padded_h, grid.padded_w), dtype=acc_dtype)
    cover = np.zeros((grid.padded_h, grid.padded_w), dtype=acc_dtype)
    for a, (x, y) in zip(arrays, grid.origins):
        acc[:, :, y : y + p, x : x + p] += a
        cover[y : y + p, x : x + p] += 1
    out = (acc / cover)[:, :, : grid.image_h, : grid.image_w]
    return Tensor(out.astype(dtype))


def coverage(grid: PatchGrid) -> np.ndarray:
    """Number of patches covering each image pixel."""
    cover = np.zeros((grid.padded_h, grid.padded_w), dtype=np.int64)
    for x, y in grid.origins:
        cover[y : y + grid.patch, x : x + grid.patch] += 1
    return cover[: grid.image_h, : grid.image_w]


def one_hot(mask: np.ndarray, num_classes: int = 2, dtype=None) -> Tensor:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"expected a (h, w) label grid, got {mask.shape}")
    if mask.size and (mask.min() < 0 or mask.max() >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes}), found {mask.min()}..{mask.max()}")
    dtype = np.dtype(dtype or get_default_dtype())
    out = (np.arange(num_classes)[:, None, None] == mask[None]).astype(dtype)
    return Tensor(out[None])


@dataclass(frozen=True)
class ManifestRecord:
    image: Path
    mask: Path
    category: int
    split: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    categories: dict[int, CategoryInfo] = field(default_factory=lambda: dict(CATEGORY_TABLE))

    def split(self, name: str) -> list[ManifestRecord]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]


def load_manifest(path) -> DatasetManifest:
    """Parse an ``image,mask,category,split`` CSV; paths resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    records = []
    seen = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise DataError(f"{path}:1: header must be {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            image, mask, cat, split = (cell.strip() for cell in row)
            try:
                category = int(cat)
            except ValueError:
                raise DataError(f"{path}:{lineno}: category {cat!r} is not an integer") from None
            if category not in CATEGORY_TABLE:
                raise DataError(f"{path}:{lineno}: category {category} outside 1..10")
            if split not in SPLITS:
                raise DataError(f"{path}:{lineno}: split {split!r} not one of {SPLITS}")
            if not image or not mask:
                raise DataError(f"{path}:{lineno}: empty image or mask path")
            if image in seen:
                raise DataError(f"{path}:{lineno}: duplicate image path {image}")
            seen.add(image)
            records.append(ManifestRecord(root / image, root / mask, category, split))
    return DatasetManifest(records)


def write_manifest(path, records: Sequence[tuple[str, str, int, str]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        w.writerows(records)


@dataclass
class SplitReport:
    counts: dict[str, int]
    ratios: dict[str, float]
    flagged: list[str]

    @property
    def ok(self) -> bool:
        return not self.flagged


def split_check(m: DatasetManifest, tolerance: float = 0.02) -> SplitReport:
    """Compare split proportions against 60:10:30, flagging deviations beyond ``tolerance``."""
    total = len(m.records)
    counts = {s: sum(1 for r in m.records if r.split == s) for s in SPLITS}
    ratios = {s: (counts[s] / total if total else 0.0) for s in SPLITS}
    flagged = [s for s in SPLITS if abs(ratios[s] - TARGET_RATIOS[s]) > tolerance]
    return SplitReport(counts, ratios, flagged)
