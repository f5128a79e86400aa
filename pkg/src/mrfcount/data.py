"""Annotation ingestion, tiling, input-prior generation, augmentation,
patch sampling, and the synthetic blob dataset used for desk-scale checks.

Annotation files are plain text, one image per line:

    <image-path>\t<width>\t<height>\t<x1>,<y1>;<x2>,<y2>;...

with an empty point field for zero-crowd images.  Image paths are resolved
relative to the annotation file.  Head points live in half-open pixel
bounds [0, width) x [0, height), and patch membership uses half-open
rectangles so that tiling conserves counts exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

DEFAULT_PATCH = 128


@dataclass
class Annotation:
    image_id: str
    width: int
    height: int
    points: np.ndarray  # (K, 2) float64 head positions, x then y

    @property
    def count(self) -> int:
        return len(self.points)


@dataclass
class PatchSample:
    pixels: np.ndarray  # (3, S, S) float32 in [0, 1]
    count: int
    image_id: str
    origin: tuple

    @property
    def side(self) -> int:
        return self.pixels.shape[1]


@dataclass
class PatchTriplet:
    i1: np.ndarray  # (3, 2S, 2S)
    i2: np.ndarray  # (3, S, S)
    i3: np.ndarray  # (3, S/2, S/2)
    count: int


# -- annotation I/O -----------------------------------------------------------


def _parse_points(field: str, lineno: int) -> np.ndarray:
    if not field:
        return np.zeros((0, 2), dtype=np.float64)
    pts = []
    for token in field.split(";"):
        xy = token.split(",")
        if len(xy) != 2:
            raise ValueError(
                f"line {lineno}: malformed point {token!r} (expected x,y)")
        try:
            pts.append((float(xy[0]), float(xy[1])))
        except ValueError:
            raise ValueError(f"line {lineno}: non-numeric point {token!r}") from None
    return np.asarray(pts, dtype=np.float64)


def load_annotations(path, check_images: bool = True) -> list[Annotation]:
    path = Path(path)
    root = path.parent
    annotations = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 4:
            raise ValueError(
                f"line {lineno}: expected 4 tab-separated fields, got {len(parts)}")
        image_id, ws, hs, point_field = parts
        try:
            width, height = int(ws), int(hs)
        except ValueError:
            raise ValueError(
                f"line {lineno}: non-integer image extents {ws!r} x {hs!r}") from None
        if width < 1 or height < 1:
            raise ValueError(f"line {lineno}: non-positive extents {width}x{height}")
        points = _parse_points(point_field.strip(), lineno)
        for x, y in points:
            if not (0 <= x < width and 0 <= y < height):
                raise ValueError(
                    f"line {lineno}: point ({x}, {y}) outside [0, {width}) x "
                    f"[0, {height})")
        if check_images and not (root / image_id).is_file():
            raise FileNotFoundError(
                f"line {lineno}: image file not found: {root / image_id}")
        annotations.append(Annotation(image_id, width, height, points))
    return annotations


def save_annotations(path, annotations: Sequence[Annotation]):
    lines = []
    for ann in annotations:
        pts = ";".join(f"{float(x)!r},{float(y)!r}" for x, y in ann.points)
        lines.append(f"{ann.image_id}\t{ann.width}\t{ann.height}\t{pts}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        rgb = img.convert("RGB")
        return np.asarray(rgb, dtype=np.float32) / 255.0


class CrowdDataset:
    """Annotations plus their decoded images, held in memory."""

    def __init__(self, annotations: Sequence[Annotation], images: Sequence[np.ndarray],
                 root: str = "."):
        if len(annotations) != len(images):
            raise ValueError("one image per annotation required")
        self.annotations = list(annotations)
        self.images = list(images)
        self.root = str(root)

    def __len__(self):
        return len(self.annotations)


def load_dataset(annotation_path) -> CrowdDataset:
    annotation_path = Path(annotation_path)
    annotations = load_annotations(annotation_path)
    root = annotation_path.parent
    images = [load_image(root / ann.image_id) for ann in annotations]
    for ann, img in zip(annotations, images):
        if img.shape[:2] != (ann.height, ann.width):
            raise ValueError(
                f"{ann.image_id}: annotation says {ann.width}x{ann.height}, "
                f"file is {img.shape[1]}x{img.shape[0]}")
    return CrowdDataset(annotations, images, root)


# -- resizing -----------------------------------------------------------------


def _resize_coeffs(in_size: int, out_size: int):
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    base = np.floor(src)
    frac = src - base
    i0 = np.clip(base.astype(np.int64), 0, in_size - 1)
    i1 = np.clip(base.astype(np.int64) + 1, 0, in_size - 1)
    return i0, i1, frac


def bilinear_resize(chw: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centers bilinear resampling of a (C, H, W) array."""
    _, h, w = chw.shape
    r0, r1, rf = _resize_coeffs(h, out_h)
    c0, c1, cf = _resize_coeffs(w, out_w)
    rf = rf.reshape(1, out_h, 1).astype(chw.dtype)
    cf = cf.reshape(1, 1, out_w).astype(chw.dtype)
    rows = chw[:, r0, :] * (1 - rf) + chw[:, r1, :] * rf
    return rows[:, :, c0] * (1 - cf) + rows[:, :, c1] * cf


# -- tiling and priors ----------------------------------------------------------


def points_in_rect(points: np.ndarray, x0: float, y0: float,
                   side: float) -> int:
    if len(points) == 0:
        return 0
    inside = ((points[:, 0] >= x0) & (points[:, 0] < x0 + side)
              & (points[:, 1] >= y0) & (points[:, 1] < y0 + side))
    return int(inside.sum())


def tile_image(image: np.ndarray, annotation: Optional[Annotation] = None,
               patch_side: int = DEFAULT_PATCH) -> list[PatchSample]:
    """Zero-pad right/bottom to a multiple of the patch side, then tile.

    Padding never adds annotation points, so the per-patch counts always
    sum to the image's total count.
    """
    h, w = image.shape[:2]
    if h < 1 or w < 1:
        raise ValueError(f"empty image {w}x{h}")
    ph = (h + patch_side - 1) // patch_side * patch_side
    pw = (w + patch_side - 1) // patch_side * patch_side
    if (ph, pw) != (h, w):
        padded = np.zeros((ph, pw, 3), dtype=image.dtype)
        padded[:h, :w] = image
    else:
        padded = image
    points = annotation.points if annotation is not None else np.zeros((0, 2))
    image_id = annotation.image_id if annotation is not None else ""
    patches = []
    for y0 in range(0, ph, patch_side):
        for x0 in range(0, pw, patch_side):
            pix = padded[y0:y0 + patch_side, x0:x0 + patch_side]
            patches.append(PatchSample(
                pixels=np.ascontiguousarray(pix.transpose(2, 0, 1), dtype=np.float32),
                count=points_in_rect(points, x0, y0, patch_side),
                image_id=image_id,
                origin=(x0, y0)))
    return patches


def make_priors(sample: PatchSample) -> PatchTriplet:
    """Derive the 2x up-scaled and 2x down-scaled views of a patch."""
    s = sample.side
    return PatchTriplet(
        i1=bilinear_resize(sample.pixels, 2 * s, 2 * s),
        i2=sample.pixels,
        i3=bilinear_resize(sample.pixels, s // 2, s // 2),
        count=sample.count)


def horizontal_flip(sample: PatchSample) -> PatchSample:
    return replace(sample, pixels=np.ascontiguousarray(sample.pixels[:, :, ::-1]))


# -- training patch sampling ------------------------------------------------------


def sample_training_patches(dataset: CrowdDataset, n: int, seed: int,
                            patch_side: int = DEFAULT_PATCH,
                            scales: Sequence[float] = (2.0, 1.0, 0.5),
                            augment: bool = True) -> list[PatchSample]:
    """Draw ``n`` random crops (uniform over valid top-left corners).

    Crops are taken at the patch side scaled by one of ``scales`` (chosen
    uniformly among those that fit the image) and resized to the patch side,
    so a single network input size serves all source scales.  Horizontal
    flips then double the list.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        idx = int(rng.integers(0, len(dataset)))
        ann, img = dataset.annotations[idx], dataset.images[idx]
        h, w = img.shape[:2]
        fitting = [s for s in scales if round(patch_side * s) <= min(h, w)]
        if not fitting:
            fitting = [min(h, w) / patch_side]
        scale = fitting[int(rng.integers(0, len(fitting)))]
        src = int(round(patch_side * scale))
        x0 = int(rng.integers(0, w - src + 1))
        y0 = int(rng.integers(0, h - src + 1))
        crop = img[y0:y0 + src, x0:x0 + src].transpose(2, 0, 1).astype(np.float32)
        if src != patch_side:
            crop = bilinear_resize(crop, patch_side, patch_side)
        samples.append(PatchSample(
            pixels=np.ascontiguousarray(crop),
            count=points_in_rect(ann.points, x0, y0, src),
            image_id=ann.image_id,
            origin=(x0, y0)))
    if augment:
        samples.extend(horizontal_flip(s) for s in list(samples))
    return samples


def triplet_batch(samples: Sequence[PatchSample]):
    """Stack priors for a batch of patches; returns (i1, i2, i3, counts)."""
    triplets = [make_priors(s) for s in samples]
    i1 = np.stack([t.i1 for t in triplets])
    i2 = np.stack([t.i2 for t in triplets])
    i3 = np.stack([t.i3 for t in triplets])
    counts = np.asarray([t.count for t in triplets], dtype=np.float64)
    return i1, i2, i3, counts


# -- synthetic data ---------------------------------------------------------------


def synth_generate(n_images: int, extent, count_range, blob_radius: float,
                   seed: int):
    """Generate blob images with exactly known counts.

    Dark backgrounds with bright Gaussian blobs at uniformly random centers;
    the annotation points are the blob centers.  ``extent`` is a side length
    or a (width, height) pair; ``count_range`` is an inclusive (lo, hi) range.
    Fixed seeds reproduce the dataset bit for bit.
    """
    if isinstance(extent, (tuple, list)):
        width, height = int(extent[0]), int(extent[1])
    else:
        width = height = int(extent)
    lo, hi = int(count_range[0]), int(count_range[1])
    if lo < 0 or hi < lo:
        raise ValueError(f"bad count range ({lo}, {hi})")
    rng = np.random.default_rng(seed)
    sigma = max(blob_radius, 1.0) / 2.0
    win = max(int(np.ceil(3 * sigma)), 1)
    images, annotations = [], []
    for k in range(n_images):
        count = int(rng.integers(lo, hi + 1))
        canvas = np.full((height, width), 0.06, dtype=np.float32)
        canvas += rng.uniform(0.0, 0.02, size=canvas.shape).astype(np.float32)
        centers = np.column_stack([rng.uniform(0, width, count),
                                   rng.uniform(0, height, count)])
        for cx, cy in centers:
            peak = rng.uniform(0.75, 1.0)
            x_lo, x_hi = int(np.floor(cx)) - win, int(np.floor(cx)) + win + 1
            y_lo, y_hi = int(np.floor(cy)) - win, int(np.floor(cy)) + win + 1
            xs = np.arange(max(x_lo, 0), min(x_hi, width))
            ys = np.arange(max(y_lo, 0), min(y_hi, height))
            if len(xs) == 0 or len(ys) == 0:
                continue
            gx = np.exp(-0.5 * ((xs - cx) / sigma) ** 2)
            gy = np.exp(-0.5 * ((ys - cy) / sigma) ** 2)
            canvas[np.ix_(ys, xs)] += peak * np.outer(gy, gx).astype(np.float32)
        pixels = np.clip(canvas, 0.0, 1.0)
        rgb = np.repeat((np.rint(pixels * 255)).astype(np.uint8)[:, :, None], 3, axis=2)
        images.append(rgb)
        annotations.append(Annotation(
            image_id=f"images/img_{k:05d}.png", width=width, height=height,
            points=centers))
    return images, annotations


def write_synth_dataset(out_dir, images, annotations) -> Path:
    """Write PNGs plus the annotation file; returns the annotation path."""
    from PIL import Image

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    for img, ann in zip(images, annotations):
        Image.fromarray(img, mode="RGB").save(out_dir / ann.image_id)
    ann_path = out_dir / "annotations.tsv"
    save_annotations(ann_path, annotations)
    return ann_path


def dataset_from_arrays(images, annotations) -> CrowdDataset:
    """Wrap in-memory uint8 synth output as a dataset without touching disk."""
    floats = [img.astype(np.float32) / 255.0 for img in images]
    return CrowdDataset(annotations, floats)
