"""Image-level inference by tiling and dataset metrics (MAE / RMSE)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import CrowdDataset, tile_image, triplet_batch
from .network import MRFNet, combine_counts
from .tensor import no_grad


@dataclass
class Metrics:
    mae: float
    rmse: float
    images: int


@dataclass
class ImagePrediction:
    image_id: str
    patch_counts: list  # [(origin, count), ...]
    total: float


def compute_metrics(ground_truth: Sequence[float],
                    predictions: Sequence[float]) -> Metrics:
    gt = np.asarray(ground_truth, dtype=np.float64)
    pred = np.asarray(predictions, dtype=np.float64)
    if gt.size == 0:
        raise ValueError("metrics over an empty test set")
    if gt.shape != pred.shape:
        raise ValueError(f"{gt.size} ground truths vs {pred.size} predictions")
    diff = gt - pred
    return Metrics(mae=float(np.abs(diff).mean()),
                   rmse=float(np.sqrt((diff ** 2).mean())),
                   images=int(gt.size))


def predict_image(model: MRFNet, image: np.ndarray, image_id: str = "",
                  batch_size: int = 16) -> ImagePrediction:
    """Tile, run each patch through the network, clamp and sum.

    Per-patch counts are the weighted head combination clamped at zero;
    the image estimate is their sum.
    """
    patches = tile_image(image, None, model.config.patch_side)
    counts = []
    model.eval()
    with no_grad():
        for lo in range(0, len(patches), batch_size):
            chunk = patches[lo:lo + batch_size]
            i1, i2, i3, _ = triplet_batch(chunk)
            outputs = model.forward(i1, i2, i3)
            combined = np.maximum(
                combine_counts(outputs, model.head_weights()), 0.0)
            counts.extend(float(c) for c in combined)
    pairs = [(p.origin, c) for p, c in zip(patches, counts)]
    return ImagePrediction(image_id=image_id, patch_counts=pairs,
                           total=float(sum(counts)))


def evaluate(model: MRFNet, dataset: CrowdDataset, batch_size: int = 16):
    """Dataset MAE/RMSE; returns (Metrics, per-image rows)."""
    if len(dataset) == 0:
        raise ValueError("evaluate on an empty test set")
    rows = []
    for ann, image in zip(dataset.annotations, dataset.images):
        pred = predict_image(model, image, ann.image_id, batch_size)
        rows.append((ann.image_id, float(ann.count), pred.total))
    metrics = compute_metrics([r[1] for r in rows], [r[2] for r in rows])
    return metrics, rows


def write_prediction_dump(path, rows, metrics: Metrics):
    """One line per image: id, ground truth, prediction, absolute error."""
    lines = [f"{img}\t{gt:g}\t{pred:.6f}\t{abs(gt - pred):.6f}"
             for img, gt, pred in rows]
    lines.append(f"MAE\t{metrics.mae:.6f}\tRMSE\t{metrics.rmse:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")
