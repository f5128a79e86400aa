"""Losses, the Nesterov-momentum SGD optimizer, the multi-step learning-rate
schedule, the image-level validation split, and the epoch loop.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import (CrowdDataset, sample_training_patches, tile_image,
                   triplet_batch)
from .network import MRFNet, combine_counts
from .tensor import Tensor, no_grad, reduce_sum


def mse_loss(predictions: Tensor, targets) -> Tensor:
    """Mean squared error between a (N,) prediction tensor and targets."""
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    n = predictions.data.size
    if n == 0:
        raise ValueError("mse_loss on empty predictions")
    if t.size != n:
        raise ValueError(
            f"mse_loss: {n} predictions vs {t.size} targets")
    diff = predictions - Tensor(t.reshape(predictions.shape),
                                dtype=predictions.dtype)
    return (diff * diff).sum() * (1.0 / n)


def total_loss(l1, l2, l3, l_final, weights) -> Tensor:
    """Weighted accumulation of the four head losses.

    Disabled auxiliary heads pass plain zeros; any mix of scalars and
    tensors is accepted as long as the final-head loss is a tensor.
    """
    w, x, y, z = (float(v) for v in weights)
    out = l_final * z
    for loss, weight in ((l1, w), (l2, x), (l3, y)):
        if isinstance(loss, Tensor):
            out = out + loss * weight
        elif loss:
            out = out + float(loss) * weight
    return out


@dataclass
class LrSchedule:
    initial: float = 0.001
    halve_every: int = 25
    total_epochs: int = 100


def lr_at_epoch(epoch: int, schedule: LrSchedule) -> float:
    if not (0 <= epoch < schedule.total_epochs):
        raise ValueError(
            f"epoch {epoch} outside [0, {schedule.total_epochs})")
    return schedule.initial * 0.5 ** (epoch // schedule.halve_every)


class SGDNesterov:
    """SGD with Nesterov momentum and decoupled-from-nothing weight decay.

    Update per parameter: g = grad + wd * p; v = mu * v + g;
    p -= lr * (g + mu * v).  Velocities persist across steps.
    """

    def __init__(self, named_params, lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0001):
        self.params = [(name, p) for name, p in named_params]
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        mu, wd, lr = self.momentum, self.weight_decay, self.lr
        for name, p in self.params:
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient; "
                                 "run backward before stepping")
            g = p.grad + wd * p.data if wd else p.grad
            v = self.velocity[name]
            v *= mu
            v += g
            p.data -= (lr * (g + mu * v)).astype(p.data.dtype, copy=False)

    def named_velocities(self):
        for name, _ in self.params:
            yield name, self.velocity[name]


def split_validation(items: Sequence, fraction: float, seed: int):
    """Split source images (not patches) into train/validation index lists."""
    n = len(items)
    if n < 2:
        raise ValueError(f"need at least 2 source images to split, got {n}")
    if not (0 < fraction < 1):
        raise ValueError(f"fraction must be in (0,1), got {fraction}")
    order = np.random.default_rng(seed).permutation(n)
    n_val = min(n - 1, max(1, int(round(n * fraction))))
    val = sorted(int(i) for i in order[:n_val])
    train = sorted(int(i) for i in order[n_val:])
    return train, val


# -- the epoch loop ---------------------------------------------------------------


def _head_losses(outputs, counts, weights, aux_enabled: bool):
    lf = mse_loss(outputs.final, counts)
    if aux_enabled:
        l1 = mse_loss(outputs.aux1, counts)
        l2 = mse_loss(outputs.aux2, counts)
        l3 = mse_loss(outputs.aux3, counts)
    else:
        l1 = l2 = l3 = 0.0
    return total_loss(l1, l2, l3, lf, weights)


def _batch_abs_errors(outputs, counts, weights) -> np.ndarray:
    reported = np.maximum(combine_counts(outputs, weights), 0.0)
    return np.abs(reported - counts)


def evaluate_patches(model: MRFNet, samples, batch_size: int):
    """Patch-level MAE/RMSE in inference mode."""
    errors = []
    model.eval()
    with no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            i1, i2, i3, counts = triplet_batch(chunk)
            outputs = model.forward(i1, i2, i3)
            errors.append(_batch_abs_errors(outputs, counts,
                                            model.head_weights()))
    err = np.concatenate(errors)
    return float(err.mean()), float(np.sqrt((err ** 2).mean()))


def format_log_line(epoch, lr, train_loss, train_mae, val_mae, val_rmse,
                    elapsed) -> str:
    return "\t".join([str(epoch), f"{lr:.8g}", f"{train_loss:.8g}",
                      f"{train_mae:.8g}", f"{val_mae:.8g}", f"{val_rmse:.8g}",
                      f"{elapsed:.3f}"])


def train(run: RunConfig, dataset: CrowdDataset, out_dir) -> dict:
    """Run the full training loop; returns checkpoint paths and history.

    Writes ``train.log`` (one tab-separated line per epoch: epoch, lr,
    train loss, train MAE, validation MAE, validation RMSE, elapsed
    seconds), ``best.ckpt`` (lowest validation MAE) and ``final.ckpt``.
    """
    run.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(run.seed).spawn(3)
    sample_seed = int(seeds[1].generate_state(1)[0])
    order_rng = np.random.default_rng(seeds[2])

    train_idx, val_idx = split_validation(dataset.annotations,
                                          run.val_fraction, run.seed)
    train_set = CrowdDataset([dataset.annotations[i] for i in train_idx],
                             [dataset.images[i] for i in train_idx],
                             dataset.root)
    patch = run.model.patch_side
    train_samples = sample_training_patches(
        train_set, run.train_patches, sample_seed, patch_side=patch,
        augment=run.augment_flip)
    val_samples = []
    for i in val_idx:
        val_samples.extend(tile_image(dataset.images[i],
                                      dataset.annotations[i], patch))

    dtype = np.float64 if run.precision == "f64" else np.float32
    model = MRFNet(run.model, dtype=dtype, seed=run.seed)
    optimizer = SGDNesterov(model.named_parameters(), run.lr,
                            run.momentum, run.weight_decay)
    schedule = LrSchedule(run.lr, run.lr_halve_every, run.epochs)
    weights = run.model.count_weights
    aux = run.model.use_auxiliary_heads

    log_path = out_dir / "train.log"
    best_path = out_dir / "best.ckpt"
    final_path = out_dir / "final.ckpt"
    history = []
    best_val = np.inf

    with open(log_path, "w") as log:
        for epoch in range(run.epochs):
            t0 = time.monotonic()
            lr = lr_at_epoch(epoch, schedule)
            optimizer.lr = lr
            model.train()
            order = order_rng.permutation(len(train_samples))
            losses, abs_errors = [], []
            for lo in range(0, len(order), run.batch_size):
                rows = order[lo:lo + run.batch_size]
                if len(rows) < 2:
                    continue  # batch norm needs more than one value
                chunk = [train_samples[i] for i in rows]
                i1, i2, i3, counts = triplet_batch(chunk)
                outputs = model.forward(i1, i2, i3)
                loss = _head_losses(outputs, counts, weights, aux)
                if not np.isfinite(loss.item()):
                    raise RuntimeError(
                        f"non-finite loss {loss.item()} at epoch {epoch}, "
                        f"batch starting at sample {lo}")
                model.zero_grad()
                loss.backward()
                optimizer.step()
                losses.append(loss.item())
                abs_errors.append(_batch_abs_errors(outputs, counts, weights))

            err = np.concatenate(abs_errors)
            train_loss = float(np.mean(losses))
            train_mae = float(err.mean())
            val_mae, val_rmse = evaluate_patches(model, val_samples,
                                                 run.batch_size)
            line = format_log_line(epoch, lr, train_loss, train_mae, val_mae,
                                   val_rmse, time.monotonic() - t0)
            print(line, file=log, flush=True)
            print(line, flush=True)
            history.append({"epoch": epoch, "lr": lr, "train_loss": train_loss,
                            "train_mae": train_mae, "val_mae": val_mae,
                            "val_rmse": val_rmse})
            if val_mae < best_val:
                best_val = val_mae
                save_checkpoint(model, best_path, epoch=epoch,
                                optimizer=optimizer)

    save_checkpoint(model, final_path, epoch=run.epochs - 1, optimizer=optimizer)
    if not best_path.exists():
        save_checkpoint(model, best_path, epoch=run.epochs - 1,
                        optimizer=optimizer)
    return {"best": best_path, "final": final_path, "log": log_path,
            "history": history, "model": model}
