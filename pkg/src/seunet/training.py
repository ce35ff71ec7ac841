"""Loss, scale-jitter augmentation and the training loop."""
from __future__ import annotations

import copy
import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .lifting import plane_rescale
from .models import Model, forward, predict_labels, save_weights
from .optim import ExponentialSchedule, OptimizerState, PlateauSchedule, adam_step
from .rng import make_rng
from .tensor import Tensor, _make, backward, no_grad

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-7


def cross_entropy_loss(pred: Tensor, target: np.ndarray, floor: float = PROB_FLOOR) -> Tensor:
    """Mean over pixels of ``-log max(pred[target], floor)``.

    ``pred`` holds probabilities ``(..., K)``, ``target`` integer classes ``(...)``.
    """
    p = pred.data
    t = np.asarray(target)
    k = p.shape[-1]
    if t.shape != p.shape[:-1]:
        raise ValueError(f"target extents {t.shape} do not match predictions {p.shape[:-1]}")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ValueError(f"target classes must lie in [0, {k})")
    idx = t[..., None].astype(np.intp)
    picked = np.take_along_axis(p, idx, axis=-1)
    clipped = np.maximum(picked, floor)
    n = t.size
    value = -np.log(clipped.astype(np.float64)).sum() / n

    def bw(g):
        gp = np.zeros_like(p)
        live = picked > floor
        np.put_along_axis(gp, idx, np.where(live, -g / (n * clipped), 0.0).astype(p.dtype), axis=-1)
        return (gp,)

    return _make(np.asarray(value, dtype=p.dtype), (pred,), bw)


# ---------------------------------------------------------------- augmentation


def draw_jitter_scale(r: float, rng: np.random.Generator) -> float:
    """Log-uniform factor on ``[1/r, r]``."""
    if r < 1:
        raise ValueError("jitter range must be >= 1")
    if r == 1:
        return 1.0
    return float(math.exp(rng.uniform(-math.log(r), math.log(r))))


def _fit_axis(n_new: int, n: int, rng):
    """(crop start, pad before, pad after) bringing ``n_new`` back to ``n``."""
    if n_new >= n:
        return int(rng.integers(0, n_new - n + 1)), 0, 0
    before = int(rng.integers(0, n - n_new + 1))
    return 0, before, n - n_new - before


def scale_jitter(image: np.ndarray, mask: np.ndarray, r: float, rng: np.random.Generator, background: int = 0):
    """Rescale by a random ``alpha`` then crop or pad back to the input extents.

    The image is resampled bilinearly and padded by edge replication; the mask
    is resampled by nearest neighbour and padded with ``background``.
    """
    alpha = draw_jitter_scale(r, rng)
    h, w = mask.shape
    if alpha == 1.0:
        return image.copy(), mask.copy()
    im = plane_rescale(image, alpha, "bilinear")
    m = plane_rescale(mask[..., None], alpha, "nearest")[..., 0]
    cy, py0, py1 = _fit_axis(m.shape[0], h, rng)
    cx, px0, px1 = _fit_axis(m.shape[1], w, rng)
    hh, ww = min(h, m.shape[0]), min(w, m.shape[1])
    im = im[cy : cy + hh, cx : cx + ww]
    m = m[cy : cy + hh, cx : cx + ww]
    if py0 or py1 or px0 or px1:
        im = np.pad(im, ((py0, py1), (px0, px1), (0, 0)), mode="edge")
        m = np.pad(m, ((py0, py1), (px0, px1)), constant_values=background)
    return im.astype(image.dtype, copy=False), m.astype(mask.dtype, copy=False)


# ---------------------------------------------------------------- training loop


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    schedule: str = "plateau"  # or "exponential"
    weight_decay: float = 0.0
    decay_period: int = 100
    jitter: float = 1.0
    seed: int = 0

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch size >= 1")
        if self.schedule not in ("plateau", "exponential"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")
        if self.jitter < 1:
            raise ValueError("jitter range must be >= 1")
        return self


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_miou: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    best_epoch: int = -1
    weight_path: str | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["epoch", "loss", "val_loss", "val_miou", "lr"])
        for row in zip(self.epochs, self.loss, self.val_loss, self.val_miou, self.lr):
            wr.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()


def _make_schedule(cfg: TrainConfig):
    if cfg.schedule == "plateau":
        return PlateauSchedule.for_epochs(max(cfg.epochs, 1), lr=cfg.lr)
    return ExponentialSchedule(cfg.lr, cfg.weight_decay, cfg.decay_period)


def evaluate_loss_miou(model: Model, ds: Dataset, batch_size: int = 8):
    from .evaluation import mean_iou

    x, y = ds.arrays()
    losses, ious = [], []
    for i in range(0, len(ds), batch_size):
        with no_grad():
            p = forward(model, x[i : i + batch_size])
        losses.append(float(cross_entropy_loss(p, y[i : i + batch_size]).data) * len(p.data))
        pred = p.data.argmax(axis=-1)
        ious.extend(mean_iou(a, b, model.config.num_classes) for a, b in zip(pred, y[i : i + batch_size]))
    return sum(losses) / len(ds), float(np.mean(ious))


def _batch(ds_x, ds_y, idx, jitter, epoch, seed):
    xb, yb = ds_x[idx], ds_y[idx]
    if jitter > 1:
        xb, yb = xb.copy(), yb.copy()
        for j, i in enumerate(idx):
            # keyed by (epoch, sample) so augmentation is independent of batch order
            xb[j], yb[j] = scale_jitter(ds_x[i], ds_y[i], jitter, make_rng(seed, "jitter", epoch, int(i)))
    return xb, yb


def train(model: Model, train_set: Dataset, val_set: Dataset, cfg: TrainConfig, weight_path=None,
          progress=None) -> TrainReport:
    """Mini-batch Adam(W) with best-validation checkpointing.

    The model ends holding the best-validation weights. All randomness derives
    from ``cfg.seed``; ``progress`` (if given) is called with each epoch row.
    """
    cfg.validate()
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    report = TrainReport(weight_path=str(weight_path) if weight_path is not None else None)
    if cfg.epochs == 0:
        if weight_path is not None:
            save_weights(model, weight_path)
        return report

    sched = _make_schedule(cfg)
    opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    x_all, y_all = train_set.arrays()
    best = (math.inf, None)
    shuffle_rng = make_rng(cfg.seed, "shuffle")
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(train_set))
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            xb, yb = _batch(x_all, y_all, idx, cfg.jitter, epoch, cfg.seed)
            model.zero_grad()
            drop_rng = make_rng(cfg.seed, "dropout", epoch, b)
            loss = cross_entropy_loss(forward(model, xb, training=True, rng=drop_rng), yb)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            backward(loss)
            gmax = max(float(np.abs(p.grad).max()) if p.grad is not None else 0.0 for p in model.params.values())
            if not math.isfinite(gmax):
                raise TrainingDiverged(f"non-finite gradient at epoch {epoch}, batch {b} (max |grad| {gmax})")
            adam_step(model.params, opt)
            total += value * len(idx)
            count += len(idx)
        val_loss, val_miou = evaluate_loss_miou(model, val_set, cfg.batch_size)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        report.epochs.append(epoch)
        report.loss.append(total / count)
        report.val_loss.append(val_loss)
        report.val_miou.append(val_miou)
        report.lr.append(opt.lr)
        if val_loss < best[0]:
            best = (val_loss, copy.deepcopy((model.state_arrays(), model.norms)))
            report.best_epoch = epoch
        opt.lr = sched.step(val_loss)
        if isinstance(sched, ExponentialSchedule):
            opt.weight_decay = sched.weight_decay
        report.wall_clock.append(time.perf_counter() - t0)
        if progress is not None:
            progress(epoch, report)
    _restore_state(model, *best[1])
    if weight_path is not None:
        save_weights(model, weight_path)
    return report


def _restore_state(model: Model, arrays: dict, norms: dict):
    for name, arr in arrays.items():
        if name in model.params:
            model.params[name].data = arr.copy()
    model.norms = norms


def predict(model: Model, images: np.ndarray) -> np.ndarray:
    return predict_labels(model, images)
