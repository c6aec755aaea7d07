"""Losses, the mIoU metric, dataset splitting and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import ops
from .errors import ConfigError, DataError, NumericalError, ShapeError, UsageError
from .optim import make_optimizer
from .tensor import Tape, Tensor, make_result

logger = logging.getLogger(__name__)

LOSSES = ("cross_entropy", "dice", "ce_plus_dice")
SCHEDULES = ("constant", "cosine")
LOSS_ALIASES = {"ce": "cross_entropy", "cross_entropy": "cross_entropy", "dice": "dice",
                "ce_plus_dice": "ce_plus_dice", "ce+dice": "ce_plus_dice"}
DICE_SMOOTH = 1.0


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-4
    batch_size: int = 2
    split_ratio: Tuple[int, int] = (4, 1)
    seed: int = 0
    loss: str = "cross_entropy"
    optimizer: str = "adam"
    input_size: int = 512
    variant: str = "baseline"
    schedule: str = "constant"

    def __post_init__(self):
        self.loss = LOSS_ALIASES.get(self.loss, self.loss)
        self.validate()

    def validate(self) -> None:
        if int(self.epochs) < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ConfigError(f"learning rate must be finite and >= 0, got {self.lr}")
        if int(self.batch_size) < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        a, b = self.split_ratio
        if a < 1 or b < 1:
            raise ConfigError(f"split ratio parts must be positive, got {self.split_ratio}")


def epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for a 1-based epoch. Cosine decays from lr towards 0."""
    if cfg.schedule == "cosine":
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / cfg.epochs))
    return cfg.lr


@dataclass(frozen=True)
class MetricRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_miou: float


@dataclass(frozen=True)
class SplitIndices:
    train: List[int]
    val: List[int]


# losses -----------------------------------------------------------------------


def _check_target(logits: Tensor, target: np.ndarray, op: str) -> np.ndarray:
    if logits.ndim != 4:
        raise ShapeError(op, f"logits must be [N, K, H, W], got {logits.shape}")
    t = np.asarray(target)
    n, k, h, w = logits.shape
    if t.shape != (n, h, w):
        raise ShapeError(op, f"target shape {t.shape} does not match logits {logits.shape}")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise DataError(f"{op}: target values must lie in [0, {k - 1}], got range [{t.min()}, {t.max()}]")
    return t.astype(np.intp)


def cross_entropy_loss(logits: Tensor, target) -> Tensor:
    """Mean over pixels of ``-log softmax(logits)[true class]``."""
    t = _check_target(logits, target, "cross_entropy_loss")
    x = logits.data
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, t[:, None], axis=1)
    count = t.size
    loss = np.asarray(-picked.sum() / count, dtype=x.dtype)

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, t[:, None], np.take_along_axis(grad, t[:, None], axis=1) - 1, axis=1)
        return (grad * (g / count),)

    return make_result("cross_entropy_loss", loss, (logits,), backward)


def dice_loss(probs: Tensor, target, smooth: float = DICE_SMOOTH) -> Tensor:
    """Soft Dice loss on the foreground channel (index 1), averaged over the batch.

    Per sample: ``1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)``.
    """
    t = _check_target(probs, target, "dice_loss").astype(probs.dtype)
    p = probs.data[:, 1]
    n = p.shape[0]
    inter = (p * t).sum(axis=(1, 2))
    denom = p.sum(axis=(1, 2)) + t.sum(axis=(1, 2)) + smooth
    numer = 2 * inter + smooth
    loss = np.asarray(np.mean(1.0 - numer / denom), dtype=probs.dtype)

    def backward(g):
        d = -(2 * t * denom[:, None, None] - numer[:, None, None]) / (denom[:, None, None] ** 2)
        grad = np.zeros_like(probs.data)
        grad[:, 1] = d * (g / n)
        return (grad,)

    return make_result("dice_loss", loss, (probs,), backward)


def compute_loss(logits: Tensor, target, kind: str = "cross_entropy") -> Tensor:
    kind = LOSS_ALIASES.get(kind, kind)
    if kind == "cross_entropy":
        return cross_entropy_loss(logits, target)
    if kind == "dice":
        return dice_loss(ops.softmax_channels(logits), target)
    if kind == "ce_plus_dice":
        return cross_entropy_loss(logits, target) + dice_loss(ops.softmax_channels(logits), target)
    raise ConfigError(f"unknown loss {kind!r}")


# metric -----------------------------------------------------------------------


def miou(pred, target, classes: int = 2) -> float:
    """Mean per-class IoU; a class absent from both maps scores 1."""
    p = np.asarray(pred)
    t = np.asarray(target)
    if p.shape != t.shape:
        raise UsageError(f"miou: prediction shape {p.shape} != target shape {t.shape}")
    ious = []
    for c in range(classes):
        pc, tc = p == c, t == c
        union = np.count_nonzero(pc | tc)
        ious.append(1.0 if union == 0 else np.count_nonzero(pc & tc) / union)
    return float(np.mean(ious))


def predict_labels(logits: np.ndarray) -> np.ndarray:
    """Argmax over the class axis; ties go to the lower class index."""
    return np.argmax(logits, axis=1).astype(np.uint8)


# splitting --------------------------------------------------------------------


def split_dataset(n: int, seed: int = 0, ratio: Tuple[int, int] = (4, 1)) -> SplitIndices:
    """Seeded shuffle; the first ``ceil(n * a / (a + b))`` indices train, the rest validate."""
    a, b = ratio
    if n < a + b:
        raise ConfigError(f"need at least {a + b} samples for a {a}:{b} split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = -(-n * a // (a + b))
    return SplitIndices(train=sorted(order[:n_train].tolist()), val=sorted(order[n_train:].tolist()))


# train / evaluate ---------------------------------------------------------------


def _as_batch(images: np.ndarray) -> np.ndarray:
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4:
        raise UsageError(f"images must be (n, H, W) or (n, 1, H, W), got shape {x.shape}")
    if x.dtype == np.uint8:
        return x.astype(np.float32) / 255.0
    return x.astype(np.float32, copy=False)


def evaluate(model, images, masks, loss: str = "cross_entropy", batch_size: int = 2) -> Tuple[float, float]:
    """Mean loss and mean per-sample mIoU; never touches the parameters.

    ``model`` is anything callable on a ``[N, 1, S, S]`` tensor returning
    class logits.
    """
    x = _as_batch(images)
    y = np.asarray(masks)
    n = len(x)
    if n == 0:
        raise UsageError("evaluate needs at least one sample")
    if len(y) != n:
        raise UsageError(f"{n} images but {len(y)} masks")
    total_loss = 0.0
    scores = []
    for start in range(0, n, batch_size):
        xb = Tensor(x[start:start + batch_size])
        yb = y[start:start + batch_size]
        logits = model(xb)
        total_loss += compute_loss(logits, yb, loss).item() * len(yb)
        pred = predict_labels(logits.data)
        scores.extend(miou(p, t) for p, t in zip(pred, yb))
    return total_loss / n, float(np.mean(scores))


def train(model, images, masks, cfg: TrainConfig,
          on_epoch: Optional[Callable[[MetricRecord], None]] = None,
          split: Optional[SplitIndices] = None):
    """Run the full protocol: split, then per epoch shuffle, fit, validate.

    Returns ``(model, records)`` with one :class:`MetricRecord` per epoch.
    Raises :class:`NumericalError` on a non-finite loss, naming the epoch and
    batch.
    """
    cfg.validate()
    x = _as_batch(images)
    y = np.asarray(masks)
    if len(x) == 0:
        raise UsageError("training set is empty")
    if len(y) != len(x):
        raise UsageError(f"{len(x)} images but {len(y)} masks")
    if split is None:
        split = split_dataset(len(x), cfg.seed, cfg.split_ratio)
    tr = np.asarray(split.train)
    xv, yv = x[split.val], y[split.val]

    params = model.parameters()
    opt = make_optimizer(cfg.optimizer, params, cfg.lr)
    records = []
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = epoch_lr(cfg, epoch)
        order = tr[np.random.default_rng([cfg.seed, epoch]).permutation(len(tr))]
        running = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            model.zero_grad()
            with Tape() as tape:
                loss = compute_loss(model(Tensor(x[idx])), y[idx], cfg.loss)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            tape.backward(loss)
            opt.step()
            running += value * len(idx)
        if len(split.val):
            val_loss, val_miou = evaluate(model, xv, yv, cfg.loss, cfg.batch_size)
        else:
            val_loss, val_miou = float("nan"), float("nan")
        rec = MetricRecord(epoch, running / len(order), val_loss, val_miou)
        logger.debug("epoch %d: %s", epoch, rec)
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return model, records
