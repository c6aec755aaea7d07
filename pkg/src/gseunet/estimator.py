"""scikit-learn compatible wrappers.

``HistogramEqualizer`` is a stateless transformer and ``UNetSegmenter`` an
estimator whose ``X`` is a stack of gray images ``(n, H, W)`` and ``y`` a stack
of binary masks of the same shape, so both drop into ``Pipeline`` and
``clone``::

    pipe = make_pipeline(HistogramEqualizer(size=64),
                         UNetSegmenter(variant="improved", input_size=64, epochs=50))
    pipe.fit(images, masks)
    pipe.predict(images)
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .blocks import ModelConfig, build_model
from .errors import DataError, UsageError
from .preprocess import preprocess_image, preprocess_mask
from .tensor import Tensor
from .training import TrainConfig, evaluate, miou, predict_labels, train
from . import ops


def check_images(X, size=None) -> np.ndarray:
    """Validate a stack of gray images and return it as ``(n, H, W)``.

    ``uint8`` input is kept as is; float input must already lie in [0, 1].
    A single ``(H, W)`` image is promoted to a stack of one.
    """
    if isinstance(X, (list, tuple)):
        shapes = {np.shape(x) for x in X}
        if len(shapes) > 1:
            raise UsageError(f"all images must share one shape, got {sorted(shapes)}")
    a = np.asarray(X)
    if a.ndim == 2:
        a = a[None]
    if a.ndim == 4 and a.shape[1] == 1:
        a = a[:, 0]
    if a.ndim != 3:
        raise UsageError(f"expected images of shape (n, H, W), got {a.shape}")
    if a.shape[0] == 0:
        raise UsageError("got an empty image stack")
    if a.dtype != np.uint8:
        if not np.issubdtype(a.dtype, np.number):
            raise UsageError(f"images must be numeric, got dtype {a.dtype}")
        if not np.all(np.isfinite(a)):
            raise DataError("images contain NaN or Inf")
        if a.min() < 0 or a.max() > 1:
            raise DataError("float images must be scaled to [0, 1]; pass uint8 for raw pixels")
        a = a.astype(np.float32)
    if size is not None and a.shape[1:] != (size, size):
        raise DataError(f"images are {a.shape[2]}x{a.shape[1]}, expected {size}x{size}")
    return a


def check_masks(y, images: np.ndarray, classes: int = 2) -> np.ndarray:
    m = np.asarray(y)
    if m.ndim == 2:
        m = m[None]
    if m.shape != images.shape:
        raise UsageError(f"masks {m.shape} do not match images {images.shape}")
    if m.min() < 0 or m.max() >= classes or not np.all(m == np.round(m)):
        raise DataError(f"mask values must be class indices in [0, {classes - 1}]")
    return m.astype(np.uint8)


class HistogramEqualizer(TransformerMixin, BaseEstimator):
    """Gray conversion + histogram equalization (+ optional square resize).

    Parameters
    ----------
    size : int or None
        Side length of the output images; ``None`` keeps native resolution.
    equalize_first : bool
        Equalize before resizing (default) or after.
    """

    def __init__(self, size=None, equalize_first=True):
        self.size = size
        self.equalize_first = equalize_first

    def fit(self, X, y=None):
        self.n_images_seen_ = len(X)
        return self

    def transform(self, X):
        if isinstance(X, np.ndarray) and X.ndim == 2:
            X = X[None]
        return np.stack([preprocess_image(x, self.size, self.equalize_first) for x in X])


def resize_masks(y, size):
    """Binarize and resize a stack of raw masks to ``size`` (nearest neighbour)."""
    return np.stack([preprocess_mask(m, size) for m in y])


class UNetSegmenter(BaseEstimator):
    """Binary U-Net segmenter, baseline or GSConv+ECA ("improved") variant.

    ``fit`` holds out a seeded 20% validation split and records one
    :class:`~gseunet.training.MetricRecord` per epoch in ``history_``.
    """

    def __init__(self, variant="baseline", input_size=64, depth=4, base_channels=16, groups=4, eca_k=3,
                 shift=None, recombine="concatenate-project", epochs=50, lr=1e-4, batch_size=2,
                 loss="cross_entropy", optimizer="adam", seed=0):
        self.variant = variant
        self.input_size = input_size
        self.depth = depth
        self.base_channels = base_channels
        self.groups = groups
        self.eca_k = eca_k
        self.shift = shift
        self.recombine = recombine
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.loss = loss
        self.optimizer = optimizer
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        return ModelConfig(variant=self.variant, input_size=self.input_size, depth=self.depth,
                           base_channels=self.base_channels, groups=self.groups, eca_k=self.eca_k,
                           shift=self.shift, recombine=self.recombine)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr=self.lr, batch_size=self.batch_size, seed=self.seed,
                           loss=self.loss, optimizer=self.optimizer, input_size=self.input_size,
                           variant=self.variant)

    def fit(self, X, y):
        mcfg, tcfg = self._model_config(), self._train_config()
        images = check_images(X, self.input_size)
        masks = check_masks(y, images)
        model = build_model(mcfg, seed=self.seed)
        self.model_, self.history_ = train(model, images, masks, tcfg)
        self.n_parameters_ = model.n_parameters()
        return self

    def decision_function(self, X) -> np.ndarray:
        """Raw class logits ``(n, 2, H, W)``."""
        check_is_fitted(self, "model_")
        images = check_images(X, self.input_size)
        x = images.astype(np.float32) / 255.0 if images.dtype == np.uint8 else images
        out = []
        for start in range(0, len(x), self.batch_size):
            out.append(self.model_(Tensor(x[start:start + self.batch_size, None])).data)
        return np.concatenate(out)

    def predict_proba(self, X) -> np.ndarray:
        return ops.softmax_channels(Tensor(self.decision_function(X))).data

    def predict(self, X) -> np.ndarray:
        return predict_labels(self.decision_function(X))

    def score(self, X, y) -> float:
        """Mean per-image mIoU."""
        pred = self.predict(X)
        masks = check_masks(y, pred)
        return float(np.mean([miou(p, t) for p, t in zip(pred, masks)]))

    def evaluate(self, X, y):
        """``(mean loss, mean mIoU)`` under the training loss."""
        check_is_fitted(self, "model_")
        images = check_images(X, self.input_size)
        return evaluate(self.model_, images, check_masks(y, images), self.loss, self.batch_size)
