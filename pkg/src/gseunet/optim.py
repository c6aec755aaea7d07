"""First-order optimizers operating in place on named parameter tensors."""
from __future__ import annotations

from typing import Mapping, Optional

import numpy as np

from .errors import ConfigError, NumericalError, UsageError
from .tensor import Tensor


def _gather_grads(params: Mapping[str, Tensor], grads: Optional[Mapping[str, np.ndarray]]) -> dict:
    out = {}
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise UsageError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        out[name] = g
    bad = [name for name, g in out.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NumericalError(f"non-finite gradient in {', '.join(bad)}; step aborted")
    return out


def adam_step(params: Mapping[str, Tensor], grads: Optional[Mapping[str, np.ndarray]],
              m: Mapping[str, np.ndarray], v: Mapping[str, np.ndarray], t: int,
              lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update.

    ``m`` and ``v`` are the first/second moment buffers (updated in place);
    ``grads`` defaults to each parameter's ``.grad``. Nothing is modified if
    any gradient is non-finite.
    """
    if t < 1:
        raise UsageError(f"Adam step count must be >= 1, got {t}")
    g_all = _gather_grads(params, grads)
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = g_all[name]
        mb, vb = m[name], v[name]
        mb *= beta1
        mb += (1.0 - beta1) * g
        vb *= beta2
        vb += (1.0 - beta2) * (g * g)
        m_hat = mb / c1
        v_hat = vb / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)


class Adam:
    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        if lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {lr}")
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: Optional[Mapping[str, np.ndarray]] = None) -> None:
        t = self.t + 1
        adam_step(self.params, grads, self.m, self.v, t, self.lr, *self.betas, eps=self.eps)
        self.t = t


class SGD:
    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4):
        if lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {lr}")
        self.params = params
        self.lr = lr

    def step(self, grads: Optional[Mapping[str, np.ndarray]] = None) -> None:
        for name, g in _gather_grads(self.params, grads).items():
            p = self.params[name]
            p.data -= (self.lr * g).astype(p.dtype, copy=False)


def make_optimizer(name: str, params: Mapping[str, Tensor], lr: float):
    if name == "adam":
        return Adam(params, lr=lr)
    if name == "sgd":
        return SGD(params, lr=lr)
    raise ConfigError(f"unknown optimizer {name!r} (expected 'adam' or 'sgd')")
