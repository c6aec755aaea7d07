"""Finite-difference verification of every differentiable operation.

Each check draws random small float64 inputs, reduces the op output to a
scalar with a fixed random projection, and compares the tape gradient with
central differences. The error reported per op is the worst case over trials
of ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-6)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import ops
from .blocks import EcaParams, GsconvParams, ModelConfig, build_model, eca_forward, gsconv_forward
from .tensor import Tape, Tensor, tensor_mean, tensor_sum
from .training import cross_entropy_loss, dice_loss, compute_loss

FD_EPS = 1e-3
DENOM_FLOOR = 1e-6
# a stencil that flips a relu/max-pool branch is retried with eps / 10, down to this
MIN_EPS = 1e-7


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    trials: int
    tol: float

    @property
    def ok(self) -> bool:
        return bool(self.max_rel_err <= self.tol)


def _scalarize(out: Tensor, proj: Optional[np.ndarray]) -> Tensor:
    if out.size == 1:
        return out if out.ndim == 0 else tensor_sum(out)
    return tensor_sum(out * Tensor(proj, dtype=np.float64))


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(analytic).max(initial=0)), float(np.abs(numeric).max(initial=0)), DENOM_FLOOR)
    return float(np.abs(analytic - numeric).max(initial=0) / scale)


def check_function(fn: Callable[[Sequence[Tensor]], Tensor], arrays: Sequence[np.ndarray],
                   rng: np.random.Generator, eps: float = FD_EPS) -> float:
    """Max relative error of d(proj . fn)/d(inputs) over every input element."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = fn([Tensor(a, dtype=np.float64) for a in arrays])
    proj = rng.standard_normal(probe.shape) if probe.size > 1 else None

    leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with Tape() as tape:
        loss = _scalarize(fn(leaves), proj)
    tape.backward(loss)

    def value(xs):
        with ops.record_branches() as branches:
            v = _scalarize(fn([Tensor(a, dtype=np.float64) for a in xs]), proj).item()
        return v, branches

    def same(b1, b2) -> bool:
        return len(b1) == len(b2) and all(np.array_equal(u, v) for u, v in zip(b1, b2))

    _, base = value(arrays)
    worst = 0.0
    for k, a in enumerate(arrays):
        numeric = np.zeros_like(a)
        flat = numeric.reshape(-1)
        for i in range(a.size):
            h = eps
            while True:
                plus = [x.copy() for x in arrays]
                minus = [x.copy() for x in arrays]
                plus[k].reshape(-1)[i] += h
                minus[k].reshape(-1)[i] -= h
                (vp, bp), (vm, bm) = value(plus), value(minus)
                if (same(bp, base) and same(bm, base)) or h / 10 < MIN_EPS:
                    break
                h /= 10
            flat[i] = (vp - vm) / (2 * h)
        worst = max(worst, relative_error(leaves[k].grad, numeric))
    return worst


# random input builders ----------------------------------------------------------


def _separated(rng, shape, gap: float = 0.05) -> np.ndarray:
    """Values whose pairwise gaps exceed ``gap`` so FD steps never cross a tie."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2) * gap * 3 + rng.uniform(-gap, gap, size=n)
    return vals.reshape(shape)


def _away_from_zero(rng, shape, margin: float = 0.05) -> np.ndarray:
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _case_conv2d(rng):
    g = int(rng.integers(1, 3))
    cin, cout = g * int(rng.integers(1, 3)), g * int(rng.integers(1, 3))
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2)) if k > 1 else 0
    ho = int(rng.integers(1, 3))
    h = max(stride * (ho - 1) + k - 2 * pad, 1)
    while (h + 2 * pad - k) % stride or h + 2 * pad < k:
        h += 1
    n = int(rng.integers(1, 3))
    arrays = [rng.standard_normal((n, cin, h, h)), rng.standard_normal((cout, cin // g, k, k)),
              rng.standard_normal(cout)]
    return arrays, lambda t: ops.conv2d(t[0], t[1], t[2], stride=stride, padding=pad, groups=g)


def _case_conv1d(rng):
    c = int(rng.integers(3, 9))
    k = int(rng.choice([1, 3]))
    shape = (c,) if rng.random() < 0.5 else (2, c)
    return [rng.standard_normal(shape), rng.standard_normal(k)], lambda t: ops.conv1d_channels(t[0], t[1])


def _case_maxpool(rng):
    shape = (1, int(rng.integers(1, 3)), 2, 2 * int(rng.integers(1, 3)))
    return [_separated(rng, shape)], lambda t: ops.max_pool2d(t[0])


def _case_tconv(rng):
    cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    h, w = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    arrays = [rng.standard_normal((1, cin, h, w)), rng.standard_normal((cin, cout, 2, 2)), rng.standard_normal(cout)]
    return arrays, lambda t: ops.transposed_conv2d(t[0], t[1], t[2])


def _case_concat(rng):
    h, w = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    a = rng.standard_normal((1, int(rng.integers(1, 3)), h, w))
    b = rng.standard_normal((1, int(rng.integers(1, 3)), h, w))
    return [a, b], lambda t: ops.concat_channels(t[0], t[1])


def _case_slice(rng):
    c = int(rng.integers(2, 5))
    start = int(rng.integers(0, c))
    stop = int(rng.integers(start + 1, c + 1))
    return [rng.standard_normal((1, c, 1, 2))], lambda t: ops.slice_channels(t[0], start, stop)


def _case_shift(rng):
    c = int(rng.integers(1, 5))
    s = int(rng.integers(0, 2 * c + 1))
    return [rng.standard_normal((1, c, 1, 2))], lambda t: ops.channel_shift(t[0], s)


def _small4d(rng):
    return rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 3)), 2))


def _case_relu(rng):
    return [_away_from_zero(rng, (int(rng.integers(2, 9)),))], lambda t: ops.relu(t[0])


def _case_sigmoid(rng):
    return [rng.standard_normal(int(rng.integers(2, 9))) * 2], lambda t: ops.sigmoid(t[0])


def _case_gap(rng):
    return [_small4d(rng)], lambda t: ops.global_avg_pool(t[0])


def _case_mulch(rng):
    x = _small4d(rng)
    return [x, rng.standard_normal(x.shape[:2])], lambda t: ops.mul_channelwise(t[0], t[1])


def _case_softmax(rng):
    return [rng.standard_normal((1, int(rng.integers(2, 4)), 1, 2))], lambda t: ops.softmax_channels(t[0])


def _case_logsoftmax(rng):
    return [rng.standard_normal((1, int(rng.integers(2, 4)), 1, 2))], lambda t: ops.log_softmax_channels(t[0])


def _case_add(rng):
    n = int(rng.integers(2, 9))
    return [rng.standard_normal(n), rng.standard_normal(n)], lambda t: t[0] + t[1]


def _case_mul(rng):
    n = int(rng.integers(2, 9))
    return [rng.standard_normal(n), rng.standard_normal(n)], lambda t: t[0] * t[1]


def _case_sum(rng):
    return [rng.standard_normal(int(rng.integers(2, 9)))], lambda t: tensor_sum(t[0])


def _case_mean(rng):
    return [rng.standard_normal(int(rng.integers(2, 9)))], lambda t: tensor_mean(t[0])


def _targets(rng, n, h, w):
    return rng.integers(0, 2, size=(n, h, w))


def _case_ce(rng):
    n, h, w = 1, int(rng.integers(1, 3)), 2
    tgt = _targets(rng, n, h, w)
    return [rng.standard_normal((n, 2, h, w))], lambda t: cross_entropy_loss(t[0], tgt)


def _case_dice(rng):
    n, h, w = int(rng.integers(1, 3)), int(rng.integers(1, 3)), 2
    tgt = _targets(rng, n, h, w)
    return [rng.uniform(0.05, 0.95, size=(n, 2, h, w))], lambda t: dice_loss(t[0], tgt)


def _case_ce_dice(rng):
    n, h, w = 1, 2, 2
    tgt = _targets(rng, n, h, w)
    return [rng.standard_normal((n, 2, h, w))], lambda t: compute_loss(t[0], tgt, "ce_plus_dice")


def _case_eca(rng):
    c = int(rng.integers(3, 6))
    x = rng.standard_normal((int(rng.integers(1, 3)), c, 2, 2))
    return [x, rng.standard_normal(3)], lambda t: eca_forward(t[0], EcaParams(t[1]))


def _gsconv_case(rng, recombine):
    g = int(rng.choice([1, 2]))
    cin, cout = 2 * g, 2 * g
    shift = int(rng.integers(0, cout))
    mid = cout // 2 if recombine == "add" else cout
    arrays = [rng.standard_normal((1, cin, 3, 3)), rng.standard_normal((cout, cin // g, 3, 3)) * 0.5,
              rng.standard_normal(cout), rng.standard_normal((cout, mid, 1, 1)), rng.standard_normal(cout)]

    def fn(t):
        p = GsconvParams(t[1], t[2], g, shift, t[3], t[4], recombine=recombine)
        return gsconv_forward(t[0], p)

    return arrays, fn


OP_CASES = {
    "conv2d": _case_conv2d,
    "conv1d_channels": _case_conv1d,
    "max_pool2d": _case_maxpool,
    "transposed_conv2d": _case_tconv,
    "concat_channels": _case_concat,
    "slice_channels": _case_slice,
    "channel_shift": _case_shift,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "global_avg_pool": _case_gap,
    "mul_channelwise": _case_mulch,
    "softmax_channels": _case_softmax,
    "log_softmax_channels": _case_logsoftmax,
    "add": _case_add,
    "mul": _case_mul,
    "sum": _case_sum,
    "mean": _case_mean,
    "cross_entropy_loss": _case_ce,
    "dice_loss": _case_dice,
    "ce_plus_dice_loss": _case_ce_dice,
    "eca_forward": _case_eca,
    "gsconv_forward[concatenate-project]": lambda rng: _gsconv_case(rng, "concatenate-project"),
    "gsconv_forward[add]": lambda rng: _gsconv_case(rng, "add"),
}


def check_op(name: str, trials: int = 100, tol: float = 1e-4, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst = 0.0
    for _ in range(trials):
        arrays, fn = OP_CASES[name](rng)
        worst = max(worst, check_function(fn, arrays, rng))
    return CheckResult(name, worst, trials, tol)


def tiny_model_config(variant: str) -> ModelConfig:
    """depth 1, base 2, 8x8 input; the improved variant uses 2 groups and a width-1 ECA kernel."""
    return ModelConfig(variant=variant, input_size=8, depth=1, base_channels=2, groups=2, eca_k=1)


def check_model(variant: str, trials: int = 2, tol: float = 1e-3, seed: int = 0,
                eps: float = FD_EPS) -> CheckResult:
    """Gradient of a random projection of the tiny model's logits w.r.t. every parameter."""
    cfg = tiny_model_config(variant)
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial, 7])
        model = build_model(cfg, seed=int(rng.integers(1 << 30)))
        names = list(model.params)
        arrays = [model.params[k].data.astype(np.float64) for k in names]
        batch = Tensor(rng.uniform(0, 1, size=(1, 1, 8, 8)), dtype=np.float64)

        def fn(t, model=model, batch=batch):
            model.params = dict(zip(names, t))
            return model.forward(batch)

        worst = max(worst, check_function(fn, arrays, rng, eps=eps))
    return CheckResult(f"model[{variant}]", worst, trials, tol)


def run_suite(trials: int = 100, tol: float = 1e-4, model_tol: Optional[float] = None,
              model_trials: int = 2, seed: int = 0,
              report: Optional[Callable[[CheckResult], None]] = None) -> List[CheckResult]:
    """Check every op at ``tol`` and the tiny full models at ``model_tol`` (default ``10 * tol``)."""
    if model_tol is None:
        model_tol = 10 * tol
    results = []
    for name in OP_CASES:
        res = check_op(name, trials=trials, tol=tol, seed=seed)
        results.append(res)
        if report:
            report(res)
    for variant in ("baseline", "improved"):
        res = check_model(variant, trials=model_trials, tol=model_tol, seed=seed)
        results.append(res)
        if report:
            report(res)
    return results
