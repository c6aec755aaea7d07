"""U-Net building blocks and model assembly.

Two variants share one topology:

* ``baseline``: every block is ``(conv3x3 -> relu) x 2``.
* ``improved``: every 3x3 conv becomes a GSConv (grouped conv, cyclic channel
  shift, recombination) and each double-conv block ends with ECA channel
  attention.

The encoder has ``depth`` levels of block + 2x2 max-pool, then a bottleneck
block, then ``depth`` decoder levels of 2x2 transposed conv, skip concat and
block, and finally a 1x1 head producing ``classes`` logits per pixel.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .tensor import Tensor, add

VARIANTS = ("baseline", "improved")
RECOMBINE_MODES = ("concatenate-project", "add")


@dataclass
class ModelConfig:
    variant: str = "baseline"
    input_size: int = 512
    depth: int = 4
    base_channels: int = 16
    classes: int = 2
    groups: int = 4
    eca_k: int = 3
    shift: Optional[int] = None  # None: half the per-group width of each layer
    recombine: str = "concatenate-project"
    in_channels: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.recombine not in RECOMBINE_MODES:
            raise ConfigError(f"recombine must be one of {RECOMBINE_MODES}, got {self.recombine!r}")
        for name in ("input_size", "depth", "base_channels", "classes", "groups", "eca_k", "in_channels"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        divisor = 2 ** self.depth
        if self.input_size % divisor:
            raise ConfigError(f"input_size {self.input_size} must be divisible by 2**depth = {divisor}")
        bottleneck = self.base_channels * divisor
        if self.variant == "improved":
            if bottleneck % self.groups:
                raise ConfigError(
                    f"bottleneck width base_channels*2**depth = {bottleneck} is not divisible by "
                    f"groups={self.groups}; pick groups dividing {bottleneck}")
            if self.eca_k % 2 == 0:
                raise ConfigError(f"eca_k must be odd, got {self.eca_k}")
            if self.eca_k > self.base_channels:
                raise ConfigError(f"eca_k={self.eca_k} exceeds the narrowest block width {self.base_channels}")
            if self.shift is not None and self.shift < 0:
                raise ConfigError(f"shift must be non-negative, got {self.shift}")
            if self.recombine == "add" and self.base_channels % 2:
                raise ConfigError("recombine='add' needs even channel widths")

    def widths(self) -> list:
        return [self.base_channels * 2 ** i for i in range(self.depth + 1)]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EcaParams:
    kernel: Tensor

    @property
    def k(self) -> int:
        return self.kernel.shape[0]


@dataclass
class GsconvParams:
    weight: Tensor
    bias: Optional[Tensor]
    groups: int
    shift: int
    proj_weight: Tensor
    proj_bias: Optional[Tensor] = None
    recombine: str = "concatenate-project"

    def __post_init__(self):
        cout, cin_g = self.weight.shape[:2]
        if cout % self.groups:
            raise ConfigError(f"GSConv: {cout} output channels not divisible by groups={self.groups}")
        if not 0 <= self.shift < cout:
            raise ConfigError(f"GSConv: shift {self.shift} must lie in [0, {cout})")
        if self.recombine not in RECOMBINE_MODES:
            raise ConfigError(f"GSConv: unknown recombine mode {self.recombine!r}")
        if self.recombine == "add" and cout % 2:
            raise ConfigError(f"GSConv: recombine='add' needs an even channel count, got {cout}")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


def eca_forward(x: Tensor, p: EcaParams) -> Tensor:
    """Channel attention: pool, filter across channels, gate, rescale."""
    if p.k > x.shape[1]:
        raise ConfigError(f"ECA kernel size {p.k} exceeds channel count {x.shape[1]}")
    w = ops.sigmoid(ops.conv1d_channels(ops.global_avg_pool(x), p.kernel))
    return ops.mul_channelwise(x, w)


def channel_shift(x: Tensor, s: int) -> Tensor:
    return ops.channel_shift(x, s)


def gsconv_forward(x: Tensor, p: GsconvParams) -> Tensor:
    """Grouped conv, cyclic channel shift, then cross-group recombination.

    ``concatenate-project`` mixes all channels with a learned 1x1 conv;
    ``add`` sums the two channel halves and maps them back to full width with
    the 1x1 conv.
    """
    if x.shape[1] != p.in_channels:
        raise ShapeError("gsconv", f"expected {p.in_channels} input channels, got {x.shape[1]}", dim=1)
    k = p.weight.shape[2]
    y = ops.conv2d(x, p.weight, p.bias, stride=1, padding=k // 2, groups=p.groups)
    y = ops.channel_shift(y, p.shift)
    if p.recombine == "add":
        a, b = ops.split_channels(y, y.shape[1] // 2)
        y = add(a, b)
    return ops.conv2d(y, p.proj_weight, p.proj_bias)


# parameter bookkeeping ---------------------------------------------------------


def _effective_groups(groups: int, cin: int, cout: int) -> int:
    # the 1-channel stem cannot be split, so layers fall back to the common divisor
    return math.gcd(groups, math.gcd(cin, cout))


def _default_shift(cout: int, groups: int) -> int:
    return (cout // groups) // 2


class _Init:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initializer drawing from one seeded stream."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def __call__(self, shape, fan_in: int) -> Tensor:
        bound = 1.0 / math.sqrt(fan_in)
        data = self.rng.uniform(-bound, bound, size=shape).astype(np.float32)
        return Tensor(data, requires_grad=True)


@dataclass
class Model:
    config: ModelConfig
    params: Dict[str, Tensor] = field(default_factory=dict)
    layer_groups: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.layer_groups = {prefix: g for prefix, _, _, _, g in layer_plan(self.config)}

    def forward(self, batch: Tensor) -> Tensor:
        return model_forward(self, batch)

    __call__ = forward

    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        if list(state) != list(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise ConfigError(f"state dict mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, arr in state.items():
            if arr.shape != self.params[k].shape:
                raise ShapeError("load_state_dict", f"{k}: stored {arr.shape}, model {self.params[k].shape}")
            self.params[k].data = np.array(arr, dtype=np.float32)

    def eca(self, prefix: str) -> EcaParams:
        return EcaParams(self.params[f"{prefix}.eca.kernel"])

    def gsconv(self, prefix: str) -> GsconvParams:
        w = self.params[f"{prefix}.weight"]
        cout = w.shape[0]
        groups = self.layer_groups[prefix]
        shift = self.config.shift if self.config.shift is not None else _default_shift(cout, groups)
        return GsconvParams(
            weight=w,
            bias=self.params.get(f"{prefix}.bias"),
            groups=groups,
            shift=shift % cout,
            proj_weight=self.params[f"{prefix}.proj.weight"],
            proj_bias=self.params.get(f"{prefix}.proj.bias"),
            recombine=self.config.recombine,
        )


def layer_plan(cfg: ModelConfig) -> list:
    """List of ``(prefix, kind, cin, cout, groups)`` for every conv in the model."""
    plan = []
    w = cfg.widths()
    g = cfg.groups if cfg.variant == "improved" else 1

    def block(prefix, cin, cout):
        plan.append((f"{prefix}.conv1", "conv3", cin, cout, _effective_groups(g, cin, cout)))
        plan.append((f"{prefix}.conv2", "conv3", cout, cout, _effective_groups(g, cout, cout)))

    cin = cfg.in_channels
    for i in range(cfg.depth):
        block(f"enc{i}", cin, w[i])
        cin = w[i]
    block("bottleneck", w[cfg.depth - 1], w[cfg.depth])
    for i in reversed(range(cfg.depth)):
        plan.append((f"up{i}", "up", w[i + 1], w[i], 1))
        block(f"dec{i}", 2 * w[i], w[i])
    plan.append(("head", "head", w[0], cfg.classes, 1))
    return plan


def param_specs(cfg: ModelConfig) -> list:
    """``(name, shape, fan_in)`` for every parameter, in initialization order."""
    specs = []
    improved = cfg.variant == "improved"
    for prefix, kind, cin, cout, g in layer_plan(cfg):
        if kind == "conv3":
            fan_in = (cin // g) * 9
            specs.append((f"{prefix}.weight", (cout, cin // g, 3, 3), fan_in))
            specs.append((f"{prefix}.bias", (cout,), fan_in))
            if improved:
                mid = cout // 2 if cfg.recombine == "add" else cout
                specs.append((f"{prefix}.proj.weight", (cout, mid, 1, 1), mid))
                specs.append((f"{prefix}.proj.bias", (cout,), mid))
                if prefix.endswith("conv2"):
                    specs.append((f"{prefix.rsplit('.', 1)[0]}.eca.kernel", (cfg.eca_k,), cfg.eca_k))
        elif kind == "up":
            specs.append((f"{prefix}.weight", (cin, cout, 2, 2), cin))
            specs.append((f"{prefix}.bias", (cout,), cin))
        else:
            specs.append((f"{prefix}.weight", (cout, cin, 1, 1), cin))
            specs.append((f"{prefix}.bias", (cout,), cin))
    return specs


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """Instantiate parameters for ``cfg`` with a seeded uniform fan-in init."""
    cfg.validate()
    init = _Init(seed)
    return Model(cfg, {name: init(shape, fan_in) for name, shape, fan_in in param_specs(cfg)})


def double_conv_block(x: Tensor, model: Model, prefix: str) -> Tensor:
    """Two conv+relu stages; the improved variant uses GSConv and appends ECA."""
    p = model.params
    if model.config.variant == "baseline":
        for conv in ("conv1", "conv2"):
            x = ops.relu(ops.conv2d(x, p[f"{prefix}.{conv}.weight"], p[f"{prefix}.{conv}.bias"], padding=1))
        return x
    for conv in ("conv1", "conv2"):
        x = ops.relu(gsconv_forward(x, model.gsconv(f"{prefix}.{conv}")))
    return eca_forward(x, model.eca(prefix))


def model_forward(model: Model, batch: Tensor) -> Tensor:
    """Logits ``[N, classes, S, S]`` for a ``[N, in_channels, S, S]`` batch."""
    cfg = model.config
    if batch.ndim != 4:
        raise ShapeError("model_forward", f"batch must be [N, C, S, S], got {batch.shape}")
    if batch.shape[1] != cfg.in_channels:
        raise ShapeError("model_forward", f"expected {cfg.in_channels} input channel(s), got {batch.shape[1]}", dim=1)
    divisor = 2 ** cfg.depth
    for dim in (2, 3):
        if batch.shape[dim] % divisor:
            raise ShapeError("model_forward",
                             f"spatial size {batch.shape[dim]} must be divisible by {divisor} (2**depth)", dim=dim)
    p = model.params
    skips = []
    x = batch
    for i in range(cfg.depth):
        x = double_conv_block(x, model, f"enc{i}")
        skips.append(x)
        x = ops.max_pool2d(x)
    x = double_conv_block(x, model, "bottleneck")
    for i in reversed(range(cfg.depth)):
        x = ops.transposed_conv2d(x, p[f"up{i}.weight"], p[f"up{i}.bias"])
        x = ops.concat_channels(skips[i], x)
        x = double_conv_block(x, model, f"dec{i}")
    return ops.conv2d(x, p["head.weight"], p["head.bias"])


def count_parameters(cfg: ModelConfig) -> int:
    return int(sum(math.prod(shape) for _, shape, _ in param_specs(cfg)))
