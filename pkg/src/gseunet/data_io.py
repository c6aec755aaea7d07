"""PNG ingestion, image/mask pairing, checkpoints, metrics CSV and synthetic data.

Checkpoint layout (all integers little-endian)::

    b"GSEU"                     magic
    u32   version               currently 1
    u32   config length, then that many bytes of UTF-8 JSON (ModelConfig)
    u32   entry count
    per entry:
        u32  name length, UTF-8 name
        u32  rank, then rank x u64 dims
        f32  data, product(dims) values, row-major
"""
from __future__ import annotations

import json
import math
import os
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .blocks import Model, ModelConfig, param_specs
from .errors import (BadMagicError, CheckpointMismatchError, ConfigError, DataError,
                     EmptyDatasetError, ImageDecodeError, ImageFormatError, ImageNotFoundError,
                     TruncatedCheckpointError, UnsupportedDepthError, UsageError,
                     VersionMismatchError)
from .preprocess import binarize_mask, to_grayscale
from .tensor import Tensor
from .training import MetricRecord

MAGIC = b"GSEU"
VERSION = 1
CSV_HEADER = "epoch,train_loss,val_loss,val_miou"
_DEPTH_BY_MODE = {"1": 1, "I;16": 16, "I;16B": 16, "I;16L": 16, "I;16N": 16, "I": 32, "F": 32}


class UnmatchedFileWarning(UserWarning):
    """An image without a mask, or a mask without an image."""


@dataclass
class SamplePair:
    id: str
    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise DataError(f"sample {self.id!r}: image {self.image.shape[::-1]} and "
                            f"mask {self.mask.shape[::-1]} dimensions differ (w x h)")


# images -----------------------------------------------------------------------


def _open_png(path) -> Image.Image:
    path = Path(path)
    if not path.is_file():
        raise ImageNotFoundError(f"{path}: no such file")
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageDecodeError(f"{path}: cannot decode image ({exc})") from exc
    if img.format != "PNG":
        raise ImageFormatError(f"{path}: only PNG is supported, got {img.format}")
    if img.mode in _DEPTH_BY_MODE:
        raise UnsupportedDepthError(path, _DEPTH_BY_MODE[img.mode])
    return img


def load_rgb(path) -> np.ndarray:
    """Read an 8-bit PNG as an ``(H, W, 3)`` array (gray is replicated)."""
    img = _open_png(path)
    if img.mode not in ("L", "RGB", "P"):
        raise ImageFormatError(f"{path}: unsupported PNG mode {img.mode!r}")
    return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


def load_image(path) -> np.ndarray:
    """Read an 8-bit PNG as a gray ``(H, W)`` array; RGB goes through BT.601 luma."""
    img = _open_png(path)
    if img.mode == "L":
        return np.asarray(img, dtype=np.uint8).copy()
    if img.mode == "P":
        img = img.convert("RGB")
    if img.mode == "RGB":
        return to_grayscale(np.asarray(img, dtype=np.uint8))
    raise ImageFormatError(f"{path}: expected 1 or 3 channels, got mode {img.mode!r}")


def save_image(img, path) -> None:
    a = np.asarray(img)
    if a.ndim != 2 or a.dtype != np.uint8:
        raise ImageFormatError(f"save_image expects a 2-D uint8 array, got {a.dtype} {a.shape}")
    path = Path(path)
    try:
        Image.fromarray(a, mode="L").save(path, format="PNG")
    except OSError as exc:
        raise DataError(f"{path}: cannot write image ({exc})") from exc


def list_pngs(directory) -> List[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.is_file() and p.suffix.lower() == ".png")


def pair_dataset(images_dir, masks_dir, threshold: int = 128) -> List[SamplePair]:
    """Match images and masks by file stem, sorted by stem.

    Unmatched files raise :class:`UnmatchedFileWarning` and are skipped; a pair
    whose dimensions differ raises :class:`DataError`.
    """
    for d in (images_dir, masks_dir):
        if not Path(d).is_dir():
            raise DataError(f"{d}: not a directory")
    images = {p.stem: p for p in list_pngs(images_dir)}
    masks = {p.stem: p for p in list_pngs(masks_dir)}
    for stem in sorted(images.keys() - masks.keys()):
        warnings.warn(f"image {images[stem].name} has no mask; skipped", UnmatchedFileWarning, stacklevel=2)
    for stem in sorted(masks.keys() - images.keys()):
        warnings.warn(f"mask {masks[stem].name} has no image; skipped", UnmatchedFileWarning, stacklevel=2)
    pairs = [SamplePair(stem, load_image(images[stem]), binarize_mask(load_image(masks[stem]), threshold))
             for stem in sorted(images.keys() & masks.keys())]
    if not pairs:
        raise EmptyDatasetError(f"no matching image/mask pairs between {images_dir} and {masks_dir}")
    return pairs


# checkpoints ------------------------------------------------------------------


def checkpoint_bytes(model: Model) -> bytes:
    cfg = model.config.to_json().encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{t.ndim}Q", t.ndim, *t.shape))
        out.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(out)


def save_checkpoint(model: Model, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(checkpoint_bytes(model))
        os.replace(tmp, path)
    except OSError as exc:
        raise DataError(f"{path}: cannot write checkpoint ({exc})") from exc


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(
                f"checkpoint truncated while reading {what}: need {n} bytes at offset {self.pos}, "
                f"{len(self.buf) - self.pos} left")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def checkpoint_from_bytes(buf: bytes) -> Model:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version} unsupported (expected {VERSION})")
    raw_cfg = r.take(r.u32("config length"), "config")
    try:
        cfg = ModelConfig.from_dict(json.loads(raw_cfg.decode("utf-8")))
    except (ValueError, TypeError, ConfigError) as exc:
        raise CheckpointMismatchError(f"invalid model config in checkpoint: {exc}") from exc
    params = {}
    for i in range(r.u32("entry count")):
        name = r.take(r.u32(f"entry {i} name length"), f"entry {i} name").decode("utf-8")
        if name in params:
            raise CheckpointMismatchError(f"duplicate tensor name {name!r}")
        rank = r.u32(f"{name} rank")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"{name} dims"))
        count = math.prod(dims)
        data = np.frombuffer(r.take(4 * count, f"{name} data"), dtype="<f4").astype(np.float32)
        params[name] = Tensor(data.reshape(dims), requires_grad=True)
    if r.pos != len(buf):
        raise CheckpointMismatchError(f"{len(buf) - r.pos} trailing bytes after the last tensor")

    expected = {name: shape for name, shape, _ in param_specs(cfg)}
    if list(expected) != list(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise CheckpointMismatchError(f"tensor names disagree with config: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointMismatchError(f"{name}: stored shape {params[name].shape}, config implies {shape}")
    return Model(cfg, params)


def load_checkpoint(path) -> Model:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: checkpoint not found")
    return checkpoint_from_bytes(path.read_bytes())


# metrics ----------------------------------------------------------------------


def format_metrics_csv(records: Sequence[MetricRecord]) -> str:
    lines = [CSV_HEADER]
    lines += [f"{r.epoch},{r.train_loss:.6f},{r.val_loss:.6f},{r.val_miou:.6f}" for r in records]
    return "\n".join(lines) + "\n"


def write_metrics_csv(records: Sequence[MetricRecord], path) -> None:
    if not records:
        raise UsageError("no metric records to write")
    path = Path(path)
    try:
        path.write_text(format_metrics_csv(records), encoding="utf-8", newline="\n")
    except OSError as exc:
        raise DataError(f"{path}: cannot write metrics ({exc})") from exc


def read_metrics_csv(path) -> List[MetricRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise DataError(f"{path}: missing metrics header {CSV_HEADER!r}")
    out = []
    for line in lines[1:]:
        e, tl, vl, vm = line.split(",")
        out.append(MetricRecord(int(e), float(tl), float(vl), float(vm)))
    return out


# synthetic data ---------------------------------------------------------------


def synthetic_sample(size: int, seed: int, index: int, noise: float = 12.0) -> SamplePair:
    """One dark noisy image with 1-3 bright ellipses; the mask is their union."""
    rng = np.random.default_rng([seed, index])
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    mask = np.zeros((size, size), dtype=bool)
    image = rng.normal(40.0, noise, size=(size, size))
    for _ in range(rng.integers(1, 4)):
        a, b = rng.uniform(0.07, 0.16, size=2) * size
        cy, cx = rng.uniform(0.2, 0.8, size=2) * size
        theta = rng.uniform(0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        image[inside] = rng.normal(rng.uniform(150, 210), noise, size=int(inside.sum()))
        mask |= inside
    img = np.clip(np.round(image), 0, 255).astype(np.uint8)
    return SamplePair(f"synth_{index:04d}", img, mask.astype(np.uint8))


def generate_synthetic_dataset(n: int, size: int, seed: int = 0) -> List[SamplePair]:
    """Deterministic per ``(seed, index)`` blob segmentation samples."""
    if n < 1 or size < 8:
        raise UsageError(f"need n >= 1 and size >= 8, got n={n}, size={size}")
    return [synthetic_sample(size, seed, i) for i in range(n)]


def write_dataset(pairs: Iterable[SamplePair], out_dir) -> int:
    """Write ``images/<id>.png`` and ``masks/<id>.png`` (mask scaled to 0/255)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    k = 0
    for p in pairs:
        save_image(p.image, out / "images" / f"{p.id}.png")
        save_image((p.mask * 255).astype(np.uint8), out / "masks" / f"{p.id}.png")
        k += 1
    return k
