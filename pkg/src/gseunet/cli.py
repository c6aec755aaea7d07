"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
import warnings
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import data_io, gradcheck
from .blocks import ModelConfig, build_model
from .errors import DataError, GseUnetError, NumericalError, UsageError
from .preprocess import equalize, preprocess_image, preprocess_mask, resize_nearest
from .tensor import Tensor
from .training import LOSS_ALIASES, SCHEDULES, TrainConfig, evaluate, predict_labels, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# Built-in defaults follow the reference experiment; presets override them and
# explicit flags override presets.
DEFAULTS = dict(epochs=50, lr=1e-4, size=512, batch=2, base=16, depth=4, groups=4, eca_k=3,
                loss="ce", seed=0, optimizer="adam", recombine="concatenate-project",
                schedule="constant")
PRESETS = {
    "paper": dict(epochs=50, lr=1e-4, size=512, batch=2, base=64),
    "desk": dict(epochs=50, lr=1e-3, size=64, batch=2, base=16, schedule="cosine"),
}

log = logging.getLogger("gseunet")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {s}")
    return v


def _existing_dir(s: str) -> Path:
    p = Path(s)
    if not p.is_dir():
        raise argparse.ArgumentTypeError(f"{s}: not a directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gseunet", description="U-Net / GSConv+ECA U-Net segmentation engine")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", help="gray-convert, equalize and optionally resize a PNG directory")
    p.add_argument("--in", dest="in_dir", required=True, type=_existing_dir)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--size", type=_positive_int)
    p.add_argument("--resize-first", action="store_true", help="resize before equalizing")

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--images", required=True, type=_existing_dir)
    p.add_argument("--masks", required=True, type=_existing_dir)
    p.add_argument("--variant", required=True, choices=("baseline", "improved"))
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--size", type=_positive_int)
    p.add_argument("--batch", type=_positive_int)
    p.add_argument("--base", type=_positive_int, help="first-level channel width")
    p.add_argument("--depth", type=_positive_int)
    p.add_argument("--groups", type=_positive_int)
    p.add_argument("--eca-k", dest="eca_k", type=_positive_int)
    p.add_argument("--shift", type=int)
    p.add_argument("--recombine", choices=("concatenate-project", "add"))
    p.add_argument("--loss", choices=sorted(LOSS_ALIASES))
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--schedule", choices=SCHEDULES)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", required=True, help="metrics CSV path")

    p = sub.add_parser("eval", help="evaluate a checkpoint on an image/mask directory pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True, type=_existing_dir)
    p.add_argument("--masks", required=True, type=_existing_dir)
    p.add_argument("--loss", choices=sorted(LOSS_ALIASES), default="ce")
    p.add_argument("--batch", type=_positive_int, default=2)

    p = sub.add_parser("predict", help="write binary prediction masks")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inputs", required=True, nargs="+")
    p.add_argument("--out", dest="out_dir", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--trials", type=_positive_int, default=100)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--model-tol", type=float, help="tolerance for the full-model check (default 10 x --tol)")
    p.add_argument("--model-trials", type=_positive_int, default=2)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="write a synthetic blob dataset")
    p.add_argument("--n", type=_positive_int, default=80)
    p.add_argument("--size", type=_positive_int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", dest="out_dir", required=True)
    return parser


def resolve_train_settings(args) -> dict:
    """Merge built-in defaults, the preset and explicit flags (in that order)."""
    settings = dict(DEFAULTS)
    if args.preset:
        settings.update(PRESETS[args.preset])
    for key in ("epochs", "lr", "size", "batch", "base", "depth", "groups", "eca_k", "loss", "seed",
                "optimizer", "recombine", "shift", "schedule"):
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    settings.setdefault("shift", None)
    return settings


def _load_pairs(images, masks):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", data_io.UnmatchedFileWarning)
        pairs = data_io.pair_dataset(images, masks)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    return pairs


def _check_writable(path: Path) -> None:
    parent = path.resolve().parent
    if not parent.is_dir():
        raise UsageError(f"{path}: parent directory {parent} does not exist")


def cmd_preprocess(args) -> int:
    files = data_io.list_pngs(args.in_dir)
    if not files:
        print(f"no images found in {args.in_dir}", file=sys.stderr)
        return EXIT_DATA
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    done, failed = 0, []
    for f in files:
        try:
            img = preprocess_image(data_io.load_image(f), args.size, equalize_first=not args.resize_first)
            data_io.save_image(img, out / f.name)
            done += 1
        except DataError as exc:
            failed.append(f)
            print(f"error: {exc}", file=sys.stderr)
    print(f"processed {done} images")
    return EXIT_DATA if done == 0 else EXIT_OK


def cmd_train(args) -> int:
    s = resolve_train_settings(args)
    mcfg = ModelConfig(variant=args.variant, input_size=s["size"], depth=s["depth"], base_channels=s["base"],
                       groups=s["groups"], eca_k=s["eca_k"], shift=s["shift"], recombine=s["recombine"])
    tcfg = TrainConfig(epochs=s["epochs"], lr=s["lr"], batch_size=s["batch"], seed=s["seed"], loss=s["loss"],
                       optimizer=s["optimizer"], input_size=s["size"], variant=args.variant,
                       schedule=s["schedule"])
    ckpt, metrics = Path(args.out), Path(args.metrics)
    _check_writable(ckpt)
    _check_writable(metrics)

    pairs = _load_pairs(args.images, args.masks)
    if len(pairs) < sum(tcfg.split_ratio):
        raise DataError(f"need at least {sum(tcfg.split_ratio)} image/mask pairs, found {len(pairs)}")
    size = mcfg.input_size
    images = np.stack([preprocess_image(p.image, size) for p in pairs])
    masks = np.stack([preprocess_mask(p.mask, size) for p in pairs])
    model = build_model(mcfg, seed=tcfg.seed)
    log.info("training %s: %d samples, %d parameters", mcfg.variant, len(pairs), model.n_parameters())

    def progress(r):
        print(f"epoch {r.epoch} train_loss {r.train_loss:.6f} val_loss {r.val_loss:.6f} val_miou {r.val_miou:.6f}",
              flush=True)

    model, records = train(model, images, masks, tcfg, on_epoch=progress)
    data_io.save_checkpoint(model, ckpt)
    data_io.write_metrics_csv(records, metrics)
    return EXIT_OK


def _load_model(path):
    return data_io.load_checkpoint(path)


def cmd_eval(args) -> int:
    model = _load_model(args.ckpt)
    size = model.config.input_size
    pairs = _load_pairs(args.images, args.masks)
    for p in pairs:
        if p.image.shape != (size, size):
            h, w = p.image.shape
            raise DataError(f"{p.id}: image is {w}x{h}, the checkpoint expects input size {size}x{size}")
    images = np.stack([equalize(p.image) for p in pairs])
    masks = np.stack([p.mask for p in pairs])
    loss, score = evaluate(model, images, masks, args.loss, args.batch)
    print(f"mean_loss {loss:.6f}")
    print(f"miou {score:.6f}")
    return EXIT_OK


def predict_mask(model, gray: np.ndarray) -> np.ndarray:
    """Binary 0/255 mask at the image's own resolution."""
    size = model.config.input_size
    h, w = gray.shape
    x = preprocess_image(gray, size)
    logits = model(Tensor(x[None, None].astype(np.float32) / 255.0))
    labels = predict_labels(logits.data)[0]
    return (resize_nearest(labels, w, h) * 255).astype(np.uint8)


def cmd_predict(args) -> int:
    model = _load_model(args.ckpt)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    for name in args.inputs:
        try:
            pred = predict_mask(model, data_io.load_image(name))
            data_io.save_image(pred, out / f"{Path(name).stem}_pred.png")
        except DataError as exc:
            failures += 1
            print(f"error: {exc}", file=sys.stderr)
    print(f"wrote {len(args.inputs) - failures} predictions to {out}")
    return EXIT_DATA if failures else EXIT_OK


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()

    def report(r):
        status = "ok" if r.ok else "FAIL"
        print(f"{r.name:40s} max_rel_err {r.max_rel_err:.3e} tol {r.tol:g} trials {r.trials} {status}", flush=True)

    results = gradcheck.run_suite(trials=args.trials, tol=args.tol, model_tol=args.model_tol,
                                  model_trials=args.model_trials, seed=args.seed, report=report)
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    if failed:
        print(f"failing ops: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_synth(args) -> int:
    pairs = data_io.generate_synthetic_dataset(args.n, args.size, args.seed)
    k = data_io.write_dataset(pairs, args.out_dir)
    print(f"wrote {k} image/mask pairs to {args.out_dir}")
    return EXIT_OK


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GseUnetError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
