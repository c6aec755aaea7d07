"""Acceptance criteria at desk scale.

Every test appends one pass/fail line to ``conftest.ACCEPTANCE_LINES`` before
asserting, so the terminal summary lists each criterion even when it fails.
The training runs are shared through a session fixture: the baseline is
trained twice (once in-process, once through the CLI) and the improved
variant once, with the CLI's ``--preset desk`` settings.
"""
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from gseunet import cli, gradcheck, ops
from gseunet.blocks import GsconvParams, ModelConfig, build_model, count_parameters, layer_plan, param_specs
from gseunet.blocks import EcaParams, eca_forward, gsconv_forward
from gseunet.data_io import (
    generate_synthetic_dataset, load_checkpoint, read_metrics_csv, save_checkpoint, write_dataset,
    write_metrics_csv,
)
from gseunet.preprocess import equalize, preprocess_image, preprocess_mask
from gseunet.tensor import Tensor
from gseunet.training import TrainConfig, miou, train

from conftest import ACCEPTANCE_LINES
from test_preprocess import lut_oracle
from test_training import miou_oracle

pytestmark = pytest.mark.acceptance

N_SAMPLES, SIZE, DATA_SEED = 80, 64, 0
BAND = 0.10
LAST = 10


def record(criterion, ok, detail, status=None):
    status = status or ("PASS" if ok else "FAIL")
    ACCEPTANCE_LINES.append((criterion, status, detail))
    print(f"criterion {criterion}: {status} - {detail}")
    return ok


def desk_settings(variant):
    args = cli.build_parser().parse_args(
        ["train", "--images", ".", "--masks", ".", "--variant", variant, "--preset", "desk",
         "--out", "unused", "--metrics", "unused"])
    s = cli.resolve_train_settings(args)
    mcfg = ModelConfig(variant=variant, input_size=s["size"], depth=s["depth"], base_channels=s["base"],
                       groups=s["groups"], eca_k=s["eca_k"], shift=s["shift"], recombine=s["recombine"])
    tcfg = TrainConfig(epochs=s["epochs"], lr=s["lr"], batch_size=s["batch"], seed=s["seed"], loss=s["loss"],
                       optimizer=s["optimizer"], input_size=s["size"], variant=variant,
                       schedule=s["schedule"])
    return mcfg, tcfg


def band_violations(val_losses, band=BAND, last=LAST):
    """Epoch pairs in the final window where val loss rose by more than ``band``."""
    window = list(enumerate(val_losses, 1))[-last:]
    return [(e1, e0, v1 / v0) for (e0, v0), (e1, v1) in zip(window, window[1:]) if v1 > (1 + band) * v0]


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    pairs = generate_synthetic_dataset(N_SAMPLES, SIZE, seed=DATA_SEED)
    write_dataset(pairs, root / "data")
    images = np.stack([preprocess_image(p.image, SIZE) for p in pairs])
    masks = np.stack([preprocess_mask(p.mask, SIZE) for p in pairs])

    runs = {}
    for variant in ("baseline", "improved"):
        mcfg, tcfg = desk_settings(variant)
        model = build_model(mcfg, seed=tcfg.seed)
        t0 = time.perf_counter()
        model, records = train(model, images, masks, tcfg)
        elapsed = time.perf_counter() - t0
        csv = root / f"{variant}.csv"
        write_metrics_csv(records, csv)
        runs[variant] = dict(model=model, records=records, seconds=elapsed, csv=csv, tcfg=tcfg)

    # second baseline run through the command line with the same seed
    cli_csv, cli_ckpt = root / "baseline_cli.csv", root / "baseline_cli.ckpt"
    code = cli.main(["train", "--images", str(root / "data" / "images"), "--masks", str(root / "data" / "masks"),
                     "--variant", "baseline", "--preset", "desk", "--out", str(cli_ckpt), "--metrics", str(cli_csv)])
    runs["baseline_cli"] = dict(code=code, csv=cli_csv, ckpt=cli_ckpt)
    runs["root"] = root
    return runs


# 1 ------------------------------------------------------------------------------------


def test_criterion_1_gradient_suite(capsys):
    t0 = time.perf_counter()
    code = cli.main(["gradcheck"])
    elapsed = time.perf_counter() - t0
    out = capsys.readouterr().out
    n_ops = len(gradcheck.OP_CASES)
    ok = code == 0 and elapsed < 120
    record(1, ok, f"{n_ops} ops x 100 trials at 1e-4 and both tiny models at 1e-3, "
                  f"exit {code}, {elapsed:.1f}s (limit 120s)")
    assert code == 0, out
    assert elapsed < 120


# 2 ------------------------------------------------------------------------------------


def test_criterion_2_desk_learning(desk):
    base = desk["baseline"]["records"]
    imp = desk["improved"]["records"]
    b_final, i_final = base[-1].val_miou, imp[-1].val_miou
    secs = {v: desk[v]["seconds"] for v in ("baseline", "improved")}
    ok = (b_final >= 0.80 and i_final >= b_final - 0.02 and len(base) <= 50
          and all(s < 600 for s in secs.values()))
    record(2, ok, f"baseline final val mIoU {b_final:.4f} (>= 0.80), improved {i_final:.4f} "
                  f"(>= {b_final - 0.02:.4f}), {len(base)} epochs, "
                  f"runtime {secs['baseline']:.0f}s / {secs['improved']:.0f}s (limit 600s each)")
    assert b_final >= 0.80
    assert i_final >= b_final - 0.02
    assert all(s < 600 for s in secs.values())


# 3 ------------------------------------------------------------------------------------


@pytest.mark.parametrize("variant", ["baseline", "improved"])
def test_criterion_3_convergence_shape(desk, variant):
    recs = desk[variant]["records"]
    ratio = recs[-1].train_loss / recs[0].train_loss
    bad = band_violations([r.val_loss for r in recs])
    window = " ".join(f"{r.val_loss:.5f}" for r in recs[-LAST:])
    ok = ratio < 0.5 and not bad
    record(3, ok, f"[{variant}] train loss final/first {ratio:.4f} (< 0.5); val loss over last {LAST} epochs "
                  f"[{window}], rises above {BAND:.0%}: "
                  + (", ".join(f"epoch {e1} vs {e0} x{r:.3f}" for e1, e0, r in bad) or "none"))
    assert ratio < 0.5
    assert not bad


# 4 ------------------------------------------------------------------------------------


def test_criterion_4_parameter_economy():
    groups = 4
    base_cfg = ModelConfig(variant="baseline", depth=4, base_channels=16, eca_k=3, input_size=64)
    imp_cfg = ModelConfig(variant="improved", depth=4, base_channels=16, eca_k=3, groups=groups, input_size=64)
    n_base, n_imp = count_parameters(base_cfg), count_parameters(imp_cfg)

    dense = {n: math.prod(s) for n, s, _ in param_specs(base_cfg)}
    grouped = {n: math.prod(s) for n, s, _ in param_specs(imp_cfg)}
    plan = {p: g for p, kind, _, _, g in layer_plan(imp_cfg) if kind == "conv3"}
    per_layer_exact = all(dense[f"{p}.weight"] == g * grouped[f"{p}.weight"] for p, g in plan.items())
    # the single-channel stem cannot be split; every other grouped stage uses G groups
    full_g = [p for p, g in plan.items() if g == groups]
    stem = [p for p, g in plan.items() if g != groups]
    dense_sum = sum(dense[f"{p}.weight"] for p in full_g)
    grouped_sum = sum(grouped[f"{p}.weight"] for p in full_g)
    ok = n_imp < n_base and per_layer_exact and dense_sum == groups * grouped_sum and stem == ["enc0.conv1"]
    record(4, ok, f"improved {n_imp:,} < baseline {n_base:,} parameters; grouped 3x3 weights "
                  f"{grouped_sum:,} x {groups} == dense {dense_sum:,} over {len(full_g)} stages "
                  f"(stem {stem} has 1 input channel, groups 1)")
    assert n_imp < n_base
    assert per_layer_exact
    assert dense_sum == groups * grouped_sum


# 5 ------------------------------------------------------------------------------------


def test_criterion_5_oracles():
    rng = np.random.default_rng(2024)
    miou_bad = 0
    for _ in range(1000):
        p, t = rng.integers(0, 2, (8, 8)), rng.integers(0, 2, (8, 8))
        miou_bad += miou(p, t) != miou_oracle(p, t)
    eq_bad = 0
    for _ in range(100):
        h, w = rng.integers(1, 64, size=2)
        img = rng.integers(0, 256, (h, w), dtype=np.uint8)
        eq_bad += not np.array_equal(equalize(img), lut_oracle(img))
    worked = equalize(np.array([[10, 10], [20, 30]], dtype=np.uint8))
    worked_ok = worked.ravel().tolist() == [128, 128, 191, 255]
    ok = miou_bad == 0 and eq_bad == 0 and worked_ok
    record(5, ok, f"mIoU mismatches {miou_bad}/1000, equalize mismatches {eq_bad}/100, "
                  f"[10,10,20,30] -> {worked.ravel().tolist()}")
    assert ok


# 6 ------------------------------------------------------------------------------------


def test_criterion_6_determinism_and_persistence(desk):
    lib_csv = desk["baseline"]["csv"].read_bytes()
    cli_run = desk["baseline_cli"]
    same_csv = cli_run["code"] == 0 and cli_run["csv"].read_bytes() == lib_csv

    model = desk["baseline"]["model"]
    path = desk["root"] / "baseline.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    rng = np.random.default_rng(6)
    identical = 0
    for _ in range(10):
        x = Tensor(rng.random((2, 1, SIZE, SIZE), dtype=np.float32))
        identical += np.array_equal(model(x).data, loaded(x).data)
    same_ckpt = cli_run["ckpt"].read_bytes() == path.read_bytes()
    ok = same_csv and identical == 10 and same_ckpt
    record(6, ok, f"metrics CSV of two seeded baseline runs byte-identical: {same_csv}; "
                  f"checkpoints byte-identical: {same_ckpt}; "
                  f"reloaded forward bit-identical on {identical}/10 batches")
    assert same_csv
    assert identical == 10
    assert same_ckpt


# 7 ------------------------------------------------------------------------------------


def test_criterion_7_degenerate_blocks():
    rng = np.random.default_rng(7)
    gs_equal = 0
    for _ in range(100):
        cin, cout = rng.integers(1, 6, size=2)
        p = GsconvParams(weight=Tensor(rng.standard_normal((cout, cin, 3, 3))),
                         bias=Tensor(rng.standard_normal(cout)), groups=1, shift=0,
                         proj_weight=Tensor(np.eye(cout)[:, :, None, None]))
        x = Tensor(rng.standard_normal((int(rng.integers(1, 3)), cin, 6, 6)))
        gs_equal += np.array_equal(gsconv_forward(x, p).data, ops.conv2d(x, p.weight, p.bias, padding=1).data)
    eca_exact = 0
    for _ in range(100):
        x = Tensor(rng.standard_normal((2, 5, 4, 4)) * 10)
        out = eca_forward(x, EcaParams(Tensor(np.zeros(3))))
        eca_exact += np.array_equal(out.data, x.data * np.float32(0.5))
    ok = gs_equal == 100 and eca_exact == 100
    record(7, ok, f"degenerate GSConv == conv2d bit-for-bit on {gs_equal}/100 inputs; "
                  f"zero-kernel ECA == 0.5 x on {eca_exact}/100 inputs")
    assert ok


# 8 ------------------------------------------------------------------------------------


def test_criterion_8_full_scale_smoke(tmp_path):
    root = os.environ.get("GSEUNET_FULL_SCALE_DATA")
    if not root:
        record(8, True, "optional, not gating: set GSEUNET_FULL_SCALE_DATA to a directory "
                        "with images/ and masks/ to run one full-scale (--preset paper) epoch", status="SKIP")
        pytest.skip("GSEUNET_FULL_SCALE_DATA not set")
    root = Path(root)
    csv = tmp_path / "full.csv"
    code = cli.main(["train", "--images", str(root / "images"), "--masks", str(root / "masks"),
                     "--variant", "improved", "--preset", "paper", "--epochs", "1",
                     "--out", str(tmp_path / "full.ckpt"), "--metrics", str(csv)])
    recs = read_metrics_csv(csv) if csv.exists() else []
    ok = code == 0 and len(recs) == 1 and all(math.isfinite(v) for v in
                                               (recs[0].train_loss, recs[0].val_loss, recs[0].val_miou))
    record(8, ok, f"one full-scale (--preset paper) epoch: exit {code}, rows {len(recs)}")
    assert ok
