import struct
import warnings

import numpy as np
import pytest
from PIL import Image

from gseunet.blocks import ModelConfig, build_model
from gseunet.data_io import (
    CSV_HEADER, MAGIC, SamplePair, UnmatchedFileWarning, checkpoint_bytes, checkpoint_from_bytes,
    format_metrics_csv, generate_synthetic_dataset, load_checkpoint, load_image, load_rgb,
    pair_dataset, read_metrics_csv, save_checkpoint, save_image, write_dataset, write_metrics_csv,
)
from gseunet.errors import (
    BadMagicError, CheckpointMismatchError, DataError, EmptyDatasetError, ImageDecodeError,
    ImageFormatError, ImageNotFoundError, TruncatedCheckpointError, UnsupportedDepthError,
    VersionMismatchError,
)
from gseunet.tensor import Tensor
from gseunet.training import MetricRecord


# images ------------------------------------------------------------------------------


def test_gray_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (16, 16), dtype=np.uint8)
    save_image(img, tmp_path / "a.png")
    np.testing.assert_array_equal(load_image(tmp_path / "a.png"), img)


def test_rgb_input_goes_through_luma(tmp_path):
    rgb = np.zeros((2, 2, 3), dtype=np.uint8)
    rgb[..., 0] = 255
    Image.fromarray(rgb, mode="RGB").save(tmp_path / "red.png")
    np.testing.assert_array_equal(load_image(tmp_path / "red.png"), np.full((2, 2), 76))
    np.testing.assert_array_equal(load_rgb(tmp_path / "red.png"), rgb)


def test_missing_file(tmp_path):
    with pytest.raises(ImageNotFoundError):
        load_image(tmp_path / "nope.png")
    assert not (tmp_path / "nope.png").exists()


def test_sixteen_bit_rejected(tmp_path):
    Image.fromarray(np.full((4, 4), 40000, dtype=np.uint16)).save(tmp_path / "deep.png")
    with pytest.raises(UnsupportedDepthError, match="16"):
        load_image(tmp_path / "deep.png")


def test_garbage_file(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not a png at all")
    with pytest.raises(ImageDecodeError):
        load_image(tmp_path / "bad.png")


def test_non_png_rejected(tmp_path):
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(tmp_path / "x.bmp", format="BMP")
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "x.bmp")


# pairing ---------------------------------------------------------------------------


def _write_pair_dirs(root, images, masks, size=(8, 8), mask_size=None):
    (root / "images").mkdir()
    (root / "masks").mkdir()
    for stem in images:
        save_image(np.full(size, 50, np.uint8), root / "images" / f"{stem}.png")
    for stem in masks:
        m = np.zeros(mask_size or size, np.uint8)
        m[:2] = 255
        save_image(m, root / "masks" / f"{stem}.png")
    return root / "images", root / "masks"


def test_pairing_warns_and_skips(tmp_path):
    imgs, masks = _write_pair_dirs(tmp_path, ["a", "b"], ["a"])
    with pytest.warns(UnmatchedFileWarning, match="b.png"):
        pairs = pair_dataset(imgs, masks)
    assert [p.id for p in pairs] == ["a"]
    assert set(np.unique(pairs[0].mask)) == {0, 1}


def test_pairing_is_sorted(tmp_path):
    imgs, masks = _write_pair_dirs(tmp_path, ["c", "a", "b"], ["b", "c", "a"])
    assert [p.id for p in pair_dataset(imgs, masks)] == ["a", "b", "c"]


def test_pairing_dimension_mismatch(tmp_path):
    imgs, masks = _write_pair_dirs(tmp_path, ["a"], ["a"], size=(64, 64), mask_size=(32, 32))
    with pytest.raises(DataError, match="dimensions differ"):
        pair_dataset(imgs, masks)


def test_pairing_empty(tmp_path):
    imgs, masks = _write_pair_dirs(tmp_path, ["a"], ["b"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(EmptyDatasetError):
            pair_dataset(imgs, masks)


def test_sample_pair_invariant():
    with pytest.raises(DataError):
        SamplePair("x", np.zeros((4, 4), np.uint8), np.zeros((4, 2), np.uint8))


# checkpoints ------------------------------------------------------------------------


@pytest.fixture
def small_model():
    return build_model(ModelConfig(variant="improved", input_size=8, depth=1, base_channels=4, groups=2), seed=4)


def test_checkpoint_round_trip_forward(tmp_path, small_model, rng):
    save_checkpoint(small_model, tmp_path / "m.ckpt")
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    assert loaded.config == small_model.config
    x = Tensor(rng.random((3, 1, 8, 8)))
    np.testing.assert_array_equal(loaded(x).data, small_model(x).data)


def test_checkpoint_bytes_round_trip(small_model):
    raw = checkpoint_bytes(small_model)
    assert raw[:4] == MAGIC
    assert checkpoint_bytes(checkpoint_from_bytes(raw)) == raw


def test_checkpoint_header_layout(small_model):
    raw = checkpoint_bytes(small_model)
    version, cfg_len = struct.unpack_from("<II", raw, 4)
    assert version == 1
    assert raw[12:12 + cfg_len].decode() == small_model.config.to_json()
    (count,) = struct.unpack_from("<I", raw, 12 + cfg_len)
    assert count == len(small_model.params)


def test_bad_magic(small_model):
    raw = checkpoint_bytes(small_model)
    with pytest.raises(BadMagicError):
        checkpoint_from_bytes(b"XXXX" + raw[4:])


def test_version_mismatch(small_model):
    raw = bytearray(checkpoint_bytes(small_model))
    raw[4:8] = struct.pack("<I", 99)
    with pytest.raises(VersionMismatchError):
        checkpoint_from_bytes(bytes(raw))


@pytest.mark.parametrize("cut", [2, 10, 100, -1])
def test_truncation(small_model, cut):
    raw = checkpoint_bytes(small_model)
    with pytest.raises(TruncatedCheckpointError):
        checkpoint_from_bytes(raw[:cut])


def test_trailing_bytes(small_model):
    with pytest.raises(CheckpointMismatchError):
        checkpoint_from_bytes(checkpoint_bytes(small_model) + b"\0")


def test_config_shape_disagreement(small_model):
    other = build_model(ModelConfig(variant="improved", input_size=8, depth=1, base_channels=4, groups=1), seed=4)
    raw = checkpoint_bytes(small_model)
    other_raw = checkpoint_bytes(other)
    cfg_len = struct.unpack_from("<I", raw, 8)[0]
    other_len = struct.unpack_from("<I", other_raw, 8)[0]
    # splice the other config in front of this model's tensors
    spliced = other_raw[:12 + other_len] + raw[12 + cfg_len:]
    with pytest.raises(CheckpointMismatchError):
        checkpoint_from_bytes(spliced)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "absent.ckpt")


# metrics CSV --------------------------------------------------------------------------


def test_csv_single_record():
    text = format_metrics_csv([MetricRecord(1, 0.5, 0.6, 0.3)])
    assert text == f"{CSV_HEADER}\n1,0.500000,0.600000,0.300000\n"


def test_csv_fifty_rows_and_round_trip(tmp_path, rng):
    recs = [MetricRecord(e, *map(float, rng.random(3))) for e in range(1, 51)]
    write_metrics_csv(recs, tmp_path / "m.csv")
    first = (tmp_path / "m.csv").read_bytes()
    assert len(first.decode().splitlines()) == 51
    write_metrics_csv(recs, tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_bytes() == first
    back = read_metrics_csv(tmp_path / "m.csv")
    for a, b in zip(recs, back):
        assert b.epoch == a.epoch
        assert b.train_loss == round(a.train_loss, 6)
        assert b.val_miou == round(a.val_miou, 6)


def test_csv_unwritable(tmp_path):
    with pytest.raises(DataError, match="missing_dir"):
        write_metrics_csv([MetricRecord(1, 0, 0, 0)], tmp_path / "missing_dir" / "m.csv")


# synthetic data ------------------------------------------------------------------------


def test_synthetic_properties():
    pairs = generate_synthetic_dataset(30, 64, seed=0)
    for p in pairs:
        frac = p.mask.mean()
        assert 0 < frac < 0.5
        assert p.image[p.mask == 1].mean() > p.image[p.mask == 0].mean()
    again = generate_synthetic_dataset(30, 64, seed=0)
    for a, b in zip(pairs, again):
        assert a.id == b.id
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)


def test_write_then_pair(tmp_path):
    pairs = generate_synthetic_dataset(4, 16, seed=1)
    assert write_dataset(pairs, tmp_path) == 4
    back = pair_dataset(tmp_path / "images", tmp_path / "masks")
    for a, b in zip(pairs, back):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)
