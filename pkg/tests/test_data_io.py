import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from castream.checkpoint import (MAGIC, decode_checkpoint, encode_checkpoint, load_model, read_checkpoint,
                                 save_model, write_checkpoint)
from castream.dataset import CLASS_NAMES, generate_dataset, load_dataset, save_dataset
from castream.errors import (BadMagicError, CheckpointError, DigestMismatchError, DomainError, FormatError,
                             ShapeError, TruncatedCheckpointError)
from castream.formats import (decode_pnm, encode_pnm, hwc_to_image, image_to_hwc, overlay, read_pgm, read_ppm,
                              to_uint8, write_pgm, write_ppm)

from conftest import tiny_backbone, tiny_stream


# ----------------------------------------------------------------------------- synthetic dataset


def test_dataset_is_deterministic():
    a, b = generate_dataset(16, seed=3), generate_dataset(16, seed=3)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.masks.tobytes() == b.masks.tobytes()
    assert np.array_equal(a.labels, b.labels)
    c = generate_dataset(16, seed=4)
    assert a.images.tobytes() != c.images.tobytes()


@pytest.mark.parametrize("n", [4, 5, 11, 40])
def test_dataset_balance_and_coverage(n):
    ds = generate_dataset(n, seed=n)
    counts = np.bincount(ds.labels, minlength=4)
    assert counts.max() - counts.min() <= 1
    cov = ds.masks.mean(axis=(1, 2))
    assert np.all(cov >= 0.04) and np.all(cov <= 0.40)
    assert ds.images.shape == (n, 3, 32, 32) and ds.images.dtype == np.float32
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    # images are exactly representable as 8-bit pixels
    assert np.array_equal(hwc_to_image(image_to_hwc(ds.images[0])), ds.images[0])


def test_dataset_errors():
    with pytest.raises(DomainError):
        generate_dataset(3, seed=0)
    with pytest.raises(DomainError):
        generate_dataset(10, seed=0, num_classes=9)


def test_dataset_round_trip(tmp_path, small_data):
    save_dataset(small_data, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.images.tobytes() == small_data.images.tobytes()
    assert np.array_equal(back.masks, small_data.masks)
    assert np.array_equal(back.labels, small_data.labels)
    rows = (tmp_path / "d" / "labels.csv").read_text().splitlines()
    assert rows[0] == "index,label,class"
    assert rows[1].split(",")[2] == CLASS_NAMES[small_data.labels[0]]


def test_missing_dataset(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nothing")


# ----------------------------------------------------------------------------- PPM / PGM


def test_white_pixel_round_trip(tmp_path):
    px = np.full((1, 1, 3), 255, np.uint8)
    write_ppm(tmp_path / "w.ppm", px)
    assert (tmp_path / "w.ppm").read_bytes() == b"P6\n1 1\n255\n\xff\xff\xff"
    assert np.array_equal(read_ppm(tmp_path / "w.ppm"), px)


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3]))))
def test_pnm_round_trip(px):
    px = px[..., 0] if px.shape[2] == 1 else px
    data = encode_pnm(px)
    back = decode_pnm(data)
    assert np.array_equal(back, px)
    assert encode_pnm(back) == data


def test_pnm_header_comments_and_whitespace():
    data = b"P5 # grey\n# size follows\n2\t1\r\n255\n\x00\x80"
    assert decode_pnm(data).tolist() == [[0, 128]]


def test_pnm_rejections():
    with pytest.raises(FormatError, match="maxval"):
        decode_pnm(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(FormatError, match="magic"):
        decode_pnm(b"P3\n1 1\n255\n0 0 0")
    with pytest.raises(FormatError, match="byte"):
        decode_pnm(b"P6\n2 2\n255\n\x00\x00\x00")
    with pytest.raises(FormatError):
        decode_pnm(b"P6\n2 x\n255\n")
    with pytest.raises(FormatError):
        decode_pnm(b"P6\n2")


def test_pnm_kind_checks(tmp_path):
    write_pgm(tmp_path / "g.pgm", np.zeros((2, 2), np.uint8))
    with pytest.raises(FormatError):
        read_ppm(tmp_path / "g.pgm")
    write_ppm(tmp_path / "c.ppm", np.zeros((2, 2, 3), np.uint8))
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "c.ppm")


def test_pgm_quantization():
    v = np.array([0.0, 0.5, 1 / 255, 0.999, 1.0, 2.0, -1.0])
    assert to_uint8(v).tolist() == [0, 128, 1, 255, 255, 255, 0]


def test_overlay_colors():
    img = np.random.default_rng(0).uniform(0, 1, (3, 4, 5))
    zero = overlay(img, np.zeros((4, 5)))
    one = overlay(img, np.ones((4, 5)))
    assert zero.shape == img.shape
    np.testing.assert_allclose(zero, 0.5 * img + 0.5 * np.array([0, 0, 1.0])[:, None, None])
    np.testing.assert_allclose(one, 0.5 * img + 0.5 * np.array([1.0, 0, 0])[:, None, None])
    with pytest.raises(ShapeError):
        overlay(img, np.zeros((5, 4)))


# ----------------------------------------------------------------------------- checkpoints


@pytest.fixture
def model_file(tmp_path):
    bb = tiny_backbone(dtype=np.float32)
    st_ = tiny_stream(bb, variant="projected", class_mode="specific", start_stage=1)
    path = tmp_path / "m.cast"
    data = save_model(path, bb, st_, extra={"note": "x"})
    return path, data, bb, st_


def test_checkpoint_round_trip(model_file, tmp_path):
    path, data, bb, st_ = model_file
    bb2, st2, header = load_model(path)
    assert header["kind"] == "backbone+stream" and header["note"] == "x"
    assert bb2.param_digest() == bb.param_digest()
    assert st2.param_digest() == st_.param_digest()
    assert st2.config == st_.config
    again = save_model(tmp_path / "again.cast", bb2, st2, extra={"note": "x"})
    assert again == data


def test_checkpoint_structure(model_file):
    _, data, bb, st_ = model_file
    assert data[:5] == MAGIC
    (hlen,) = struct.unpack("<I", data[5:9])
    header = json.loads(data[9:9 + hlen])
    assert header["digest"] and header["format_version"] == 1
    (count,) = struct.unpack("<I", data[9 + hlen:13 + hlen])
    assert count == len(bb.params) + len(st_.params)


def test_checkpoint_errors(model_file):
    _, data, _, _ = model_file
    with pytest.raises(BadMagicError) as e:
        decode_checkpoint(b"CAST2" + data[5:])
    assert e.value.exit_code == 3
    flipped = bytearray(data)
    flipped[-3] ^= 0x01
    with pytest.raises(DigestMismatchError) as e:
        decode_checkpoint(bytes(flipped))
    assert e.value.exit_code == 5
    with pytest.raises(TruncatedCheckpointError) as e:
        decode_checkpoint(data[:-7])
    assert e.value.exit_code == 3 and "byte" in str(e.value)
    with pytest.raises(CheckpointError):
        decode_checkpoint(data + b"\x00")


def test_checkpoint_unknown_header_keys(tmp_path):
    params = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.float32(2.5) * np.ones(1, np.float32)}
    data = encode_checkpoint(params, {"future_field": {"nested": [1, 2]}})
    header, back = decode_checkpoint(data)
    assert header["future_field"] == {"nested": [1, 2]}
    assert np.array_equal(back["a"], params["a"])
    path = tmp_path / "p.cast"
    assert write_checkpoint(path, params) == path.read_bytes()
    assert np.array_equal(read_checkpoint(path)[1]["b"], params["b"])


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 5)),
              elements=st.floats(width=32, allow_nan=False)))
def test_checkpoint_bit_exact(arr):
    _, back = decode_checkpoint(encode_checkpoint({"w": arr}))
    assert back["w"].tobytes() == arr.astype("<f4").tobytes()
