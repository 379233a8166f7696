import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from deoccl.imaging import (
    BinaryMask,
    BitDepthError,
    DecodeError,
    ImageTensor,
    MissingImageError,
    ShapeError,
    apply_occlusion,
    load_image,
    load_mask,
    resize_crop,
    save_image,
    save_mask,
)


def handmade_png(pixels, color_type=2, bit_depth=8):
    """Minimal PNG writer (no filtering) so decoding is checked against bytes
    we authored ourselves rather than Pillow's encoder."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape[:2]

    def chunk(tag, data):
        return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data))

    raw = b"".join(b"\x00" + pixels[y].tobytes() for y in range(h))
    ihdr = struct.pack(">IIBBBBB", w, h, bit_depth, color_type, 0, 0, 0)
    return b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr) + chunk(b"IDAT", zlib.compress(raw)) + chunk(b"IEND", b"")


def test_load_pixel_128_unit(tmp_path):
    p = tmp_path / "px.png"
    p.write_bytes(handmade_png([[[128, 0, 255]]]))
    img = load_image(p, "unit")
    assert img.data.shape == (3, 1, 1)
    assert img.data[0, 0, 0] == pytest.approx(128 / 255, abs=1e-7)
    assert img.data[1, 0, 0] == 0.0
    assert img.data[2, 0, 0] == 1.0


def test_load_endpoints_signed(tmp_path):
    p = tmp_path / "px.png"
    p.write_bytes(handmade_png([[[0, 255, 0]]]))
    img = load_image(p, "signed")
    assert img.data[:, 0, 0].tolist() == [-1.0, 1.0, -1.0]


def test_load_grayscale(tmp_path):
    p = tmp_path / "g.png"
    p.write_bytes(handmade_png([[0, 255], [128, 64]], color_type=0))
    img = load_image(p, "unit")
    assert img.channels == 1
    np.testing.assert_allclose(img.data[0], np.array([[0, 255], [128, 64]]) / 255, atol=1e-7)


def test_load_errors_are_distinct(tmp_path):
    with pytest.raises(MissingImageError):
        load_image(tmp_path / "nope.png")
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not a png at all")
    with pytest.raises(DecodeError):
        load_image(bad)
    deep = tmp_path / "deep.png"
    Image.fromarray(np.full((4, 4), 1000, dtype=np.uint16)).save(deep)
    with pytest.raises(BitDepthError):
        load_image(deep)


@pytest.mark.parametrize("range_tag", ["unit", "signed"])
@pytest.mark.parametrize("value", [0.0, 1.0])
def test_round_trip_constant(tmp_path, range_tag, value):
    lo = 0.0 if range_tag == "unit" else -1.0
    data = np.full((3, 8, 8), lo if value == 0.0 else 1.0, np.float32)
    save_image(ImageTensor(data, range_tag), tmp_path / "c.png")
    np.testing.assert_array_equal(load_image(tmp_path / "c.png", range_tag).data, data)


@pytest.mark.parametrize("range_tag", ["unit", "signed"])
def test_round_trip_random_within_quantization(tmp_path, range_tag):
    rng = np.random.default_rng(0)
    data = rng.uniform(0, 1, (3, 32, 48)).astype(np.float32)
    if range_tag == "signed":
        data = data * 2 - 1
    save_image(ImageTensor(data, range_tag), tmp_path / "r.png")
    back = load_image(tmp_path / "r.png", range_tag).data
    unit_err = np.abs(back - data) / (1.0 if range_tag == "unit" else 2.0)
    assert unit_err.max() <= 1 / 255


def test_save_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(Exception):
        save_image(ImageTensor(np.zeros((3, 8, 8), np.float32), "unit"), blocker / "sub" / "a.png")


def test_image_tensor_invariants():
    with pytest.raises(ValueError):
        ImageTensor(np.full((3, 8, 8), 1.5, np.float32), "unit")
    with pytest.raises(ShapeError):
        ImageTensor(np.zeros((2, 8, 8), np.float32), "unit")
    with pytest.raises(ShapeError):
        ImageTensor(np.zeros((3, 10, 8), np.float32), "unit").check_network_shape()


def test_mask_file_interface(tmp_path):
    m = np.zeros((1, 8, 8), np.float32)
    m[:, 2:5, 3:7] = 1
    save_mask(BinaryMask(m), tmp_path / "m.png")
    np.testing.assert_array_equal(load_mask(tmp_path / "m.png").data, m)
    Image.fromarray(np.full((8, 8), 128, np.uint8), mode="L").save(tmp_path / "grey.png")
    with pytest.raises(DecodeError):
        load_mask(tmp_path / "grey.png")


def test_resize_identity():
    rng = np.random.default_rng(1)
    img = ImageTensor(rng.uniform(-1, 1, (3, 256, 256)).astype(np.float32))
    np.testing.assert_array_equal(resize_crop(img, 256).data, img.data)


def test_resize_capture_resolution_centre_crop():
    # 1280x720 capture: centred 720x720 crop scaled to 256
    img = np.zeros((3, 720, 1280), np.float32)
    img[:, :, 280:1000] = 1.0  # exactly the central square
    out = resize_crop(ImageTensor(img, "unit"), 256)
    assert out.data.shape == (3, 256, 256)
    np.testing.assert_array_equal(out.data, np.ones((3, 256, 256), np.float32))


def test_resize_face_box_and_errors():
    img = ImageTensor(np.zeros((3, 40, 60), np.float32), "unit")
    assert resize_crop(img, 16, face_box=(10, 5, 42, 37)).data.shape == (3, 16, 16)
    with pytest.raises(ShapeError):
        resize_crop(img, 16, face_box=(50, 0, 70, 20))
    with pytest.raises(ShapeError):
        resize_crop(img, 64, allow_upscale=False)


@settings(max_examples=25, deadline=None)
@given(value=st.floats(-1, 1, width=32), target=st.sampled_from([8, 12, 32, 64]))
def test_resize_constant(value, target):
    img = ImageTensor(np.full((3, 30, 50), value, np.float32))
    out = resize_crop(img, target)
    np.testing.assert_array_equal(out.data, np.full((3, target, target), value, np.float32))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16), target=st.sampled_from([8, 16, 24, 48]))
def test_resize_preserves_range(seed, target):
    rng = np.random.default_rng(seed)
    data = rng.uniform(-0.7, 0.4, (3, 37, 29)).astype(np.float32)
    out = resize_crop(ImageTensor(data), target).data
    assert out.min() >= data.min() and out.max() <= data.max()


def _half_mask(h=8, w=8):
    m = np.zeros((1, h, w), np.float32)
    m[:, :, : w // 2] = 1
    return BinaryMask(m)


def test_apply_occlusion_examples():
    rng = np.random.default_rng(2)
    gt = ImageTensor(rng.uniform(-1, 1, (3, 8, 8)).astype(np.float32))
    zero = BinaryMask(np.zeros((1, 8, 8), np.float32))
    ones = BinaryMask(np.ones((1, 8, 8), np.float32))
    np.testing.assert_array_equal(apply_occlusion(gt, zero, 0.0).data, gt.data)
    np.testing.assert_array_equal(apply_occlusion(gt, ones, 0.0).data, 0.0)
    out = apply_occlusion(gt, _half_mask(), 0.0).data
    for c in range(3):
        for y in range(8):
            for x in range(8):
                assert out[c, y, x] == (0.0 if x < 4 else gt.data[c, y, x])
    with pytest.raises(ShapeError):
        apply_occlusion(gt, _half_mask(8, 12))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), fill=st.floats(-1, 1, width=32))
def test_apply_occlusion_idempotent_and_local(seed, fill):
    rng = np.random.default_rng(seed)
    gt = ImageTensor(rng.uniform(-1, 1, (3, 12, 12)).astype(np.float32))
    mask = BinaryMask((rng.uniform(size=(1, 12, 12)) < 0.4).astype(np.float32))
    once = apply_occlusion(gt, mask, fill)
    np.testing.assert_array_equal(apply_occlusion(once, mask, fill).data, once.data)
    visible = mask.data[0] == 0
    np.testing.assert_array_equal(once.data[:, visible], gt.data[:, visible])
