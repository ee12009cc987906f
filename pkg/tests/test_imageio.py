import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from physrelight import imageio


def test_pfm_single_pixel_roundtrip(tmp_path):
    img = np.full((1, 1, 3), 0.5, dtype=np.float32)
    path = tmp_path / "a.pfm"
    imageio.save_pfm(img, path)
    out = imageio.load_pfm(path)
    assert out.shape == (1, 1, 3)
    assert out.dtype == np.float32
    np.testing.assert_array_equal(out, img)


def test_pfm_gray_magic(tmp_path):
    path = tmp_path / "g.pfm"
    imageio.save_pfm(np.full((1, 1, 1), 0.25, np.float32), path)
    raw = path.read_bytes()
    assert raw.startswith(b"Pf\n1 1\n-1.0\n")
    assert imageio.load_pfm(path)[0, 0, 0] == np.float32(0.25)


def test_pfm_hand_built_little_endian_fixture(tmp_path):
    # 2x2 color file, negative scale, payload rows stored bottom-up
    bottom = [1, 2, 3, 4, 5, 6]
    top = [7, 8, 9, 10, 11, 12]
    raw = b"PF\n2 2\n-1.0\n" + struct.pack("<12f", *(bottom + top))
    path = tmp_path / "fixture.pfm"
    path.write_bytes(raw)
    img = imageio.load_pfm(path)
    np.testing.assert_array_equal(img[0].ravel(), top)
    np.testing.assert_array_equal(img[1].ravel(), bottom)


def test_pfm_big_endian_fixture(tmp_path):
    raw = b"Pf\n2 1\n1.0\n" + struct.pack(">2f", 0.125, -3.5)
    path = tmp_path / "be.pfm"
    path.write_bytes(raw)
    np.testing.assert_array_equal(imageio.load_pfm(path)[..., 0], [[0.125, -3.5]])


def test_pfm_file_size(tmp_path):
    path = tmp_path / "s.pfm"
    imageio.save_pfm(np.zeros((2, 3, 3), np.float32), path)
    header = len(b"PF\n3 2\n-1.0\n")
    assert path.stat().st_size == header + 2 * 3 * 3 * 4


def test_pfm_writer_is_little_endian_bottom_up(tmp_path):
    img = np.arange(6, dtype=np.float32).reshape(2, 3, 1)
    path = tmp_path / "w.pfm"
    imageio.save_pfm(img, path)
    payload = path.read_bytes()[len(b"Pf\n3 2\n-1.0\n"):]
    assert struct.unpack("<6f", payload) == (3, 4, 5, 0, 1, 2)


@pytest.mark.parametrize(
    "raw, where",
    [
        (b"P6\n1 1\n-1.0\n" + b"\0" * 12, 0),
        (b"PF\n1 x\n-1.0\n" + b"\0" * 12, 5),
        (b"PF\n1 1\nabc\n" + b"\0" * 12, 7),
        (b"PF\n1 1\n-1.0\n" + b"\0" * 8, 20),
        (b"PF\n1 1\n", 7),
    ],
)
def test_pfm_malformed_reports_offset(tmp_path, raw, where):
    path = tmp_path / "bad.pfm"
    path.write_bytes(raw)
    with pytest.raises(imageio.PFMFormatError) as info:
        imageio.load_pfm(path)
    assert info.value.offset == where
    assert f"byte offset {where}" in str(info.value)


def test_pfm_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        imageio.save_pfm(np.zeros((1, 1, 3)), tmp_path / "missing" / "x.pfm")


def test_save_rejects_two_channels(tmp_path):
    with pytest.raises(ValueError):
        imageio.save_pfm(np.zeros((2, 2, 2)), tmp_path / "x.pfm")


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6), st.sampled_from([1, 3])),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_pfm_roundtrip_bit_exact(tmp_path_factory, img):
    path = tmp_path_factory.mktemp("rt") / "x.pfm"
    imageio.save_pfm(img, path)
    out = imageio.load_pfm(path)
    assert out.tobytes() == np.ascontiguousarray(img).tobytes()


def test_srgb_endpoints_and_knee():
    assert imageio.linear_to_srgb(0.0) == 0.0
    assert imageio.linear_to_srgb(1.0) == pytest.approx(1.0, abs=1e-12)
    # both branches meet at the knee
    lin_branch = 12.92 * 0.0031308
    pow_branch = 1.055 * 0.0031308 ** (1 / 2.4) - 0.055
    assert abs(lin_branch - pow_branch) < 1e-7
    assert imageio.linear_to_srgb(0.0031308) == pytest.approx(0.04045, abs=1e-6)
    assert imageio.srgb_to_linear(0.04045) == pytest.approx(0.0031308, abs=1e-7)
    assert imageio.srgb_to_linear(0.0) == 0.0
    assert imageio.srgb_to_linear(1.0) == pytest.approx(1.0, abs=1e-12)


def test_srgb_clamps_internally():
    assert imageio.linear_to_srgb(-0.5) == 0.0
    assert imageio.linear_to_srgb(3.0) == pytest.approx(1.0)


def test_srgb_roundtrip_random(rng):
    x = rng.uniform(0, 1, 1000)
    assert np.max(np.abs(imageio.srgb_to_linear(imageio.linear_to_srgb(x)) - x)) <= 1e-6


def test_png_values(tmp_path):
    for val, expected in ((0.0, 0), (1.0, 255), (0.5, 188)):
        path = tmp_path / f"v{val}.png"
        imageio.save_png_srgb(np.full((2, 2, 3), val, np.float32), path)
        px = np.asarray(Image.open(path))
        assert px.shape == (2, 2, 3)
        assert np.all(px == expected)


def test_png_gray_and_clamp(tmp_path):
    path = tmp_path / "g.png"
    imageio.save_png_srgb(np.array([[[-1.0], [2.0]]], np.float32), path)
    im = Image.open(path)
    assert im.mode == "L"
    np.testing.assert_array_equal(np.asarray(im), [[0, 255]])


def _checker(h, w):
    ys, xs = np.mgrid[0:h, 0:w]
    return (((ys // 2) + (xs // 2)) % 2).astype(np.float32)[..., None]


def test_crop_identity_and_corners():
    img = _checker(8, 10)
    np.testing.assert_array_equal(imageio.crop(img, 0, 0, 10, 8), img)
    c = imageio.crop(img, 3, 1, 4, 5)
    assert c.shape == (5, 4, 1)
    # top-left pixel (x=3, y=1) is in block (0, 1) -> 1; bottom-right (x=6, y=5) in block (2, 3) -> 1
    assert c[0, 0, 0] == 1.0
    assert c[-1, -1, 0] == 1.0
    # (x=4, y=1) sits in block (0, 2) -> 0
    assert c[0, 1, 0] == 0.0


def test_crop_out_of_bounds():
    img = np.zeros((4, 4, 3))
    for args in ((0, 0, 5, 4), (-1, 0, 2, 2), (3, 3, 2, 2), (0, 0, 0, 1)):
        with pytest.raises(ValueError):
            imageio.crop(img, *args)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 3), st.integers(0, 3), st.integers(0, 2), st.integers(0, 2))
def test_crop_composes_by_offset(x0, y0, x1, y1):
    img = np.arange(10 * 9 * 3, dtype=np.float32).reshape(10, 9, 3)
    a = imageio.crop(imageio.crop(img, x0, y0, 5, 6), x1, y1, 3, 4)
    b = imageio.crop(img, x0 + x1, y0 + y1, 3, 4)
    np.testing.assert_array_equal(a, b)


def test_flip_involution_and_direction(rng):
    img = rng.normal(size=(5, 7, 3)).astype(np.float32)
    for ax in ("h", "v", "horizontal", "vertical"):
        np.testing.assert_array_equal(imageio.flip(imageio.flip(img, ax), ax), img)
    np.testing.assert_array_equal(imageio.flip(img, "h")[:, 0], img[:, -1])
    np.testing.assert_array_equal(imageio.flip(img, "v")[0], img[-1])
    with pytest.raises(ValueError):
        imageio.flip(img, "d")


def test_as_raster_and_clamp():
    r = imageio.as_raster(np.ones((2, 3)))
    assert r.shape == (2, 3, 1) and r.dtype == np.float32
    with pytest.raises(ValueError):
        imageio.as_raster(np.ones((2, 3, 4)))
    c = imageio.clamp01(np.array([-1.0, 0.5, 2.0]))
    np.testing.assert_array_equal(c, [0.0, 0.5, 1.0])
