import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grcvit.imgcore import (
    CorruptHeaderError,
    GrayImage,
    ImageReadError,
    RgbImage,
    SyntheticSpec,
    UnsupportedFormatError,
    generate,
    load_image,
    resize_bilinear,
    resize_rgb,
    save_png,
    save_pnm,
    textured_corpus,
    textured_rgb,
    to_grayscale,
)


def write(tmp_path, name, data: bytes):
    p = tmp_path / name
    p.write_bytes(data)
    return p


def test_ppm_all_white(tmp_path):
    p = write(tmp_path, "w.ppm", b"P6\n2 2\n255\n" + bytes([255] * 12))
    img = load_image(p)
    assert img.data.shape == (2, 2, 3)
    assert np.all(img.data == 1.0)


def test_pgm_single_black_pixel(tmp_path):
    p = write(tmp_path, "b.pgm", b"P5 1 1 255\n\x00")
    img = load_image(p)
    assert img.data.shape == (1, 1, 3)
    assert np.all(img.data == 0.0)


def test_ppm_channel_values(tmp_path):
    body = bytes([128, 64, 32] * 6)
    p = write(tmp_path, "c.ppm", b"P6\n# comment\n3 2\n255\n" + body)
    img = load_image(p)
    assert (img.width, img.height) == (3, 2)
    assert np.array_equal(img.data[1, 2], np.array([128, 64, 32]) / 255.0)


def test_maxval_scaling(tmp_path):
    p = write(tmp_path, "m.pgm", b"P5 2 1 15\n\x0f\x05")
    assert np.allclose(load_image(p).data[0, :, 0], [1.0, 5 / 15])


def test_read_errors_are_distinct(tmp_path):
    with pytest.raises(ImageReadError):
        load_image(tmp_path / "missing.ppm")
    with pytest.raises(UnsupportedFormatError):
        load_image(write(tmp_path, "x.bmp", b"BM\x00\x00garbage"))
    with pytest.raises(UnsupportedFormatError):
        load_image(write(tmp_path, "a.pgm", b"P2\n1 1\n255\n0\n"))
    with pytest.raises(CorruptHeaderError):
        load_image(write(tmp_path, "h.ppm", b"P6\n2 x\n255\n"))
    with pytest.raises(CorruptHeaderError):
        load_image(write(tmp_path, "t.ppm", b"P6\n2 2\n255\n\x00\x00"))


def test_pnm_and_png_roundtrip(tmp_path, rng):
    data = np.round(rng.uniform(size=(5, 7, 3)) * 255) / 255
    img = RgbImage(data)
    save_pnm(img, tmp_path / "a.ppm")
    save_png(img, tmp_path / "a.png")
    assert np.array_equal(load_image(tmp_path / "a.ppm").data, data)
    assert np.array_equal(load_image(tmp_path / "a.png").data, data)
    gray = GrayImage(data[:, :, 0])
    save_pnm(gray, tmp_path / "g.pgm")
    assert np.array_equal(load_image(tmp_path / "g.pgm").data[:, :, 1], data[:, :, 0])


def test_grayscale_examples():
    assert np.all(to_grayscale(RgbImage(np.ones((3, 3, 3)))).data == 1.0)
    assert np.all(to_grayscale(RgbImage(np.zeros((3, 3, 3)))).data == 0.0)
    red = np.zeros((1, 1, 3))
    red[0, 0, 0] = 1.0
    assert to_grayscale(RgbImage(red)).data[0, 0] == pytest.approx(0.299, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_grayscale_within_channel_range(seed):
    data = np.random.default_rng(seed).uniform(size=(4, 5, 3))
    gray = to_grayscale(RgbImage(data)).data
    assert np.all(gray >= data.min(axis=2)) and np.all(gray <= data.max(axis=2))


def test_resize_examples():
    const = GrayImage(np.full((5, 9), 0.5))
    assert np.allclose(resize_bilinear(const, 13, 4).data, 0.5)
    small = GrayImage(np.array([[0.1, 0.2], [0.3, 0.4]]))
    assert np.array_equal(resize_bilinear(small, 2, 2).data, small.data)
    row = GrayImage(np.array([[0.0, 1.0]]))
    assert np.allclose(resize_bilinear(row, 3, 1).data, [[0.0, 0.5, 1.0]])
    with pytest.raises(ValueError):
        resize_bilinear(small, 0, 2)


def test_resize_rgb_shape():
    img = textured_rgb(1, 3, 32)
    assert resize_rgb(img, 16, 8).data.shape == (8, 16, 3)


def test_generate_examples():
    assert np.all(generate(SyntheticSpec("constant", 8, 8, value=0.3)).data == 0.3)
    cb = generate(SyntheticSpec("checkerboard", 8, 8, period=1)).data[:4, :4]
    expect = np.array([[0, 1, 0, 1], [1, 0, 1, 0]] * 2, dtype=float)
    assert np.array_equal(cb, expect)
    a = generate(SyntheticSpec("uniform-noise", seed=7)).data
    b = generate(SyntheticSpec("uniform-noise", seed=7)).data
    assert np.array_equal(a, b)


def test_generators_are_pure_over_seeds():
    for seed in range(100):
        kind_class = seed % 3
        s = SyntheticSpec("textured-class", 16, 16, seed=seed, class_id=kind_class)
        assert np.array_equal(generate(s).data, generate(s).data)


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec("spiral")
    with pytest.raises(ValueError):
        SyntheticSpec("constant", 4, 4)
    with pytest.raises(ValueError):
        SyntheticSpec("textured-class", class_id=3)


def test_image_range_checked():
    with pytest.raises(ValueError):
        GrayImage(np.array([[1.5]]))
    with pytest.raises(ValueError):
        RgbImage(np.zeros((2, 2)))


def test_textured_corpus_layout():
    ids, images, labels = textured_corpus(2, size=16, seed=1)
    assert len(ids) == len(images) == 6 and len(set(ids)) == 6
    assert list(labels) == [0, 1, 2, 0, 1, 2]
