"""Image loading, grayscale conversion, resizing and synthetic images.

All intensities live in [0, 1] as float64. Arrays are stored row-major as
(height, width) for gray images and (height, width, 3) for RGB.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
MIN_SYNTHETIC_SIDE = 8

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageError(Exception):
    """Base class for image decoding failures."""


class ImageReadError(ImageError):
    pass


class UnsupportedFormatError(ImageError):
    pass


class CorruptHeaderError(ImageError):
    pass


@dataclass(frozen=True)
class RgbImage:
    data: np.ndarray  # (H, W, 3)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"RgbImage expects (H, W, 3) data, got {arr.shape}")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("RgbImage channel values must lie in [0, 1]")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class GrayImage:
    data: np.ndarray  # (H, W)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"GrayImage expects (H, W) data, got {arr.shape}")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("GrayImage values must lie in [0, 1]")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def to_rgb(self) -> RgbImage:
        return RgbImage(np.repeat(self.data[:, :, None], 3, axis=2))


SYNTHETIC_KINDS = ("constant", "checkerboard", "step-edge", "uniform-noise", "textured-class")


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a deterministic synthetic gray image.

    ``value`` is the fill level of ``constant``; ``period`` the cell size of
    ``checkerboard``; ``seed`` drives the random kinds; ``class_id`` picks
    one of the three texture classes of ``textured-class``.
    """

    kind: str
    width: int = 64
    height: int = 64
    period: int = 1
    seed: int = 0
    class_id: int = 0
    value: float = 0.5
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in SYNTHETIC_KINDS:
            raise ValueError(f"unknown synthetic kind {self.kind!r}; expected one of {SYNTHETIC_KINDS}")
        if self.width < MIN_SYNTHETIC_SIDE or self.height < MIN_SYNTHETIC_SIDE:
            raise ValueError(f"synthetic images need width, height >= {MIN_SYNTHETIC_SIDE}")
        if self.period < 1:
            raise ValueError("period must be >= 1")
        if self.kind == "textured-class" and self.class_id not in (0, 1, 2):
            raise ValueError("textured-class expects class_id in {0, 1, 2}")
        if not 0.0 <= self.value <= 1.0:
            raise ValueError("constant value must lie in [0, 1]")


# ---------------------------------------------------------------------------
# Decoding


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise CorruptHeaderError("truncated PNM header")
    return buf[start:pos], pos


def _decode_pnm(buf: bytes) -> RgbImage:
    magic = buf[:2]
    if magic in (b"P1", b"P2", b"P3", b"P4"):
        raise UnsupportedFormatError(f"only binary PGM (P5) and PPM (P6) are supported, got {magic.decode()}")
    channels = 1 if magic == b"P5" else 3
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise CorruptHeaderError(f"non-numeric PNM header field {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise CorruptHeaderError(f"invalid PNM dimensions {width}x{height}")
    if not 1 <= maxval <= 255:
        if maxval > 255:
            raise UnsupportedFormatError("16-bit PNM is not supported")
        raise CorruptHeaderError(f"invalid PNM maxval {maxval}")
    # exactly one whitespace byte separates the header from the raster
    pos += 1
    expected = width * height * channels
    raster = buf[pos:pos + expected]
    if len(raster) != expected:
        raise CorruptHeaderError(f"PNM raster holds {len(raster)} bytes, header promises {expected}")
    arr = np.frombuffer(raster, dtype=np.uint8).astype(np.float64) / maxval
    arr = arr.reshape(height, width, channels)
    if channels == 1:
        arr = np.repeat(arr, 3, axis=2)
    return RgbImage(arr)


def _decode_png(buf: bytes) -> RgbImage:
    try:
        with Image.open(io.BytesIO(buf)) as im:
            im.load()
            if im.mode in ("I", "I;16", "I;16B", "F"):
                raise UnsupportedFormatError(f"PNG mode {im.mode} is not 8-bit")
            rgb = im.convert("RGB")
    except UnsupportedFormatError:
        raise
    except Exception as exc:  # Pillow signals header damage with assorted types
        raise CorruptHeaderError(f"corrupt PNG: {exc}") from exc
    return RgbImage(np.asarray(rgb, dtype=np.float64) / 255.0)


def load_image(path) -> RgbImage:
    """Decode a PNG or binary PGM/PPM file into an RGB image in [0, 1]."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ImageReadError(f"cannot read {path}: {exc}") from exc
    if buf.startswith(PNG_SIGNATURE):
        return _decode_png(buf)
    if len(buf) >= 2 and buf[:1] == b"P" and buf[1:2] in b"123456":
        return _decode_pnm(buf)
    raise UnsupportedFormatError(f"{path}: not a PNG or PNM file")


def _to_bytes(data: np.ndarray) -> bytes:
    return np.clip(np.rint(data * 255.0), 0, 255).astype(np.uint8).tobytes()


def save_pnm(img, path) -> None:
    """Write a GrayImage as binary PGM or an RgbImage as binary PPM."""
    magic = b"P5" if isinstance(img, GrayImage) else b"P6"
    header = b"%s\n%d %d\n255\n" % (magic, img.width, img.height)
    Path(path).write_bytes(header + _to_bytes(img.data))


def save_png(img, path) -> None:
    arr = np.clip(np.rint(img.data * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L" if arr.ndim == 2 else "RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# Pixel operations


def to_grayscale(img: RgbImage) -> GrayImage:
    data = img.data
    luma = data @ LUMA_WEIGHTS
    # keep each pixel inside its channel range despite rounding
    luma = np.clip(luma, data.min(axis=2), data.max(axis=2))
    return GrayImage(luma)


def _axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def resize_bilinear(img: GrayImage, width: int, height: int) -> GrayImage:
    """Bilinear resize with corner-aligned sampling."""
    if width < 1 or height < 1:
        raise ValueError(f"target size must be positive, got {width}x{height}")
    if (width, height) == (img.width, img.height):
        return GrayImage(img.data.copy())
    y0, y1, fy = _axis_coords(img.height, height)
    x0, x1, fx = _axis_coords(img.width, width)
    d = img.data
    top = d[y0][:, x0] * (1 - fx) + d[y0][:, x1] * fx
    bot = d[y1][:, x0] * (1 - fx) + d[y1][:, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return GrayImage(np.clip(out, 0.0, 1.0))


def resize_rgb(img: RgbImage, width: int, height: int) -> RgbImage:
    chans = [resize_bilinear(GrayImage(img.data[:, :, c]), width, height).data for c in range(3)]
    return RgbImage(np.stack(chans, axis=2))


# ---------------------------------------------------------------------------
# Synthetic images


def _blob_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    # one or two flat ellipses on a flat background: few levels, few edges
    bg = rng.uniform(0.1, 0.4)
    out = np.full((h, w), bg)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(rng.integers(1, 3)):
        cy, cx = rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w
        ry, rx = rng.uniform(0.15, 0.3) * h, rng.uniform(0.15, 0.3) * w
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        out[inside] = rng.uniform(0.6, 0.9)
    return out


def _medium_texture_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    # smoothed noise (correlation length ~1.5 px) quantised to 16 levels
    noise = ndimage.gaussian_filter(rng.normal(size=(h, w)), rng.uniform(1.2, 1.8), mode="wrap")
    noise = (noise - noise.mean()) / noise.std()
    out = np.clip(0.5 + 0.18 * noise, 0.0, 1.0)
    return np.floor(out * 15.999) / 15.0


def _fine_texture_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    # pixel-scale noise around a random mean
    mean = rng.uniform(0.35, 0.65)
    out = mean + rng.uniform(-0.35, 0.35, size=(h, w))
    return np.clip(out, 0.0, 1.0)


_TEXTURES = (_blob_image, _medium_texture_image, _fine_texture_image)


def generate(spec: SyntheticSpec) -> GrayImage:
    """Render a synthetic image; a pure function of ``spec``."""
    h, w = spec.height, spec.width
    if spec.kind == "constant":
        return GrayImage(np.full((h, w), float(spec.value)))
    if spec.kind == "checkerboard":
        yy, xx = np.mgrid[0:h, 0:w]
        return GrayImage((((yy // spec.period) + (xx // spec.period)) % 2).astype(np.float64))
    if spec.kind == "step-edge":
        out = np.zeros((h, w))
        out[:, w // 2:] = 1.0
        return GrayImage(out)
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "uniform-noise":
        return GrayImage(rng.uniform(0.0, 1.0, size=(h, w)))
    return GrayImage(_TEXTURES[spec.class_id](rng, h, w))


def textured_rgb(class_id: int, seed: int, size: int) -> RgbImage:
    """Colour version of a texture class: the gray pattern with a seeded tint."""
    gray = generate(SyntheticSpec("textured-class", size, size, seed=seed, class_id=class_id)).data
    tint = np.random.default_rng([seed, 7919]).uniform(0.85, 1.0, size=3)
    return RgbImage(np.clip(gray[:, :, None] * tint, 0.0, 1.0))


def textured_corpus(n_per_class: int, size: int = 64, seed: int = 0):
    """Gray images of the three texture classes, class-interleaved.

    Returns ``(ids, images, labels)``; image ``i`` has class ``i % 3``.
    """
    ids, images, labels = [], [], []
    for i in range(3 * n_per_class):
        cls = i % 3
        spec = SyntheticSpec("textured-class", size, size, seed=seed * 1_000_003 + i, class_id=cls)
        ids.append(f"textured-{cls}-{i:05d}")
        images.append(generate(spec))
        labels.append(cls)
    return ids, images, np.array(labels, dtype=np.int64)
