"""Coarse stage: image complexity descriptors, fused score and routing.

The three descriptors (edge density, normalised entropy, high-frequency
energy ratio) are each bounded in [0, 1]. They are fused with a
softmax-weighted sum squashed by a sigmoid, then compared against two
ordered thresholds to pick one of three granularity levels.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imgcore import GrayImage, RgbImage, to_grayscale

CANNY_SIGMA = 1.4
CANNY_KERNEL = 5
CANNY_LOW = 0.1
CANNY_HIGH = 0.2
ENTROPY_BINS = 256
ENTROPY_QUANT = 255.999
LOWFREQ_RADIUS_FRACTION = 1.0 / 8.0
MIN_SIDE = 8

COARSE, MEDIUM, FINE = 1, 2, 3


class ImageTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class ComplexityFeatures:
    edge: float
    entropy: float
    freq: float

    def as_array(self) -> np.ndarray:
        return np.array([self.edge, self.entropy, self.freq])


@dataclass(frozen=True)
class EstimatorParams:
    """Raw coarse-stage parameters: pre-softmax weights ``w`` and the
    unconstrained threshold variables ``a`` and ``b``."""

    w: tuple[float, float, float] = (0.0, 0.0, 0.0)
    a: float = 0.0
    b: float = 0.0

    def __post_init__(self):
        w = tuple(float(x) for x in self.w)
        if len(w) != 3:
            raise ValueError("EstimatorParams.w needs exactly 3 weights")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "b", float(self.b))
        if not all(math.isfinite(x) for x in (*w, self.a, self.b)):
            raise ValueError("EstimatorParams must be finite")

    def to_vector(self) -> np.ndarray:
        return np.array([*self.w, self.a, self.b])

    @classmethod
    def from_vector(cls, vec) -> "EstimatorParams":
        vec = [float(x) for x in vec]
        return cls(tuple(vec[:3]), vec[3], vec[4])

    def to_json(self) -> str:
        return json.dumps({"w": list(self.w), "a": self.a, "b": self.b})

    @classmethod
    def from_json(cls, text: str) -> "EstimatorParams":
        doc = json.loads(text)
        unknown = set(doc) - {"w", "a", "b"}
        if unknown:
            raise ValueError(f"unknown estimator keys: {sorted(unknown)}")
        return cls(tuple(doc["w"]), doc["a"], doc["b"])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EstimatorParams":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class Thresholds:
    alpha: float
    beta: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= self.beta <= 1.0:
            raise ValueError(f"thresholds must satisfy 0 <= alpha <= beta <= 1, got {self.alpha}, {self.beta}")


def sigmoid(x):
    # both branches avoid overflow in exp
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def softmax(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    e = np.exp(w - w.max())
    return e / e.sum()


# ---------------------------------------------------------------------------
# Canny


def gaussian_kernel(size: int = CANNY_KERNEL, sigma: float = CANNY_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


def _correlate(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(img, ((ph, ph), (pw, pw)), mode="edge")
    h, w = img.shape
    out = np.zeros_like(img)
    for i in range(kh):
        for j in range(kw):
            if kernel[i, j] != 0.0:
                out += kernel[i, j] * padded[i:i + h, j:j + w]
    return out


def canny_edges(gray: np.ndarray, low: float = CANNY_LOW, high: float = CANNY_HIGH,
                sigma: float = CANNY_SIGMA) -> np.ndarray:
    """Boolean Canny edge map.

    Gaussian blur (5x5), Sobel gradients, non-maximum suppression along the
    gradient direction quantised to 0/45/90/135 degrees, and 8-connected
    hysteresis. Thresholds apply to the magnitude divided by its maximum.
    Borders are replicated; neighbours outside the image count as zero.
    """
    gray = np.asarray(gray, dtype=np.float64)
    if min(gray.shape) < CANNY_KERNEL:
        raise ImageTooSmallError(f"image {gray.shape} is smaller than the {CANNY_KERNEL}x{CANNY_KERNEL} blur kernel")
    smooth = _correlate(gray, gaussian_kernel(CANNY_KERNEL, sigma))
    gx = _correlate(smooth, SOBEL_X)
    gy = _correlate(smooth, SOBEL_Y)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 1e-12:
        return np.zeros(gray.shape, dtype=bool)
    mag = mag / peak

    # direction bins: 0 -> horizontal gradient, 1 -> 45, 2 -> vertical, 3 -> 135
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = (np.floor((angle + 22.5) / 45.0).astype(np.int64)) % 4
    offsets = ((0, 1), (1, 1), (1, 0), (1, -1))
    padded = np.pad(mag, 1, mode="constant")
    h, w = mag.shape
    keep = np.zeros(mag.shape, dtype=bool)
    for s, (dy, dx) in enumerate(offsets):
        fwd = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        back = padded[1 - dy:1 - dy + h, 1 - dx:1 - dx + w]
        # strict against the forward neighbour breaks plateau ties once
        keep |= (sector == s) & (mag > fwd) & (mag >= back)
    thin = np.where(keep, mag, 0.0)

    strong = thin >= high
    weak = thin >= low
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros(gray.shape, dtype=bool)
    has_strong = np.zeros(n + 1, dtype=bool)
    has_strong[labels[strong]] = True
    has_strong[0] = False
    return has_strong[labels]


def _check_size(img: GrayImage) -> None:
    if img.height < MIN_SIDE or img.width < MIN_SIDE:
        raise ImageTooSmallError(f"descriptors need at least {MIN_SIDE}x{MIN_SIDE} pixels, got {img.width}x{img.height}")


def edge_density(img: GrayImage) -> float:
    _check_size(img)
    edges = canny_edges(img.data)
    return float(np.count_nonzero(edges)) / edges.size


def intensity_histogram(img: GrayImage) -> np.ndarray:
    bins = np.floor(img.data * ENTROPY_QUANT).astype(np.int64).ravel()
    return np.bincount(bins, minlength=ENTROPY_BINS)


def shannon_entropy(img: GrayImage) -> float:
    """Entropy in bits of the 256-bin intensity histogram, divided by 8."""
    if img.data.size == 0:
        raise ValueError("entropy of an empty image is undefined")
    counts = intensity_histogram(img)
    p = counts[counts > 0] / counts.sum()
    h = 0.0 - float(np.sum(p * np.log2(p)))  # 0.0 - 0.0 keeps the sign positive
    return min(max(h / 8.0, 0.0), 1.0)


def freq_ratio(img: GrayImage, radius_fraction: float = LOWFREQ_RADIUS_FRACTION) -> float:
    """Share of spectral energy outside a centred low-frequency disk.

    The mean is removed first, so the DC term never counts towards either
    side of the ratio.
    """
    _check_size(img)
    x = img.data - img.data.mean()
    power = np.abs(np.fft.fftshift(np.fft.fft2(x))) ** 2
    total = power.sum()
    if total <= 0.0:
        return 0.0
    h, w = x.shape
    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.hypot(yy - h // 2, xx - w // 2)
    radius = min(h, w) * radius_fraction
    high = power[dist > radius].sum()
    return float(min(max(high / total, 0.0), 1.0))


def freq_mean_magnitude(img: GrayImage) -> float:
    """Mean FFT magnitude, clipped to [0, 1]; the alternative frequency cue."""
    _check_size(img)
    mag = np.abs(np.fft.fft2(img.data))
    return float(min(mag.sum() / img.data.size, 1.0))


FREQ_MODES = {"ratio": freq_ratio, "mean-magnitude": freq_mean_magnitude}


def extract_features(img, freq_mode: str = "ratio") -> ComplexityFeatures:
    if isinstance(img, RgbImage):
        img = to_grayscale(img)
    _check_size(img)
    return ComplexityFeatures(
        edge=edge_density(img),
        entropy=shannon_entropy(img),
        freq=FREQ_MODES[freq_mode](img),
    )


# ---------------------------------------------------------------------------
# Fusion and routing


def fuse_score(feat: ComplexityFeatures, params: EstimatorParams) -> float:
    z = float(softmax(params.w) @ feat.as_array())
    return float(sigmoid(z))


def fuse_scores(features: np.ndarray, params: EstimatorParams) -> np.ndarray:
    """Vectorised ``fuse_score`` over an (N, 3) feature matrix."""
    return sigmoid(np.asarray(features, dtype=np.float64) @ softmax(params.w))


def thresholds_from_raw(params: EstimatorParams) -> Thresholds:
    alpha = float(sigmoid(params.a))
    beta = alpha + (1.0 - alpha) * float(sigmoid(params.b))
    return Thresholds(alpha, beta)


def assign_granularity(score: float, th: Thresholds) -> int:
    if score < th.alpha:
        return COARSE
    if score < th.beta:
        return MEDIUM
    return FINE


def assign_granularities(scores: np.ndarray, th: Thresholds) -> np.ndarray:
    scores = np.asarray(scores)
    return np.where(scores < th.alpha, COARSE, np.where(scores < th.beta, MEDIUM, FINE)).astype(np.int64)


def estimate(img, params: EstimatorParams, th: Thresholds | None = None) -> tuple[float, int]:
    """Full coarse stage for one image: returns ``(score, level)``."""
    th = th if th is not None else thresholds_from_raw(params)
    score = fuse_score(extract_features(img), params)
    return score, assign_granularity(score, th)
