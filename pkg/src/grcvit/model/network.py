"""Granularity-adaptive windowed transformer with a shared block stack.

Each granularity owns its patch embedding, input/output adapters and
classifier head. The block stack is shared: granularity ``g`` runs blocks
``0 .. depth_g - 1``. Odd-indexed blocks use shifted windows.
"""
from __future__ import annotations

import numpy as np

from ..complexity import EstimatorParams, Thresholds, estimate, thresholds_from_raw
from ..imgcore import RgbImage, resize_rgb
from ..tensor import ParamStore, Tensor, ops
from .config import ModelConfig
from .layers import transformer_block

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32, zero_residual: bool = False) -> ParamStore:
    """Build the parameter store in a fixed order.

    With ``zero_residual`` the attention and MLP output projections start at
    zero, which makes every block the identity map.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype)
    d = cfg.d_uni

    def dense(name, fan_in, fan_out, zero=False):
        store.add(f"{name}.weight", np.zeros((fan_in, fan_out)) if zero else trunc_normal(rng, (fan_in, fan_out)))
        store.add(f"{name}.bias", np.zeros(fan_out))

    for lv in cfg.levels:
        g = lv.level
        dense(f"embed.g{g}", lv.patch * lv.patch * cfg.in_chans, lv.dim)
        dense(f"adapter_in.g{g}", lv.dim, d)
        dense(f"adapter_out.g{g}", d, lv.dim)
    for i in range(cfg.max_depth):
        pre = f"blocks.{i}"
        store.add(f"{pre}.norm1.weight", np.ones(d))
        store.add(f"{pre}.norm1.bias", np.zeros(d))
        dense(f"{pre}.qkv", d, 3 * d)
        for m in cfg.windows_for_block(i):
            store.add(f"{pre}.rel_bias.w{m}", np.zeros(((2 * m - 1) ** 2, cfg.heads)))
        dense(f"{pre}.proj", d, d, zero=zero_residual)
        store.add(f"{pre}.norm2.weight", np.ones(d))
        store.add(f"{pre}.norm2.bias", np.zeros(d))
        dense(f"{pre}.fc1", d, cfg.mlp_ratio * d)
        dense(f"{pre}.fc2", cfg.mlp_ratio * d, d, zero=zero_residual)
    for lv in cfg.levels:
        dense(f"head.g{lv.level}", lv.dim, cfg.num_classes)
    return store


def _batch(images) -> np.ndarray:
    if isinstance(images, RgbImage):
        return images.data[None]
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected (B, H, W, C) images, got {arr.shape}")
    return arr


def patchify(images, p: int) -> np.ndarray:
    """(B, H, W, C) -> (B, (H/p)(W/p), p*p*C), patches in row-major order."""
    x = _batch(images)
    b, h, w, c = x.shape
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {p}")
    x = x.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


class GrcViT:
    def __init__(self, cfg: ModelConfig, params: ParamStore | None = None, seed: int = 0,
                 dtype=np.float32, zero_residual: bool = False):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed, dtype, zero_residual)

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def block_params(self, i: int, window: int) -> dict:
        pre = f"blocks.{i}."
        names = ("norm1.weight", "norm1.bias", "qkv.weight", "qkv.bias", "proj.weight", "proj.bias",
                 "norm2.weight", "norm2.bias", "fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias")
        p = {n: self.params[pre + n] for n in names}
        p["rel_bias"] = self.params[f"{pre}rel_bias.w{window}"]
        return p

    def patch_embed(self, images, g: int) -> Tensor:
        """Tokens (B, N_g, D_g); a single RgbImage yields (N_g, D_g)."""
        lv = self.cfg.level(g)
        tokens = ops.linear(patchify(images, lv.patch), self._p(f"embed.g{g}.weight"), self._p(f"embed.g{g}.bias"))
        return ops.reshape(tokens, tokens.shape[1:]) if isinstance(images, RgbImage) else tokens

    def adapt_in(self, tokens, g: int) -> Tensor:
        return ops.linear(tokens, self._p(f"adapter_in.g{g}.weight"), self._p(f"adapter_in.g{g}.bias"))

    def adapt_out(self, tokens, g: int) -> Tensor:
        return ops.linear(tokens, self._p(f"adapter_out.g{g}.weight"), self._p(f"adapter_out.g{g}.bias"))

    def block(self, tokens, i: int, g: int, recorder=None) -> Tensor:
        cfg = self.cfg
        m = cfg.effective_window(g)
        shift = cfg.shift_size(g) if i % 2 == 1 else 0
        return transformer_block(tokens, self.block_params(i, m), cfg.grid_side(g), m, shift, cfg.heads, recorder)

    def features(self, images, g: int, recorder=None) -> Tensor:
        """Granularity-specific token representation (B, N_g, D_g)."""
        x = self.adapt_in(self.patch_embed(_batch(images), g), g)
        for i in range(self.cfg.level(g).depth):
            x = self.block(x, i, g, recorder)
        return self.adapt_out(x, g)

    def forward(self, images, g: int, recorder=None) -> Tensor:
        """Class logits (B, num_classes) for images routed to granularity ``g``."""
        pooled = ops.mean(self.features(images, g, recorder), axis=1)
        return ops.linear(pooled, self._p(f"head.g{g}.weight"), self._p(f"head.g{g}.bias"))

    def num_parameters(self) -> int:
        return self.params.num_parameters()

    def save(self, path):
        return self.params.save(path, header={"model": self.cfg.to_dict()})

    @classmethod
    def load(cls, path) -> "GrcViT":
        store, header = ParamStore.load(path)
        if not header or "model" not in header:
            raise ValueError("checkpoint has no model-config header")
        return cls(ModelConfig.from_dict(header["model"]), params=store)


def forward_fine(images, g: int, model: GrcViT, recorder=None) -> Tensor:
    return model.forward(images, g, recorder)


def route_and_forward(img: RgbImage, estimator: EstimatorParams, thresholds: Thresholds | None,
                      model: GrcViT) -> tuple[int, np.ndarray]:
    """Coarse stage then fine stage for one image; returns (level, logits).

    The image is resized to the model input first; descriptors are computed
    on the resized image. No tape is involved in the coarse stage.
    """
    size = model.cfg.image_size
    if (img.width, img.height) != (size, size):
        img = resize_rgb(img, size, size)
    th = thresholds if thresholds is not None else thresholds_from_raw(estimator)
    _, g = estimate(img, estimator, th)
    return g, model.forward(img, g).data[0]
