"""Integer FLOPs accounting for Swin-style and granularity-adaptive stacks.

Per layer ``l`` with feature map ``H_l x W_l``, width ``C`` and window ``M``:

    swin: 4 H W C^2 + 2 H W C M^2
    grc:  3 H W C^2 + 2 H W C M_l^2 + 3 H W C
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass


@dataclass(frozen=True)
class LayerSpec:
    H: int
    W: int
    C: int
    M: int  # window used by the Swin formula
    M_l: int | None = None  # window used by the adaptive formula; defaults to M

    def __post_init__(self):
        for name in ("H", "W", "C", "M"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.M_l is not None and (not isinstance(self.M_l, int) or self.M_l < 1):
            raise ValueError(f"M_l must be a positive integer, got {self.M_l!r}")

    @property
    def window_l(self) -> int:
        return self.M if self.M_l is None else self.M_l


@dataclass(frozen=True)
class FlopsReport:
    model: str
    layers: tuple[LayerSpec, ...]
    terms: tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.terms)


def swin_layer_flops(layer: LayerSpec) -> int:
    hw = layer.H * layer.W
    return 4 * hw * layer.C ** 2 + 2 * hw * layer.C * layer.M ** 2


def grc_layer_flops(layer: LayerSpec) -> int:
    hw = layer.H * layer.W
    return 3 * hw * layer.C ** 2 + 2 * hw * layer.C * layer.window_l ** 2 + 3 * hw * layer.C


def flops_swin(layers) -> FlopsReport:
    layers = tuple(layers)
    return FlopsReport("swin", layers, tuple(swin_layer_flops(l) for l in layers))


def flops_grc(layers) -> FlopsReport:
    layers = tuple(layers)
    return FlopsReport("grc", layers, tuple(grc_layer_flops(l) for l in layers))


# Stage resolutions activated per granularity and the Swin-T stage widths.
STAGE_SIDES = (56, 28, 14, 7)
STAGE_WIDTHS = (96, 192, 384, 768)
STAGES_PER_LEVEL = {1: 2, 2: 3, 3: 4}
SWIN_WINDOW = 7
SWIN_T_DEPTHS = (2, 2, 6, 2)


def reference_sweep() -> list[tuple[str, list[LayerSpec]]]:
    """Reference configurations: one entry per granularity plus Swin-T.

    Windows never exceed the feature map, so ``M_l = min(7, H_l)``.
    """
    sweep = []
    for g, n in STAGES_PER_LEVEL.items():
        layers = [LayerSpec(s, s, c, SWIN_WINDOW, min(SWIN_WINDOW, s))
                  for s, c in zip(STAGE_SIDES[:n], STAGE_WIDTHS[:n])]
        sweep.append((f"granularity-{g}", layers))
    swin_t = [LayerSpec(s, s, c, SWIN_WINDOW, min(SWIN_WINDOW, s))
              for s, c, depth in zip(STAGE_SIDES, STAGE_WIDTHS, SWIN_T_DEPTHS) for _ in range(depth)]
    sweep.append(("swin-t-depths", swin_t))
    return sweep


def parse_sweep(doc) -> list[tuple[str, list[LayerSpec]]]:
    """Sweep from JSON: ``[{"name": str, "layers": [{"H":..,"W":..,"C":..,"M":..,"M_l":..}]}]``."""
    out = []
    for entry in doc:
        layers = []
        for layer in entry["layers"]:
            unknown = set(layer) - {"H", "W", "C", "M", "M_l"}
            if unknown:
                raise ValueError(f"unknown layer keys {sorted(unknown)}")
            layers.append(LayerSpec(**layer))
        out.append((str(entry["name"]), layers))
    return out


def sweep_csv(sweep) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["config", "omega_swin", "omega_grc", "ratio"])
    for name, layers in sweep:
        swin, grc = flops_swin(layers).total, flops_grc(layers).total
        ratio = grc / swin if swin else float("nan")
        writer.writerow([name, swin, grc, repr(ratio)])
    return buf.getvalue()
