from __future__ import annotations

from dataclasses import asdict, dataclass, replace


@dataclass(frozen=True)
class GranularityConfig:
    """Patch size (pixels), nominal window (tokens), depth and branch width of one level."""

    level: int
    patch: int
    window: int
    depth: int
    dim: int


@dataclass(frozen=True)
class ModelConfig:
    image_size: int
    levels: tuple[GranularityConfig, ...]
    d_uni: int
    heads: int
    mlp_ratio: int
    num_classes: int
    in_chans: int = 3

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(
            lv if isinstance(lv, GranularityConfig) else GranularityConfig(**lv) for lv in self.levels))
        if self.d_uni % self.heads:
            raise ValueError(f"d_uni={self.d_uni} is not divisible by heads={self.heads}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        seen = set()
        for lv in self.levels:
            if lv.level in seen:
                raise ValueError(f"duplicate granularity level {lv.level}")
            seen.add(lv.level)
            if self.image_size % lv.patch:
                raise ValueError(f"image side {self.image_size} is not divisible by patch {lv.patch}")
            side = self.image_size // lv.patch
            if side % min(lv.window, side):
                raise ValueError(f"window {lv.window} does not tile the {side}-token grid of level {lv.level}")
            if lv.depth < 1:
                raise ValueError("depth must be >= 1")

    def level(self, g: int) -> GranularityConfig:
        for lv in self.levels:
            if lv.level == g:
                return lv
        raise KeyError(f"granularity {g} is not configured")

    def grid_side(self, g: int) -> int:
        return self.image_size // self.level(g).patch

    def num_tokens(self, g: int) -> int:
        return self.grid_side(g) ** 2

    def effective_window(self, g: int) -> int:
        """Nominal window clamped to the token grid; a clamped window is global."""
        return min(self.level(g).window, self.grid_side(g))

    def shift_size(self, g: int) -> int:
        m = self.effective_window(g)
        return 0 if m >= self.grid_side(g) else m // 2

    @property
    def max_depth(self) -> int:
        return max(lv.depth for lv in self.levels)

    def windows_for_block(self, block: int) -> list[int]:
        """Distinct effective windows among the levels that use ``block``."""
        return sorted({self.effective_window(lv.level) for lv in self.levels if lv.depth > block})

    def single(self, g: int) -> "ModelConfig":
        return replace(self, levels=(self.level(g),))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = [asdict(lv) for lv in self.levels]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["levels"] = tuple(GranularityConfig(**lv) for lv in d["levels"])
        return cls(**d)


def reference_config(num_classes: int = 1000) -> ModelConfig:
    """224-pixel setting: patches 16/8/4, windows 28/14/7, depths 2/3/4."""
    return ModelConfig(
        image_size=224,
        levels=(
            GranularityConfig(1, 16, 28, 2, 96),
            GranularityConfig(2, 8, 14, 3, 96),
            GranularityConfig(3, 4, 7, 4, 96),
        ),
        d_uni=192,
        heads=4,
        mlp_ratio=4,
        num_classes=num_classes,
    )


def tiny_config(num_classes: int = 3) -> ModelConfig:
    """32-pixel desk model: token grids 2/4/8, window 2, width 8, one head."""
    return ModelConfig(
        image_size=32,
        levels=(
            GranularityConfig(1, 16, 2, 1, 8),
            GranularityConfig(2, 8, 2, 2, 8),
            GranularityConfig(3, 4, 2, 2, 8),
        ),
        d_uni=8,
        heads=1,
        mlp_ratio=2,
        num_classes=num_classes,
    )
