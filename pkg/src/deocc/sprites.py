"""Parametric textured sprites: the stand-in object pool for scene synthesis.

Each sprite is a shape/texture pair drawn from a fixed vocabulary; the
category string "<shape>-<texture>" doubles as the text-condition label.
Rasters are quantized to the 8-bit grid at creation so on-disk PNG round
trips are lossless.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import SynthesisError, ValidationError
from .scene import ObjectInstance, Placement, RasterImage, transform_rgba

SHAPES = ("disc", "square", "triangle", "ring", "capsule")
TEXTURES = ("flat", "stripes", "checker", "radial-gradient")
CATEGORIES = tuple(f"{s}-{t}" for s in SHAPES for t in TEXTURES)


def parse_category(category: str) -> tuple[str, str]:
    shape, _, texture = category.partition("-")
    if shape not in SHAPES or texture not in TEXTURES:
        raise ValidationError(f"unknown category {category!r}")
    return shape, texture


@dataclass(frozen=True)
class SpriteSpec:
    shape: str
    texture: str
    palette: tuple[tuple[float, float, float], tuple[float, float, float]]
    size: int

    def __post_init__(self):
        if self.size < 8:
            raise ValidationError("sprite size must be >= 8 px")
        if self.shape not in SHAPES or self.texture not in TEXTURES:
            raise ValidationError(f"unknown shape/texture {self.shape}/{self.texture}")

    @property
    def category(self) -> str:
        return f"{self.shape}-{self.texture}"


def _quant(a: np.ndarray) -> np.ndarray:
    return np.round(np.clip(a, 0.0, 1.0) * 255.0) / 255.0


def _shape_mask(shape: str, s: int) -> np.ndarray:
    c = (s - 1) / 2.0
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    r = c
    if shape == "disc":
        return (xx - c) ** 2 + (yy - c) ** 2 <= r * r
    if shape == "square":
        return np.ones((s, s), dtype=bool)
    if shape == "triangle":
        # upward-pointing isoceles filling the raster
        return np.abs(xx - c) <= (yy / max(s - 1, 1)) * c + 1e-9
    if shape == "ring":
        rin = max(r - max(2.0, 0.45 * r), 0.5)
        d2 = (xx - c) ** 2 + (yy - c) ** 2
        return (d2 <= r * r) & (d2 >= rin * rin)
    if shape == "capsule":
        hh = max(4.0, 0.55 * s) / 2.0
        span = max(c - hh, 0.0)
        dx = np.clip(np.abs(xx - c) - span, 0.0, None)
        return dx ** 2 + (yy - c) ** 2 <= hh * hh
    raise ValidationError(f"unknown shape {shape!r}")


def _texture_rgb(texture: str, s: int, palette) -> np.ndarray:
    c1 = np.asarray(palette[0], dtype=np.float64)
    c2 = np.asarray(palette[1], dtype=np.float64)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    if texture == "flat":
        return np.broadcast_to(c1, (s, s, 3)).copy()
    bw = max(2, s // 5)
    if texture == "stripes":
        pick = ((yy // bw) % 2).astype(bool)
    elif texture == "checker":
        pick = (((yy // bw) + (xx // bw)) % 2).astype(bool)
    elif texture == "radial-gradient":
        cc = (s - 1) / 2.0
        t = np.clip(np.sqrt((xx - cc) ** 2 + (yy - cc) ** 2) / max(cc, 1e-9), 0.0, 1.0)
        return _quant(c1 * (1.0 - t[..., None]) + c2 * t[..., None])
    else:
        raise ValidationError(f"unknown texture {texture!r}")
    rgb = np.where(pick[..., None], c2, c1)
    return _quant(rgb)


def sprite_raster(spec: SpriteSpec) -> np.ndarray:
    """Canonical s x s RGBA raster (RGB zeroed outside the binary alpha)."""
    mask = _shape_mask(spec.shape, spec.size)
    rgb = _texture_rgb(spec.texture, spec.size, spec.palette) * mask[..., None]
    return np.concatenate([rgb, mask[..., None].astype(np.float64)], axis=2)


def _connected(mask: np.ndarray) -> bool:
    if not mask.any():
        return False
    _, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    return n == 1


def draw_spec(rng: np.random.Generator, size_range: tuple[int, int]) -> SpriteSpec:
    shape = SHAPES[rng.integers(len(SHAPES))]
    texture = TEXTURES[rng.integers(len(TEXTURES))]
    c1 = rng.integers(0, 256, 3) / 255.0
    while True:
        c2 = rng.integers(0, 256, 3) / 255.0
        if np.abs(c1 - c2).sum() >= 60 / 255.0:
            break
    size = int(rng.integers(size_range[0], size_range[1] + 1))
    return SpriteSpec(shape=shape, texture=texture,
                      palette=(tuple(c1), tuple(c2)), size=size)


def generate_sprite(rng: np.random.Generator, canvas_hw: tuple[int, int] = (64, 64),
                    object_id: int = 1, stack_rank: int = 1,
                    size_range: tuple[int, int] | None = None,
                    retry_budget: int = 100) -> ObjectInstance:
    """Draw a sprite spec and an in-bounds placement; returns the placed object.

    The transformed support is guaranteed fully inside the canvas (a
    conservative half-diagonal margin), nonempty and 8-connected; degenerate
    transforms are resampled.
    """
    h, w = canvas_hw
    if size_range is None:
        lo = max(8, min(h, w) // 6)
        hi = max(lo + 2, min(h, w) // 3)
        size_range = (lo, hi)
    for _ in range(retry_budget):
        spec = draw_spec(rng, size_range)
        src = sprite_raster(spec)
        scale = float(rng.uniform(0.8, 1.3))
        flip = bool(rng.integers(2))
        rotation = float(rng.uniform(0.0, 360.0))
        margin = int(np.ceil(spec.size * scale * np.sqrt(2.0) / 2.0)) + 1
        if 2 * margin + 2 >= min(h, w):
            continue
        dx = float(rng.uniform(margin, w - 1 - margin))
        dy = float(rng.uniform(margin, h - 1 - margin))
        placement = Placement(dx=dx, dy=dy, scale=scale, flip=flip, rotation=rotation)
        placed = transform_rgba(src, placement, (h, w))
        placed[:, :, :3] = _quant(placed[:, :, :3])
        alpha = placed[:, :, 3] > 0.5
        if alpha.sum() >= 16 and _connected(alpha):
            return ObjectInstance(object_id=object_id, category=spec.category,
                                  amodal_rgba=RasterImage(placed), placement=placement,
                                  stack_rank=stack_rank)
    raise SynthesisError("sprite placement retry budget exhausted")
