"""Canonical raster/geometry data model: images, masks, depth, scenes.

Everything is immutable after construction (numpy arrays are marked
read-only) and all operations are pure, so values can be shared freely
across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import PlacementError, ValidationError

MIN_SIDE = 8


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RasterImage:
    """RGB or RGBA raster, float values in [0, 1]."""

    array: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.array, dtype=np.float64)
        if a.ndim != 3 or a.shape[2] not in (3, 4):
            raise ValidationError(f"raster must be HxWx3 or HxWx4, got {a.shape}")
        if a.shape[0] < MIN_SIDE or a.shape[1] < MIN_SIDE:
            raise ValidationError(f"raster sides must be >= {MIN_SIDE}, got {a.shape[:2]}")
        if not np.isfinite(a).all() or a.min() < 0.0 or a.max() > 1.0:
            raise ValidationError("raster values must be finite and within [0, 1]")
        object.__setattr__(self, "array", _freeze(a))

    @property
    def height(self) -> int:
        return self.array.shape[0]

    @property
    def width(self) -> int:
        return self.array.shape[1]

    @property
    def channels(self) -> int:
        return self.array.shape[2]

    def rgb(self) -> np.ndarray:
        return self.array[:, :, :3]

    def alpha(self) -> np.ndarray:
        if self.channels != 4:
            raise ValidationError("raster has no alpha channel")
        return self.array[:, :, 3]


@dataclass(frozen=True)
class BinaryMask:
    array: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.array)
        if a.ndim != 2:
            raise ValidationError(f"mask must be 2-D, got shape {a.shape}")
        if a.dtype != bool:
            vals = np.unique(a)
            if not np.isin(vals, (0, 1)).all():
                raise ValidationError("mask values must be strictly binary")
            a = a.astype(bool)
        object.__setattr__(self, "array", _freeze(a))

    @property
    def shape(self):
        return self.array.shape

    def area(self) -> int:
        return int(self.array.sum())

    def empty(self) -> bool:
        return not self.array.any()


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel depth, smaller = nearer camera."""

    array: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.array, dtype=np.float64)
        if a.ndim != 2:
            raise ValidationError(f"depth must be 2-D, got shape {a.shape}")
        if not np.isfinite(a).all() or a.min() < 0:
            raise ValidationError("depth values must be finite and non-negative")
        object.__setattr__(self, "array", _freeze(a))


@dataclass(frozen=True)
class Placement:
    """Affine placement: translate (center position, px), uniform scale,
    horizontal flip, rotation in degrees."""

    dx: float
    dy: float
    scale: float = 1.0
    flip: bool = False
    rotation: float = 0.0

    def to_json(self) -> dict:
        return {"dx": self.dx, "dy": self.dy, "scale": self.scale,
                "flip": self.flip, "rotation": self.rotation}

    @staticmethod
    def from_json(d: dict) -> "Placement":
        return Placement(dx=float(d["dx"]), dy=float(d["dy"]), scale=float(d["scale"]),
                         flip=bool(d["flip"]), rotation=float(d["rotation"]))


@dataclass(frozen=True)
class ObjectInstance:
    """One placed object.  amodal_rgba is the full-canvas RGBA raster with a
    binary alpha channel (the amodal mask); placement records how the source
    sprite was put there."""

    object_id: int
    category: str
    amodal_rgba: RasterImage
    placement: Placement
    stack_rank: int

    def __post_init__(self):
        if self.amodal_rgba.channels != 4:
            raise ValidationError("amodal raster must carry an alpha channel")
        alpha = self.amodal_rgba.alpha()
        if not np.isin(np.unique(alpha), (0.0, 1.0)).all():
            raise ValidationError("amodal alpha must be binary")

    def amodal_mask(self) -> BinaryMask:
        return BinaryMask(self.amodal_rgba.alpha() > 0.5)


@dataclass(frozen=True)
class SceneSample:
    canvas: RasterImage
    background_color: tuple[float, float, float]
    objects: tuple[ObjectInstance, ...]
    visible_masks: dict[int, BinaryMask]
    depth: DepthMap
    occluded_pairs: tuple[tuple[int, int], ...]
    seed: int = 0

    def object_by_id(self, oid: int) -> ObjectInstance:
        for o in self.objects:
            if o.object_id == oid:
                return o
        raise KeyError(oid)

    def size(self) -> tuple[int, int]:
        return self.canvas.height, self.canvas.width

    def validate(self) -> None:
        """Exhaustive per-pixel check of the scene invariants."""
        ranks = [o.stack_rank for o in self.objects]
        if len(set(ranks)) != len(ranks):
            raise ValidationError("stack ranks must be unique")
        ids = [o.object_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValidationError("object ids must be unique")
        h, w = self.size()
        union = np.zeros((h, w), dtype=bool)
        for obj in self.objects:
            amodal = obj.amodal_mask().array
            above = np.zeros((h, w), dtype=bool)
            for other in self.objects:
                if other.stack_rank > obj.stack_rank:
                    above |= other.amodal_mask().array
            expected = amodal & ~above
            got = self.visible_masks[obj.object_id].array
            if not np.array_equal(expected, got):
                raise ValidationError(f"visible mask of object {obj.object_id} violates painter identity")
            if (union & got).any():
                raise ValidationError("visible masks are not pairwise disjoint")
            union |= got
        # union plus background partitions the canvas: tautological for the
        # complement-background, so check the canvas pixels agree instead.
        bg = np.array(self.background_color)
        recomposed = composite(list(self.objects), self.background_color, (h, w))
        if not np.array_equal(recomposed.array, self.canvas.array):
            raise ValidationError("canvas does not equal the composite of its objects")
        if not np.allclose(self.canvas.array[~union], bg, atol=0):
            raise ValidationError("background pixels do not carry the background color")
        truth = set()
        for a in self.objects:
            for b in self.objects:
                if a.stack_rank > b.stack_rank and (a.amodal_mask().array & b.amodal_mask().array).any():
                    truth.add((a.object_id, b.object_id))
        if truth != set(map(tuple, self.occluded_pairs)):
            raise ValidationError("occluded_pairs do not match amodal overlaps + ranks")


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def composite(objects: list[ObjectInstance], background: tuple[float, float, float],
              size: tuple[int, int]) -> RasterImage:
    """Back-to-front alpha-over in ascending stack_rank.  Rank decides, not
    list order, so the result is invariant to permutations of `objects`."""
    h, w = size
    out = np.empty((h, w, 3))
    out[:] = np.asarray(background, dtype=np.float64)
    for obj in sorted(objects, key=lambda o: o.stack_rank):
        if obj.amodal_rgba.height != h or obj.amodal_rgba.width != w:
            raise PlacementError(
                f"object {obj.object_id} raster {obj.amodal_rgba.array.shape[:2]} does not fit canvas {size}")
        a = obj.amodal_rgba.alpha()[:, :, None]
        out = obj.amodal_rgba.rgb() * a + out * (1.0 - a)
    return RasterImage(out)


def derive_visible_masks(objects: list[ObjectInstance]) -> dict[int, BinaryMask]:
    """visible(i) = amodal(i) minus the union of amodal(j) for rank(j) > rank(i)."""
    ranks = [o.stack_rank for o in objects]
    if len(set(ranks)) != len(ranks):
        raise ValidationError("stack ranks must be unique")
    order = sorted(objects, key=lambda o: o.stack_rank, reverse=True)
    above = None
    out: dict[int, BinaryMask] = {}
    for obj in order:
        amodal = obj.amodal_mask().array
        if above is None:
            out[obj.object_id] = BinaryMask(amodal)
            above = amodal.copy()
        else:
            out[obj.object_id] = BinaryMask(amodal & ~above)
            above |= amodal
    return out


def mask_union(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    _require_same_shape(a, b)
    return BinaryMask(a.array | b.array)


def mask_intersect(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    _require_same_shape(a, b)
    return BinaryMask(a.array & b.array)


def mask_subtract(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    _require_same_shape(a, b)
    return BinaryMask(a.array & ~b.array)


def mask_dilate(a: BinaryMask, k: int) -> BinaryMask:
    """Dilation with a (2k+1)^2 square structuring element."""
    if k < 0:
        raise ValidationError("dilate radius must be >= 0")
    if k == 0:
        return a
    st = np.ones((2 * k + 1, 2 * k + 1), dtype=bool)
    return BinaryMask(ndimage.binary_dilation(a.array, structure=st))


def mask_erode_4(a: BinaryMask) -> BinaryMask:
    """Erosion with the 4-neighbor cross (used for 1-px inner boundaries)."""
    st = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    return BinaryMask(ndimage.binary_erosion(a.array, structure=st, border_value=0))


def inner_boundary(a: BinaryMask) -> BinaryMask:
    """Pixels of the mask that have a 4-neighbor outside it (1 px wide)."""
    return mask_subtract(a, mask_erode_4(a))


def mask_algebra(a: BinaryMask, b: BinaryMask | None, op: str, k: int = 1) -> BinaryMask:
    """Dispatch form of the mask operations: union / intersect / subtract / dilate."""
    if op == "dilate":
        return mask_dilate(a, k)
    if b is None:
        raise ValidationError(f"op {op!r} needs two masks")
    if op == "union":
        return mask_union(a, b)
    if op == "intersect":
        return mask_intersect(a, b)
    if op == "subtract":
        return mask_subtract(a, b)
    raise ValidationError(f"unknown mask op {op!r}")


def _require_same_shape(a: BinaryMask, b: BinaryMask) -> None:
    if a.shape != b.shape:
        raise ValidationError(f"mask shape mismatch: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# affine placement of RGBA rasters
# ---------------------------------------------------------------------------

def _affine_matrix(p: Placement, src_hw: tuple[int, int],
                   pivot: tuple[float, float] | None = None) -> np.ndarray:
    """Forward 3x3 matrix mapping source (x, y, 1) to canvas coordinates:
    translate(target) . rotate . flip . scale . translate(-pivot).  The pivot
    defaults to the source raster center."""
    sh, sw = src_hw
    if pivot is None:
        cx, cy = (sw - 1) / 2.0, (sh - 1) / 2.0
    else:
        cx, cy = pivot
    t1 = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], dtype=np.float64)
    s = np.array([[p.scale, 0, 0], [0, p.scale, 0], [0, 0, 1]], dtype=np.float64)
    f = np.array([[-1 if p.flip else 1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=np.float64)
    th = np.deg2rad(p.rotation)
    r = np.array([[np.cos(th), -np.sin(th), 0], [np.sin(th), np.cos(th), 0], [0, 0, 1]],
                 dtype=np.float64)
    t2 = np.array([[1, 0, p.dx], [0, 1, p.dy], [0, 0, 1]], dtype=np.float64)
    return t2 @ r @ f @ s @ t1


def transform_rgba(rgba: np.ndarray, p: Placement, out_hw: tuple[int, int],
                   pivot: tuple[float, float] | None = None) -> np.ndarray:
    """Place a source RGBA raster onto an empty canvas-frame RGBA raster.

    Alpha is sampled nearest-neighbor (stays binary); RGB bilinear.  Pixels
    mapping outside the source are fully transparent.
    """
    src = np.asarray(rgba, dtype=np.float64)
    sh, sw = src.shape[:2]
    h, w = out_hw
    m = _affine_matrix(p, (sh, sw), pivot)
    minv = np.linalg.inv(m)
    ys, xs = np.mgrid[0:h, 0:w]
    coords = np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)], axis=0)
    sx, sy, _ = minv @ coords
    sx = sx.reshape(h, w)
    sy = sy.reshape(h, w)

    # nearest for alpha
    nx = np.rint(sx).astype(np.int64)
    ny = np.rint(sy).astype(np.int64)
    inside = (nx >= 0) & (nx < sw) & (ny >= 0) & (ny < sh)
    alpha = np.zeros((h, w))
    alpha[inside] = src[ny[inside], nx[inside], 3]
    alpha = (alpha > 0.5).astype(np.float64)

    # bilinear for RGB
    x0 = np.clip(np.floor(sx).astype(np.int64), 0, sw - 1)
    y0 = np.clip(np.floor(sy).astype(np.int64), 0, sh - 1)
    x1 = np.clip(x0 + 1, 0, sw - 1)
    y1 = np.clip(y0 + 1, 0, sh - 1)
    fx = np.clip(sx - x0, 0.0, 1.0)[..., None]
    fy = np.clip(sy - y0, 0.0, 1.0)[..., None]
    c00 = src[y0, x0, :3]
    c01 = src[y0, x1, :3]
    c10 = src[y1, x0, :3]
    c11 = src[y1, x1, :3]
    rgb = (c00 * (1 - fx) * (1 - fy) + c01 * fx * (1 - fy)
           + c10 * (1 - fx) * fy + c11 * fx * fy)
    rgb = np.clip(rgb, 0.0, 1.0) * alpha[..., None]
    return np.concatenate([rgb, alpha[..., None]], axis=2)


def support_bbox(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """(y0, x0, y1, x1) inclusive bbox of true pixels, or None when empty."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return int(ys.min()), int(xs.min()), int(ys.max()), int(xs.max())
