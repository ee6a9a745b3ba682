"""Self-supervised object-ensemble synthesis and the on-disk sample format.

Scenes are stacks of parametric sprites composed back-to-front on a flat
background.  Ground-truth depth comes from the stacking order (K - rank,
background K), replacing any external depth estimator.  Per-sample RNG is
derived from (seed, sample_index) so corpora are independent of generation
order or parallelism.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import occlusion
from .errors import SampleFormatError, SynthesisError, ValidationError
from .scene import (BinaryMask, DepthMap, ObjectInstance, Placement, RasterImage,
                    SceneSample, composite, derive_visible_masks, inner_boundary)
from .sprites import generate_sprite

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEPTH_QUANTUM = 1e-3  # depth.pgm stores round(depth / DEPTH_QUANTUM) as uint16


@dataclass(frozen=True)
class DatasetConfig:
    num_samples: int = 5000
    k_min: int = 2
    k_max: int = 8
    canvas_size: int = 64
    seed: int = 0
    min_occlusion_fraction: float = 0.05
    depth_noise_sigma: float = 0.0
    sprite_size: tuple[int, int] | None = None
    adjacency_band: int = 2
    retry_budget: int = 100

    def __post_init__(self):
        if not (1 <= self.k_min <= self.k_max):
            raise ValidationError("need 1 <= k_min <= k_max")
        if not (0.0 <= self.min_occlusion_fraction < 1.0):
            raise ValidationError("min_occlusion_fraction must be in [0, 1)")
        if self.canvas_size < 16:
            raise ValidationError("canvas_size must be >= 16")
        if self.num_samples < 1:
            raise ValidationError("num_samples must be >= 1")


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Deterministic per-sample generator: hash of (seed, sample_index)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def _quant_depth(depth: np.ndarray) -> np.ndarray:
    return np.round(depth / DEPTH_QUANTUM) * DEPTH_QUANTUM


def _stack_valid(objects: list[ObjectInstance], band: int) -> bool:
    """Every object keeps visible evidence, and visible-mask adjacency
    coincides exactly with amodal overlap, so depth-based order inference
    can be exact on this data."""
    visible = derive_visible_masks(objects)
    if any(m.empty() for m in visible.values()):
        return False
    for i, a in enumerate(objects):
        for b in objects[i + 1:]:
            overlaps = (a.amodal_mask().array & b.amodal_mask().array).any()
            adjacent = occlusion.band_adjacent(visible[a.object_id], visible[b.object_id], band)
            if adjacent != overlaps:
                return False
    return True


def _has_strong_occlusion(objects: list[ObjectInstance], frac: float) -> bool:
    for a in objects:
        for b in objects:
            if a.stack_rank <= b.stack_rank:
                continue
            ov = (a.amodal_mask().array & b.amodal_mask().array).sum()
            if ov > 0 and ov >= frac * b.amodal_mask().area():
                return True
    return False


def compose_scene(cfg: DatasetConfig, rng: np.random.Generator) -> SceneSample:
    """Compose one scene: K ~ Uniform{k_min..k_max} sprites placed with
    ascending stack rank.  Each placement is locally retried until the
    partial stack stays valid; the scene is retried as a whole when the
    occlusion requirement cannot be met."""
    k = int(rng.integers(cfg.k_min, cfg.k_max + 1))
    hw = (cfg.canvas_size, cfg.canvas_size)
    sample_seed = int(rng.integers(0, 2 ** 63 - 1))
    for _ in range(cfg.retry_budget):
        background = tuple(rng.integers(0, 256, 3) / 255.0)
        objects: list[ObjectInstance] = []
        ok = True
        for i in range(k):
            placed = False
            for _ in range(cfg.retry_budget):
                cand = generate_sprite(rng, hw, object_id=i + 1, stack_rank=i + 1,
                                       size_range=cfg.sprite_size)
                if _stack_valid(objects + [cand], cfg.adjacency_band):
                    objects.append(cand)
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if not ok:
            continue
        if k >= 2 and cfg.min_occlusion_fraction > 0 and not _has_strong_occlusion(
                objects, cfg.min_occlusion_fraction):
            continue
        visible = derive_visible_masks(objects)
        depth = np.full(hw, float(k))
        for obj in sorted(objects, key=lambda o: o.stack_rank):
            depth[obj.amodal_mask().array] = float(k - obj.stack_rank)
        if cfg.depth_noise_sigma > 0:
            depth = np.clip(depth + rng.normal(0.0, cfg.depth_noise_sigma, hw), 0.0, None)
        depth = _quant_depth(depth)
        pairs = []
        for a in objects:
            for b in objects:
                if a.stack_rank > b.stack_rank and (
                        a.amodal_mask().array & b.amodal_mask().array).any():
                    pairs.append((a.object_id, b.object_id))
        return SceneSample(
            canvas=composite(objects, background, hw),
            background_color=background,
            objects=tuple(objects),
            visible_masks=visible,
            depth=DepthMap(depth),
            occluded_pairs=tuple(sorted(pairs)),
            seed=sample_seed,
        )
    raise SynthesisError(f"scene retry budget ({cfg.retry_budget}) exhausted")


def generate_sample(cfg: DatasetConfig, index: int) -> SceneSample:
    return compose_scene(cfg, sample_rng(cfg.seed, index))


def generate_corpus(cfg: DatasetConfig) -> list[SceneSample]:
    return [generate_sample(cfg, i) for i in range(cfg.num_samples)]


# ---------------------------------------------------------------------------
# visible-subset augmentation (stage-2 conditioning)
# ---------------------------------------------------------------------------

def augment_visible_subset(sample: SceneSample, rng: np.random.Generator,
                           subset_ids: tuple[int, ...] | None = None,
                           ) -> tuple[tuple[int, ...], BinaryMask, BinaryMask]:
    """Sample a nonempty object subset; return (subset_ids, m_o, edge_map).

    m_o unions the visible masks of the subset members and of all their
    occluders; edge_map is the 1-px inner boundary of each included visible
    segment.
    """
    if not sample.objects:
        raise ValidationError("sample has no objects")
    ids = sorted(sample.visible_masks)
    if subset_ids is None:
        size = int(rng.integers(1, len(ids) + 1))
        subset_ids = tuple(sorted(int(i) for i in rng.choice(ids, size=size, replace=False)))
    occluders = {a for a, b in sample.occluded_pairs if b in subset_ids}
    included = sorted(set(subset_ids) | occluders)
    h, w = sample.size()
    m_o = np.zeros((h, w), dtype=bool)
    edges = np.zeros((h, w), dtype=bool)
    for oid in included:
        seg = sample.visible_masks[oid]
        m_o |= seg.array
        edges |= inner_boundary(seg).array
    return tuple(subset_ids), BinaryMask(m_o), BinaryMask(edges)


# ---------------------------------------------------------------------------
# on-disk sample format
# ---------------------------------------------------------------------------

def _write_pgm16(path: Path, values: np.ndarray) -> None:
    data = values.astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{values.shape[1]} {values.shape[0]}\n65535\n".encode())
        f.write(data.tobytes())


def _read_pgm16(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5" or parts[2] != b"65535":
        raise SampleFormatError(f"not a 16-bit PGM: {path}")
    w, h = map(int, parts[1].split())
    body = parts[3]
    if len(body) != h * w * 2:
        raise SampleFormatError(f"truncated PGM body: {path}")
    return np.frombuffer(body, dtype=">u2").reshape(h, w).astype(np.uint16)


def _png_u8(path: Path, arr: np.ndarray, mode: str) -> None:
    Image.fromarray(arr, mode=mode).save(path)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_sample(sample: SceneSample, dir_path: str | Path) -> None:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    files: list[str] = []
    _png_u8(d / "scene.png", np.round(sample.canvas.array * 255).astype(np.uint8), "RGB")
    files.append("scene.png")
    _write_pgm16(d / "depth.pgm", np.round(sample.depth.array / DEPTH_QUANTUM).astype(np.uint16))
    files.append("depth.pgm")
    for obj in sample.objects:
        name = f"amodal_{obj.object_id}.png"
        _png_u8(d / name, np.round(obj.amodal_rgba.array * 255).astype(np.uint8), "RGBA")
        files.append(name)
        vname = f"visible_{obj.object_id}.png"
        Image.fromarray(sample.visible_masks[obj.object_id].array).save(d / vname, bits=1)
        files.append(vname)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "seed": sample.seed,
        "background_color": [int(round(c * 255)) for c in sample.background_color],
        "objects": [
            {"id": o.object_id, "category": o.category,
             "placement": o.placement.to_json(), "stack_rank": o.stack_rank}
            for o in sample.objects
        ],
        "occluded_pairs": [list(p) for p in sample.occluded_pairs],
        "depth_quantum": DEPTH_QUANTUM,
        "checksums": {name: _sha256(d / name) for name in files},
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


_META_KEYS = {"schema_version", "seed", "background_color", "objects",
              "occluded_pairs", "depth_quantum", "checksums"}


def read_sample(dir_path: str | Path) -> SceneSample:
    d = Path(dir_path)
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise SampleFormatError(f"missing meta.json in {d}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise SampleFormatError(f"meta.json is not valid JSON: {e}") from e
    if not isinstance(meta, dict) or set(meta) != _META_KEYS:
        raise SampleFormatError(f"meta.json keys {sorted(meta)} != expected {sorted(_META_KEYS)}")
    if meta["schema_version"] != SCHEMA_VERSION:
        raise SampleFormatError(f"schema version {meta['schema_version']} unsupported")
    for name, digest in meta["checksums"].items():
        p = d / name
        if not p.exists():
            raise SampleFormatError(f"missing file {name}")
        if _sha256(p) != digest:
            raise SampleFormatError(f"checksum mismatch for {name}")
    canvas = np.asarray(Image.open(d / "scene.png").convert("RGB"), dtype=np.float64) / 255.0
    depth = _read_pgm16(d / "depth.pgm").astype(np.float64) * meta["depth_quantum"]
    objects = []
    visible: dict[int, BinaryMask] = {}
    for om in meta["objects"]:
        oid = int(om["id"])
        rgba = np.asarray(Image.open(d / f"amodal_{oid}.png"), dtype=np.float64) / 255.0
        objects.append(ObjectInstance(
            object_id=oid, category=om["category"],
            amodal_rgba=RasterImage(rgba),
            placement=Placement.from_json(om["placement"]),
            stack_rank=int(om["stack_rank"]),
        ))
        vis = np.asarray(Image.open(d / f"visible_{oid}.png").convert("1"), dtype=bool)
        visible[oid] = BinaryMask(vis)
    return SceneSample(
        canvas=RasterImage(canvas),
        background_color=tuple(c / 255.0 for c in meta["background_color"]),
        objects=tuple(objects),
        visible_masks=visible,
        depth=DepthMap(depth),
        occluded_pairs=tuple(tuple(p) for p in meta["occluded_pairs"]),
        seed=int(meta["seed"]),
    )


def write_corpus(cfg: DatasetConfig, out_dir: str | Path,
                 config_hash: str | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(cfg.num_samples):
        p = out / f"sample_{i:05d}"
        write_sample(generate_sample(cfg, i), p)
        paths.append(p)
    index = {
        "schema_version": SCHEMA_VERSION,
        "num_samples": cfg.num_samples,
        "seed": cfg.seed,
        "canvas_size": cfg.canvas_size,
        "k_min": cfg.k_min,
        "k_max": cfg.k_max,
    }
    if config_hash:
        index["config_hash"] = config_hash
    (out / "corpus.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return paths


def read_corpus(dir_path: str | Path) -> list[SceneSample]:
    d = Path(dir_path)
    sample_dirs = sorted(p for p in d.iterdir() if p.is_dir() and p.name.startswith("sample_"))
    if not sample_dirs:
        raise SampleFormatError(f"no sample directories under {d}")
    return [read_sample(p) for p in sample_dirs]


def corpus_content_hash(dir_path: str | Path) -> str:
    """Order-independent digest of every sample file (determinism checks)."""
    d = Path(dir_path)
    h = hashlib.sha256()
    for p in sorted(d.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(d).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()
