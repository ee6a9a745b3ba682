"""Deocclusion inference: occlusion graph -> depth layers -> grouped
diffusion passes -> per-object decoding.

Strategy semantics (and the pass accounting they imply):
  one_by_one    one diffusion pass per occluded object;
  layer_wise    one pass per depth layer that contains an occluded object;
  once_for_all  a single pass encoding every object in the scene.
Fully visible objects bypass diffusion and are copied through, so a scene
with no occluded objects costs zero passes under every strategy.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import occlusion
from .diffusion import (ConditionBundle, LatentStats, V2CGenerator, build_condition,
                        category_multi_hot, sample_full_view)
from .errors import ModelMismatchError, SampleFormatError, ValidationError
from .nn import Tensor
from .scene import BinaryMask, DepthMap, RasterImage, inner_boundary
from .vae import ParallelVae, downsample_mean

log = logging.getLogger(__name__)

STRATEGIES = ("one_by_one", "layer_wise", "once_for_all")
LAYER_STACK_SCHEMA = 1


@dataclass(frozen=True)
class InferConfig:
    strategy: str = "layer_wise"
    guidance_scale: float | None = None  # None -> the generator's default
    band: int = 2
    statistic: str = "mean"
    mask_threshold: float = 0.5
    paste_visible: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"unknown strategy {self.strategy!r}")


@dataclass(frozen=True)
class LayerEntry:
    object_id: int
    category: str
    rgb: np.ndarray          # (H, W, 3) completed appearance
    mask: np.ndarray         # (H, W) bool amodal mask
    layer: int
    stack_rank: int
    diffused: bool


@dataclass(frozen=True)
class LayerStack:
    entries: tuple[LayerEntry, ...]
    provenance: dict

    def entry(self, oid: int) -> LayerEntry:
        for e in self.entries:
            if e.object_id == oid:
                return e
        raise KeyError(oid)


def passes_used(stack: LayerStack) -> int:
    return int(stack.provenance["passes_used"])


# ---------------------------------------------------------------------------
# planning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InferencePlan:
    graph: occlusion.OcclusionGraph
    layers: occlusion.DepthLayering
    occluded: tuple[int, ...]
    groups: tuple[tuple[int, ...], ...]   # encoded+diffused together, in order


def plan_groups(visible_masks: dict[int, BinaryMask], depth: DepthMap,
                strategy: str, band: int = 2, statistic: str = "mean") -> InferencePlan:
    graph = occlusion.build_graph(visible_masks, depth, band=band, statistic=statistic)
    dag = occlusion.break_cycles(graph)
    layers = occlusion.layering(dag)
    occluded = dag.occluded_nodes()
    if not occluded:
        groups: tuple[tuple[int, ...], ...] = ()
    elif strategy == "one_by_one":
        groups = tuple((oid,) for oid in sorted(occluded))
    elif strategy == "layer_wise":
        groups = tuple(tuple(layers.members(l)) for l in range(1, layers.num_layers)
                       if layers.members(l))
    elif strategy == "once_for_all":
        groups = (tuple(sorted(visible_masks)),)
    else:
        raise ValidationError(f"unknown strategy {strategy!r}")
    return InferencePlan(graph=dag, layers=layers, occluded=tuple(sorted(occluded)),
                         groups=groups)


def derive_stack_ranks(visible_masks: dict[int, BinaryMask], depth: DepthMap
                       ) -> dict[int, int]:
    """Nearer (smaller mean visible depth) objects get higher ranks."""
    keys = []
    for oid, m in visible_masks.items():
        mean_d = float(depth.array[m.array].mean()) if m.array.any() else float("inf")
        keys.append((-mean_d, oid))
    return {oid: rank + 1 for rank, (_, oid) in enumerate(sorted(keys))}


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def _check_models(canvas_hw, vae: ParallelVae, v2c: V2CGenerator) -> None:
    h, w = canvas_hw
    if vae.cfg.canvas != h or vae.cfg.canvas != w:
        raise ModelMismatchError(
            f"stage-1 model canvas {vae.cfg.canvas} does not match scene {canvas_hw}")
    if v2c.cfg.grid != vae.cfg.grid or v2c.cfg.latent_channels != vae.cfg.c:
        raise ModelMismatchError(
            f"stage-2 latent grid ({v2c.cfg.grid}, {v2c.cfg.latent_channels}) does not "
            f"match stage-1 ({vae.cfg.grid}, {vae.cfg.c})")
    if not v2c.has_control:
        raise ModelMismatchError("stage-2 model has no control branch (pretrain-only)")


def _group_condition(canvas: np.ndarray, visible_masks: dict[int, BinaryMask],
                     categories: dict[int, str], group: tuple[int, ...],
                     occluders_of: dict[int, set[int]], vae: ParallelVae,
                     stats: LatentStats, v2c_cfg) -> ConditionBundle:
    ids = sorted(group)
    segs = []
    for oid in ids:
        m = visible_masks[oid].array.astype(np.float64)
        segs.append(np.concatenate([canvas * m[..., None], m[..., None]], axis=2))
    mu, _ = vae.encode_objects(np.stack(segs))
    f_p = stats.standardize(mu.data[0])
    included = sorted(set(ids) | set().union(*(occluders_of[i] for i in ids)))
    h, w = canvas.shape[:2]
    m_o = np.zeros((h, w), dtype=bool)
    edges = np.zeros((h, w), dtype=bool)
    for oid in included:
        seg = visible_masks[oid]
        m_o |= seg.array
        edges |= inner_boundary(seg).array
    r = h // v2c_cfg.grid
    cats = category_multi_hot(sorted({categories[i] for i in ids}), v2c_cfg.vocab)
    return ConditionBundle(
        f_p=f_p,
        m_o=downsample_mean(m_o.astype(np.float64), r)[None],
        edges=downsample_mean(edges.astype(np.float64), r)[None],
        categories=cats)


def deocclude_scene(canvas: RasterImage, visible_masks: dict[int, BinaryMask],
                    categories: dict[int, str], depth: DepthMap,
                    vae: ParallelVae, v2c: V2CGenerator, stats: LatentStats,
                    seed: int = 0, config: InferConfig = InferConfig()) -> LayerStack:
    """Run deocclusion and return the per-object completed layer stack."""
    if not visible_masks:
        raise ValidationError("at least one object required")
    _check_models((canvas.height, canvas.width), vae, v2c)
    scale = (config.guidance_scale if config.guidance_scale is not None
             else v2c.cfg.guidance_scale_default)
    arr = canvas.rgb()
    for oid, m in visible_masks.items():
        if m.empty():
            log.warning("object %d has an empty visible mask; passed through", oid)
    plan = plan_groups(visible_masks, depth, config.strategy,
                       band=config.band, statistic=config.statistic)
    occluders_of = {oid: set() for oid in visible_masks}
    for e in plan.graph.edges:
        occluders_of[e.dst].add(e.src)
    ranks = derive_stack_ranks(visible_masks, depth)
    occluded = set(plan.occluded)

    completed: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for gi, group in enumerate(plan.groups):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(seed, spawn_key=(gi,))))
        cond = _group_condition(arr, visible_masks, categories, group,
                                occluders_of, vae, stats, v2c.cfg)
        f = sample_full_view(v2c, stats, cond, scale, rng)
        targets = [oid for oid in sorted(group) if oid in occluded]
        queries = np.stack([visible_masks[oid].array.astype(np.float64)
                            for oid in targets])
        rgb_t, prob_t = vae.decode_objects(Tensor(f[None]), queries)
        for j, oid in enumerate(targets):
            rgb = rgb_t.data[j].transpose(1, 2, 0)
            mask = prob_t.data[j, 0] >= config.mask_threshold
            vis = visible_masks[oid].array
            if config.paste_visible:
                mask = mask | vis
                rgb = np.where(vis[..., None], arr, rgb)
            completed[oid] = (np.clip(rgb, 0.0, 1.0), mask)

    entries = []
    for oid in sorted(visible_masks):
        vis = visible_masks[oid].array
        if oid in completed:
            rgb, mask = completed[oid]
            diffused = True
        else:
            rgb = arr * vis[..., None]
            mask = vis.copy()
            diffused = False
        entries.append(LayerEntry(object_id=oid, category=categories[oid],
                                  rgb=rgb, mask=mask,
                                  layer=plan.layers.layer_of[oid],
                                  stack_rank=ranks[oid], diffused=diffused))
    provenance = {
        "schema_version": LAYER_STACK_SCHEMA,
        "strategy": config.strategy,
        "passes_used": len(plan.groups),
        "seed": seed,
        "guidance_scale": scale,
        "num_layers": plan.layers.num_layers,
        "occluded_objects": list(plan.occluded),
        "graph": occlusion.export_json(plan.graph, plan.layers),
    }
    return LayerStack(entries=tuple(entries), provenance=provenance)


# ---------------------------------------------------------------------------
# on-disk layer stacks
# ---------------------------------------------------------------------------

def write_layer_stack(stack: LayerStack, dir_path: str | Path) -> None:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    meta_entries = []
    for e in stack.entries:
        Image.fromarray(np.round(e.rgb * 255).astype(np.uint8), "RGB").save(
            d / f"obj_{e.object_id}_rgb.png")
        Image.fromarray(e.mask).save(d / f"obj_{e.object_id}_mask.png", bits=1)
        meta_entries.append({"object_id": e.object_id, "category": e.category,
                             "layer": e.layer, "stack_rank": e.stack_rank,
                             "diffused": e.diffused})
    prov = dict(stack.provenance)
    prov["entries"] = meta_entries
    (d / "provenance.json").write_text(json.dumps(prov, indent=1, sort_keys=True))


def read_layer_stack(dir_path: str | Path) -> LayerStack:
    d = Path(dir_path)
    prov_path = d / "provenance.json"
    if not prov_path.exists():
        raise SampleFormatError(f"missing provenance.json in {d}")
    prov = json.loads(prov_path.read_text())
    if prov.get("schema_version") != LAYER_STACK_SCHEMA:
        raise SampleFormatError(f"unsupported layer-stack schema {prov.get('schema_version')}")
    entries = []
    for m in prov.pop("entries"):
        oid = m["object_id"]
        rgb = np.asarray(Image.open(d / f"obj_{oid}_rgb.png").convert("RGB"),
                         dtype=np.float64) / 255.0
        mask = np.asarray(Image.open(d / f"obj_{oid}_mask.png").convert("1"), dtype=bool)
        entries.append(LayerEntry(object_id=oid, category=m["category"], rgb=rgb,
                                  mask=mask, layer=m["layer"],
                                  stack_rank=m["stack_rank"], diffused=m["diffused"]))
    return LayerStack(entries=tuple(entries), provenance=prov)
