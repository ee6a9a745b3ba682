"""Session-oriented recomposition HTTP API over deoccluded layer stacks.

Sessions hold immutable original layers plus a strictly increasing revision
history of per-layer edit states (non-destructive).  Composites are
rendered server-side by the painter's algorithm over the edited layers and
are a pure function of (original layers, edit states), so any stored
revision can be re-rendered bitwise.

Edit-delta semantics: translate and rotation accumulate, scale multiplies,
flip toggles, z_index and visible set; reset restores the creation state.
Transforms pivot on the original layer's alpha centroid.
"""

from __future__ import annotations

import base64
import io
import threading
import uuid
from dataclasses import dataclass, field, replace

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Response
from PIL import Image
from pydantic import BaseModel, Field

from .bundle import ModelBundle, load_bundle
from .dataset import DatasetConfig, generate_sample
from .errors import DeoccError, ValidationError
from .pipeline import InferConfig, deocclude_scene
from .scene import Placement, transform_rgba

SCHEMA_VERSION = 1
SCALE_MIN, SCALE_MAX = 0.1, 10.0
THUMB_SIDE = 48


@dataclass(frozen=True)
class EditState:
    tx: float = 0.0
    ty: float = 0.0
    scale: float = 1.0
    flip: bool = False
    rotation: float = 0.0
    z_index: int = 0
    visible: bool = True

    def to_json(self) -> dict:
        return {"translate": [self.tx, self.ty], "scale": self.scale,
                "flip": self.flip, "rotation": self.rotation,
                "z_index": self.z_index, "visible": self.visible}


@dataclass(frozen=True)
class LayerSource:
    object_id: int
    category: str
    rgba: np.ndarray          # (H, W, 4), immutable original
    centroid: tuple[float, float]  # (cx, cy) of the original alpha


@dataclass
class Session:
    session_id: str
    background_color: tuple[float, float, float]
    canvas_hw: tuple[int, int]
    sources: dict[int, LayerSource]
    initial: dict[int, EditState]
    revisions: dict[int, dict[int, EditState]] = field(default_factory=dict)
    revision: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock)

    def current(self) -> dict[int, EditState]:
        return self.revisions[self.revision]


# ---------------------------------------------------------------------------
# request/response schemas
# ---------------------------------------------------------------------------

class SynthRequest(BaseModel):
    seed: int = 0
    size: int = 64
    k_min: int = 2
    k_max: int = 4
    sample_index: int = 0
    strategy: str = "layer_wise"
    guidance_scale: float | None = None


class LayerUpload(BaseModel):
    object_id: int
    category: str = ""
    rgb_png_b64: str
    mask_png_b64: str
    z_index: int | None = None


class LayersUpload(BaseModel):
    canvas_size: tuple[int, int]
    background_color: tuple[int, int, int]
    layers: list[LayerUpload]


class CreateSession(BaseModel):
    schema_version: int = SCHEMA_VERSION
    synth: SynthRequest | None = None
    layers: LayersUpload | None = None


class EditDelta(BaseModel):
    translate: tuple[float, float] | None = None
    scale: float | None = None
    flip: bool | None = None
    rotation: float | None = None
    z_index: int | None = None
    visible: bool | None = None
    reset: bool = False


class ReorderRequest(BaseModel):
    order: list[int] = Field(description="object ids bottom-to-top")


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _apply_edit(src: LayerSource, edit: EditState, out_hw) -> np.ndarray:
    p = Placement(dx=src.centroid[0] + edit.tx, dy=src.centroid[1] + edit.ty,
                  scale=edit.scale, flip=edit.flip, rotation=edit.rotation)
    return transform_rgba(src.rgba, p, out_hw, pivot=src.centroid)


def render_composite(session: Session, edits: dict[int, EditState]) -> np.ndarray:
    h, w = session.canvas_hw
    out = np.empty((h, w, 3))
    out[:] = np.asarray(session.background_color)
    order = sorted(edits, key=lambda oid: edits[oid].z_index)
    for oid in order:
        e = edits[oid]
        if not e.visible:
            continue
        placed = _apply_edit(session.sources[oid], e, (h, w))
        a = placed[:, :, 3:4]
        out = placed[:, :, :3] * a + out * (1.0 - a)
    return out


def _png_bytes(rgb: np.ndarray) -> bytes:
    img = Image.fromarray(np.round(np.clip(rgb, 0.0, 1.0) * 255).astype(np.uint8), "RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def _thumb_b64(rgba: np.ndarray) -> str:
    img = Image.fromarray(np.round(np.clip(rgba, 0, 1) * 255).astype(np.uint8), "RGBA")
    img.thumbnail((THUMB_SIDE, THUMB_SIDE))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def _b64_png(arr: np.ndarray, mode: str) -> str:
    buf = io.BytesIO()
    Image.fromarray(arr, mode).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def _centroid(alpha: np.ndarray) -> tuple[float, float]:
    ys, xs = np.nonzero(alpha > 0.5)
    if ys.size == 0:
        h, w = alpha.shape
        return ((w - 1) / 2.0, (h - 1) / 2.0)
    return (float(xs.mean()), float(ys.mean()))


# ---------------------------------------------------------------------------
# app factory
# ---------------------------------------------------------------------------

def create_app(models_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="deocc recomposition service")
    sessions: dict[str, Session] = {}
    bundle_box: dict[str, ModelBundle] = {}

    def get_bundle() -> ModelBundle:
        if "b" not in bundle_box:
            if models_dir is None:
                raise HTTPException(503, "no trained models configured on this server")
            try:
                bundle_box["b"] = load_bundle(models_dir)
            except DeoccError as e:
                raise HTTPException(503, f"models unavailable: {e}") from e
        return bundle_box["b"]

    def get_session(sid: str) -> Session:
        if sid not in sessions:
            raise HTTPException(404, f"unknown session {sid}")
        return sessions[sid]

    def _session_from_stack(entries, background, canvas_hw) -> Session:
        sources = {}
        initial = {}
        for rank_pos, e in enumerate(sorted(entries, key=lambda x: x.stack_rank)):
            rgba = np.concatenate([e.rgb * e.mask[..., None],
                                   e.mask[..., None].astype(np.float64)], axis=2)
            sources[e.object_id] = LayerSource(object_id=e.object_id, category=e.category,
                                               rgba=rgba, centroid=_centroid(rgba[:, :, 3]))
            initial[e.object_id] = EditState(z_index=rank_pos)
        sid = uuid.uuid4().hex[:12]
        s = Session(session_id=sid, background_color=background, canvas_hw=canvas_hw,
                    sources=sources, initial=initial)
        s.revisions[0] = dict(initial)
        return s

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "schema_version": SCHEMA_VERSION,
                "models": models_dir is not None}

    @app.post("/sessions", status_code=201)
    def create_session(req: CreateSession):
        if req.schema_version != SCHEMA_VERSION:
            raise HTTPException(422, f"unsupported schema_version {req.schema_version}")
        if (req.synth is None) == (req.layers is None):
            raise HTTPException(422, "provide exactly one of synth | layers")
        if req.synth is not None:
            bundle = get_bundle()
            r = req.synth
            try:
                dcfg = DatasetConfig(num_samples=1, k_min=r.k_min, k_max=r.k_max,
                                     canvas_size=r.size, seed=r.seed)
                sample = generate_sample(dcfg, r.sample_index)
                cats = {o.object_id: o.category for o in sample.objects}
                stack = deocclude_scene(
                    sample.canvas, sample.visible_masks, cats, sample.depth,
                    bundle.vae, bundle.v2c, bundle.stats, seed=r.seed,
                    config=InferConfig(strategy=r.strategy,
                                       guidance_scale=r.guidance_scale))
            except DeoccError as e:
                raise HTTPException(422, str(e)) from e
            session = _session_from_stack(stack.entries, sample.background_color,
                                          sample.size())
        else:
            up = req.layers
            sources = {}
            initial = {}
            h, w = up.canvas_size
            try:
                for i, ly in enumerate(up.layers):
                    rgb = np.asarray(
                        Image.open(io.BytesIO(base64.b64decode(ly.rgb_png_b64))).convert("RGB"),
                        dtype=np.float64) / 255.0
                    mask = np.asarray(
                        Image.open(io.BytesIO(base64.b64decode(ly.mask_png_b64))).convert("1"),
                        dtype=bool)
                    if rgb.shape[:2] != (h, w) or mask.shape != (h, w):
                        raise ValidationError(f"layer {ly.object_id} does not match canvas size")
                    if ly.object_id in sources:
                        raise ValidationError(f"duplicate object id {ly.object_id}")
                    rgba = np.concatenate([rgb * mask[..., None],
                                           mask[..., None].astype(np.float64)], axis=2)
                    sources[ly.object_id] = LayerSource(
                        object_id=ly.object_id, category=ly.category, rgba=rgba,
                        centroid=_centroid(rgba[:, :, 3]))
                    initial[ly.object_id] = EditState(
                        z_index=ly.z_index if ly.z_index is not None else i)
                if not sources:
                    raise ValidationError("upload holds no layers")
                zs = [e.z_index for e in initial.values()]
                if len(set(zs)) != len(zs):
                    raise ValidationError("z indices must be unique")
            except (ValidationError, ValueError, OSError) as e:
                raise HTTPException(422, f"invalid upload: {e}") from e
            sid = uuid.uuid4().hex[:12]
            session = Session(session_id=sid,
                              background_color=tuple(c / 255.0 for c in up.background_color),
                              canvas_hw=(h, w), sources=sources, initial=initial)
            session.revisions[0] = dict(initial)
        sessions[session.session_id] = session
        return {"schema_version": SCHEMA_VERSION, "session_id": session.session_id,
                "revision": session.revision,
                "num_layers": len(session.sources)}

    @app.get("/sessions/{sid}/layers")
    def get_layers(sid: str, include_pixels: bool = Query(default=False)):
        s = get_session(sid)
        with s.lock:
            edits = s.current()
            layers = []
            for oid in sorted(edits, key=lambda o: edits[o].z_index):
                src = s.sources[oid]
                row = {"object_id": oid, "category": src.category,
                       "edit": edits[oid].to_json(),
                       "thumbnail_png_b64": _thumb_b64(src.rgba)}
                if include_pixels:
                    rgb8 = np.round(src.rgba[:, :, :3] * 255).astype(np.uint8)
                    mask8 = (src.rgba[:, :, 3] > 0.5).astype(np.uint8) * 255
                    row["rgb_png_b64"] = _b64_png(rgb8, "RGB")
                    row["mask_png_b64"] = _b64_png(mask8, "L")
                    row["centroid"] = list(src.centroid)
                layers.append(row)
            return {"schema_version": SCHEMA_VERSION, "revision": s.revision,
                    "canvas_size": list(s.canvas_hw),
                    "background_color": [int(round(c * 255)) for c in s.background_color],
                    "layers": layers}

    @app.patch("/sessions/{sid}/layers/{oid}")
    def patch_layer(sid: str, oid: int, delta: EditDelta):
        s = get_session(sid)
        with s.lock:
            edits = dict(s.current())
            if oid not in edits:
                raise HTTPException(404, f"unknown object {oid}")
            cur = edits[oid]
            if delta.reset:
                new = s.initial[oid]
            else:
                new = cur
                if delta.translate is not None:
                    new = replace(new, tx=new.tx + delta.translate[0],
                                  ty=new.ty + delta.translate[1])
                if delta.scale is not None:
                    new = replace(new, scale=new.scale * delta.scale)
                if delta.flip:
                    new = replace(new, flip=not new.flip)
                if delta.rotation is not None:
                    new = replace(new, rotation=new.rotation + delta.rotation)
                if delta.visible is not None:
                    new = replace(new, visible=delta.visible)
            if not (SCALE_MIN <= new.scale <= SCALE_MAX):
                raise HTTPException(422, f"scale {new.scale:.4g} outside [{SCALE_MIN}, {SCALE_MAX}]")
            displaced: list[int] = []
            if delta.z_index is not None and not delta.reset:
                new = replace(new, z_index=delta.z_index)
            edits[oid] = new
            # z-collision resolution by displacement (stable, upward)
            taken: dict[int, int] = {}
            for other in sorted(edits, key=lambda o: (edits[o].z_index, o != oid)):
                z = edits[other].z_index
                while z in taken:
                    z += 1
                if z != edits[other].z_index:
                    displaced.append(other)
                    edits[other] = replace(edits[other], z_index=z)
                taken[z] = other
            s.revision += 1
            s.revisions[s.revision] = edits
            return {"schema_version": SCHEMA_VERSION, "revision": s.revision,
                    "edit": edits[oid].to_json(),
                    "displaced": sorted(displaced)}

    @app.post("/sessions/{sid}/reorder")
    def reorder(sid: str, req: ReorderRequest):
        s = get_session(sid)
        with s.lock:
            edits = dict(s.current())
            if sorted(req.order) != sorted(edits):
                raise HTTPException(422, "order must be a permutation of all object ids")
            for z, oid in enumerate(req.order):
                edits[oid] = replace(edits[oid], z_index=z)
            s.revision += 1
            s.revisions[s.revision] = edits
            return {"schema_version": SCHEMA_VERSION, "revision": s.revision,
                    "order": req.order}

    @app.get("/sessions/{sid}/composite")
    def composite(sid: str, revision: int | None = Query(default=None)):
        s = get_session(sid)
        with s.lock:
            rev = s.revision if revision is None else revision
            if rev not in s.revisions:
                raise HTTPException(409, f"revision {rev} not available (current {s.revision})")
            rgb = render_composite(s, s.revisions[rev])
        return Response(content=_png_bytes(rgb), media_type="image/png",
                        headers={"X-Revision": str(rev),
                                 "X-Schema-Version": str(SCHEMA_VERSION)})

    return app
