"""Evaluation: micro-averaged amodal IoU, pairwise order accuracy, and a
Fréchet feature-statistic fidelity proxy over frozen stage-1 encoder
features (objects canonicalized on a white background)."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import occlusion
from .errors import ValidationError
from .pipeline import InferConfig, deocclude_scene, passes_used
from .scene import BinaryMask, SceneSample
from .vae import ParallelVae

log = logging.getLogger(__name__)

REPORT_SCHEMA = 1
COV_RIDGE = 1e-6


# ---------------------------------------------------------------------------
# amodal IoU
# ---------------------------------------------------------------------------

def amodal_iou(preds: dict[int, np.ndarray], truths: dict[int, np.ndarray]) -> float:
    """Micro-average: sum of intersections over sum of unions (not the mean
    of per-object ratios).  Defined as 1.0 when every union is empty."""
    if set(preds) != set(truths):
        raise ValidationError("prediction/truth object ids differ")
    if not preds:
        raise ValidationError("empty mask sets")
    inter = 0
    union = 0
    for oid in preds:
        p = np.asarray(preds[oid], dtype=bool)
        t = np.asarray(truths[oid], dtype=bool)
        if p.shape != t.shape:
            raise ValidationError(f"shape mismatch for object {oid}")
        inter += int((p & t).sum())
        union += int((p | t).sum())
    if union == 0:
        return 1.0
    return inter / union


def iou_sums(preds: dict[int, np.ndarray], truths: dict[int, np.ndarray]
             ) -> tuple[int, int]:
    """(sum of intersections, sum of unions) for exact aggregate recomputation."""
    inter = union = 0
    for oid in preds:
        p = np.asarray(preds[oid], dtype=bool)
        t = np.asarray(truths[oid], dtype=bool)
        inter += int((p & t).sum())
        union += int((p | t).sum())
    return inter, union


# ---------------------------------------------------------------------------
# Fréchet fidelity proxy
# ---------------------------------------------------------------------------

def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(m)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """d^2 = |mu1-mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2}), matrix square root
    by eigendecomposition with negative eigenvalues clamped to 0."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValidationError("feature sets must be (N, d) with matching d")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValidationError("need at least 2 samples per side")
    mu1, mu2 = a.mean(axis=0), b.mean(axis=0)
    s1 = np.cov(a, rowvar=False)
    s2 = np.cov(b, rowvar=False)
    s1 = np.atleast_2d(s1)
    s2 = np.atleast_2d(s2)
    for name, s in (("first", s1), ("second", s2)):
        if np.linalg.eigvalsh(s).min() < 1e-10:
            log.info("rank-deficient covariance (%s set); adding ridge %g", name, COV_RIDGE)
            s += COV_RIDGE * np.eye(s.shape[0])
    root1 = _psd_sqrt(s1)
    cross = root1 @ s2 @ root1
    tr_sqrt = float(np.sqrt(np.clip(np.linalg.eigvalsh(cross), 0.0, None)).sum())
    diff = mu1 - mu2
    d2 = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_sqrt)
    return max(d2, 0.0)


def white_background(rgb: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Canonicalize an object for fidelity measurement: white backdrop."""
    m = np.asarray(mask, dtype=np.float64)[..., None]
    return rgb * m + (1.0 - m)


class EncoderFeatures:
    """Pooled frozen stage-1 encoder features of single objects."""

    def __init__(self, vae: ParallelVae):
        self.vae = vae

    def __call__(self, items: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
        """items: list of (rgb (H,W,3), mask (H,W)) -> (N, c) pooled features."""
        out = []
        for rgb, mask in items:
            white = white_background(rgb, mask)
            rgba = np.concatenate([white, np.asarray(mask, dtype=np.float64)[..., None]],
                                  axis=2)
            mu, _ = self.vae.encode_objects(rgba[None])
            out.append(mu.data[0].mean(axis=(1, 2)))
        return np.stack(out)


def fidelity_proxy(pred_items: list[tuple[np.ndarray, np.ndarray]],
                   ref_items: list[tuple[np.ndarray, np.ndarray]],
                   extractor: EncoderFeatures) -> float:
    """Fréchet distance between pooled encoder features of completed objects
    and of reference complete objects (both against white backgrounds)."""
    return frechet_distance(extractor(pred_items), extractor(ref_items))


# ---------------------------------------------------------------------------
# evaluation harness
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    corpus_id: str
    config_hash: str
    per_sample: list[dict]
    aggregates: dict
    schema_version: int = REPORT_SCHEMA

    def to_json(self) -> str:
        return json.dumps({
            "schema_version": self.schema_version,
            "corpus_id": self.corpus_id,
            "config_hash": self.config_hash,
            "aggregates": self.aggregates,
            "per_sample": self.per_sample,
        }, indent=1, sort_keys=True)

    def to_table(self) -> str:
        lines = [f"corpus: {self.corpus_id}   config: {self.config_hash[:12]}",
                 f"{'strategy':>14} {'IoU':>8} {'IoU(occ)':>9} {'order acc':>10} "
                 f"{'fidelity':>9} {'passes/img':>10}"]
        for strat, agg in sorted(self.aggregates.items()):
            acc = agg["order_accuracy"]
            lines.append(
                f"{strat:>14} {agg['iou']:>8.4f} {agg['iou_occluded']:>9.4f} "
                f"{(acc if acc is not None else float('nan')):>10.4f} "
                f"{agg['fidelity_proxy']:>9.4f} {agg['mean_passes']:>10.2f}")
        return "\n".join(lines)

    def recompute_aggregates(self) -> dict:
        out = {}
        strategies = sorted({row["strategy"] for row in self.per_sample if "error" not in row})
        for strat in strategies:
            rows = [r for r in self.per_sample if r["strategy"] == strat and "error" not in r]
            inter = sum(r["iou_intersection"] for r in rows)
            union = sum(r["iou_union"] for r in rows)
            inter_o = sum(r["iou_occ_intersection"] for r in rows)
            union_o = sum(r["iou_occ_union"] for r in rows)
            pairs = sum(r["order_pairs"] for r in rows)
            correct = sum(r["order_correct"] for r in rows)
            out[strat] = {
                "iou": inter / union if union else 1.0,
                "iou_occluded": inter_o / union_o if union_o else 1.0,
                "order_accuracy": correct / pairs if pairs else None,
                "mean_passes": float(np.mean([r["passes"] for r in rows])),
                "fidelity_proxy": self.aggregates[strat]["fidelity_proxy"],
                "num_samples": len(rows),
                "num_failures": len([r for r in self.per_sample
                                     if r["strategy"] == strat and "error" in r]),
            }
        return out


def evaluate(corpus: list[SceneSample], vae: ParallelVae, v2c, stats,
             strategies: tuple[str, ...] = ("one_by_one", "layer_wise", "once_for_all"),
             seed: int = 0, config_hash: str = "", corpus_id: str = "",
             infer_base: InferConfig = InferConfig()) -> EvalReport:
    if not corpus:
        raise ValidationError("evaluation corpus is empty")
    extractor = EncoderFeatures(vae)
    per_sample: list[dict] = []
    aggregates: dict = {}
    for strat in strategies:
        cfg = InferConfig(strategy=strat, guidance_scale=infer_base.guidance_scale,
                          band=infer_base.band, statistic=infer_base.statistic,
                          mask_threshold=infer_base.mask_threshold,
                          paste_visible=infer_base.paste_visible)
        pred_items = []
        ref_items = []
        for si, s in enumerate(corpus):
            cats = {o.object_id: o.category for o in s.objects}
            row = {"sample": si, "strategy": strat}
            try:
                stack = deocclude_scene(s.canvas, s.visible_masks, cats, s.depth,
                                        vae, v2c, stats, seed=seed + si, config=cfg)
                preds = {e.object_id: e.mask for e in stack.entries}
                truths = {o.object_id: o.amodal_mask().array for o in s.objects}
                occluded = {b for _, b in s.occluded_pairs}
                row["iou"] = amodal_iou(preds, truths)
                row["iou_intersection"], row["iou_union"] = iou_sums(preds, truths)
                if occluded:
                    po = {k: v for k, v in preds.items() if k in occluded}
                    to = {k: v for k, v in truths.items() if k in occluded}
                    row["iou_occluded"] = amodal_iou(po, to)
                    row["iou_occ_intersection"], row["iou_occ_union"] = iou_sums(po, to)
                else:
                    row["iou_occluded"] = None
                    row["iou_occ_intersection"] = row["iou_occ_union"] = 0
                graph = occlusion.build_graph(s.visible_masks, s.depth,
                                              band=cfg.band, statistic=cfg.statistic)
                acc = occlusion.order_accuracy(graph, list(s.occluded_pairs))
                row["order_accuracy"] = acc
                row["order_pairs"] = len(s.occluded_pairs)
                row["order_correct"] = int(round(acc * len(s.occluded_pairs))) if acc is not None else 0
                row["passes"] = passes_used(stack)
                for e in stack.entries:
                    if e.diffused:
                        pred_items.append((e.rgb, e.mask))
                for o in s.objects:
                    ref_items.append((o.amodal_rgba.rgb(), o.amodal_mask().array))
            except Exception as exc:  # recorded, never silently dropped
                log.exception("evaluation failed on sample %d (%s)", si, strat)
                row["error"] = f"{type(exc).__name__}: {exc}"
            per_sample.append(row)
        ok_rows = [r for r in per_sample if r["strategy"] == strat and "error" not in r]
        if not ok_rows:
            raise ValidationError(f"no successful evaluations for strategy {strat}")
        if len(pred_items) >= 2 and len(ref_items) >= 2:
            fidelity = fidelity_proxy(pred_items, ref_items, extractor)
        else:
            fidelity = float("nan")
        inter = sum(r["iou_intersection"] for r in ok_rows)
        union = sum(r["iou_union"] for r in ok_rows)
        inter_o = sum(r["iou_occ_intersection"] for r in ok_rows)
        union_o = sum(r["iou_occ_union"] for r in ok_rows)
        pairs = sum(r["order_pairs"] for r in ok_rows)
        correct = sum(r["order_correct"] for r in ok_rows)
        aggregates[strat] = {
            "iou": inter / union if union else 1.0,
            "iou_occluded": inter_o / union_o if union_o else 1.0,
            "order_accuracy": correct / pairs if pairs else None,
            "mean_passes": float(np.mean([r["passes"] for r in ok_rows])),
            "fidelity_proxy": fidelity,
            "num_samples": len(ok_rows),
            "num_failures": len([r for r in per_sample
                                 if r["strategy"] == strat and "error" in r]),
        }
    return EvalReport(corpus_id=corpus_id, config_hash=config_hash,
                      per_sample=per_sample, aggregates=aggregates)
