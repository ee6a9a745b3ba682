/** Client-side composite: a faithful port of the server renderer.

Same sampling rules (nearest-neighbor for the mask, bilinear for RGB),
same pivot (original mask centroid), same painter order, all in float64,
so the optimistic preview matches the server composite to within PNG
quantization. */

import { EditState, LayerPixels } from "./types.js";

export interface CompositeInput {
  canvasW: number;
  canvasH: number;
  /** Background RGB in [0,1]. */
  background: [number, number, number];
  layers: { pixels: LayerPixels; edit: EditState }[];
}

type Mat3 = [number, number, number, number, number, number, number, number, number];

function mul(a: Mat3, b: Mat3): Mat3 {
  const out = new Array(9).fill(0) as Mat3;
  for (let r = 0; r < 3; r++) {
    for (let c = 0; c < 3; c++) {
      out[r * 3 + c] = a[r * 3] * b[c] + a[r * 3 + 1] * b[3 + c] + a[r * 3 + 2] * b[6 + c];
    }
  }
  return out;
}

function invertAffine(m: Mat3): Mat3 {
  // [a b tx; c d ty; 0 0 1]
  const [a, b, tx, c, d, ty] = [m[0], m[1], m[2], m[3], m[4], m[5]];
  const det = a * d - b * c;
  const ia = d / det;
  const ib = -b / det;
  const ic = -c / det;
  const id = a / det;
  return [ia, ib, -(ia * tx + ib * ty), ic, id, -(ic * tx + id * ty), 0, 0, 1];
}

/** Forward matrix: translate(target) . rotate . flip . scale . translate(-pivot). */
export function editMatrix(edit: EditState, centroid: [number, number]): Mat3 {
  const [cx, cy] = centroid;
  const t1: Mat3 = [1, 0, -cx, 0, 1, -cy, 0, 0, 1];
  const s: Mat3 = [edit.scale, 0, 0, 0, edit.scale, 0, 0, 0, 1];
  const f: Mat3 = [edit.flip ? -1 : 1, 0, 0, 0, 1, 0, 0, 0, 1];
  const th = (edit.rotation * Math.PI) / 180;
  const r: Mat3 = [Math.cos(th), -Math.sin(th), 0, Math.sin(th), Math.cos(th), 0, 0, 0, 1];
  const t2: Mat3 = [1, 0, cx + edit.translate[0], 0, 1, cy + edit.translate[1], 0, 0, 1];
  return mul(t2, mul(r, mul(f, mul(s, t1))));
}

/** numpy-compatible rint: round half to even. */
function rint(x: number): number {
  const frac = x - Math.floor(x);
  if (frac === 0.5) return 2 * Math.round(x / 2);
  return Math.round(x);
}

/** Place one edited layer; returns (h*w) RGBA float arrays. */
export function placeLayer(
  pixels: LayerPixels,
  edit: EditState,
  canvasW: number,
  canvasH: number,
): { rgb: Float64Array; alpha: Float64Array } {
  const minv = invertAffine(editMatrix(edit, pixels.centroid));
  const { width: sw, height: sh, rgb: src, mask } = pixels;
  const rgb = new Float64Array(canvasW * canvasH * 3);
  const alpha = new Float64Array(canvasW * canvasH);
  for (let y = 0; y < canvasH; y++) {
    for (let x = 0; x < canvasW; x++) {
      const sx = minv[0] * x + minv[1] * y + minv[2];
      const sy = minv[3] * x + minv[4] * y + minv[5];
      const nx = rint(sx);
      const ny = rint(sy);
      let a = 0;
      if (nx >= 0 && nx < sw && ny >= 0 && ny < sh) {
        a = mask[ny * sw + nx] > 0.5 ? 1 : 0;
      }
      alpha[y * canvasW + x] = a;
      if (a === 0) continue;
      const x0 = Math.min(Math.max(Math.floor(sx), 0), sw - 1);
      const y0 = Math.min(Math.max(Math.floor(sy), 0), sh - 1);
      const x1 = Math.min(x0 + 1, sw - 1);
      const y1 = Math.min(y0 + 1, sh - 1);
      const fx = Math.min(Math.max(sx - x0, 0), 1);
      const fy = Math.min(Math.max(sy - y0, 0), 1);
      for (let ch = 0; ch < 3; ch++) {
        const c00 = src[(y0 * sw + x0) * 3 + ch];
        const c01 = src[(y0 * sw + x1) * 3 + ch];
        const c10 = src[(y1 * sw + x0) * 3 + ch];
        const c11 = src[(y1 * sw + x1) * 3 + ch];
        const v =
          c00 * (1 - fx) * (1 - fy) + c01 * fx * (1 - fy) + c10 * (1 - fx) * fy + c11 * fx * fy;
        rgb[(y * canvasW + x) * 3 + ch] = Math.min(Math.max(v, 0), 1);
      }
    }
  }
  return { rgb, alpha };
}

/** Painter's algorithm over edited layers; returns (h*w*3) RGB in [0,1]. */
export function renderComposite(input: CompositeInput): Float64Array {
  const { canvasW: w, canvasH: h } = input;
  const out = new Float64Array(w * h * 3);
  for (let i = 0; i < w * h; i++) {
    out[i * 3] = input.background[0];
    out[i * 3 + 1] = input.background[1];
    out[i * 3 + 2] = input.background[2];
  }
  const ordered = [...input.layers].sort((a, b) => a.edit.z_index - b.edit.z_index);
  for (const layer of ordered) {
    if (!layer.edit.visible) continue;
    const placed = placeLayer(layer.pixels, layer.edit, w, h);
    for (let i = 0; i < w * h; i++) {
      const a = placed.alpha[i];
      if (a === 0) continue;
      for (let ch = 0; ch < 3; ch++) {
        out[i * 3 + ch] = placed.rgb[i * 3 + ch] * a + out[i * 3 + ch] * (1 - a);
      }
    }
  }
  return out;
}

/** Mean absolute difference in 8-bit units between two RGB buffers. */
export function meanAbsDiff8bit(a: Float64Array, b: Float64Array): number {
  if (a.length !== b.length) throw new Error("length mismatch");
  let total = 0;
  for (let i = 0; i < a.length; i++) total += Math.abs(a[i] - b[i]) * 255;
  return total / a.length;
}
