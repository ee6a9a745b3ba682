/** Session state with optimistic edits and server reconciliation.

Rules:
- at most one in-flight PATCH per layer; gestures issued meanwhile coalesce
  into a single pending delta (translate/rotation add, scale multiplies,
  flip xors, z/visible take the latest value);
- the local view applies deltas optimistically, then adopts the server's
  acknowledged edit state verbatim (field-for-field) on reconcile;
- sync() refetches layers at the server's current revision; a stale-revision
  response anywhere triggers a refetch rather than silent divergence;
- errors surface through the onError callback (UI shows a banner).
*/

import { ServiceClient, StaleRevisionError } from "./api.js";
import { decodePngB64 } from "./png.js";
import {
  EditDelta,
  EditState,
  LayerPixels,
  LayersResponse,
  LayerView,
  editsEqual,
} from "./types.js";

export type Listener = () => void;

function applyDelta(edit: EditState, delta: EditDelta): EditState {
  if (delta.reset) throw new Error("reset deltas reconcile from the server response");
  const out: EditState = {
    translate: [...edit.translate],
    scale: edit.scale,
    flip: edit.flip,
    rotation: edit.rotation,
    z_index: edit.z_index,
    visible: edit.visible,
  };
  if (delta.translate) {
    out.translate = [out.translate[0] + delta.translate[0], out.translate[1] + delta.translate[1]];
  }
  if (delta.scale !== undefined) out.scale *= delta.scale;
  if (delta.flip) out.flip = !out.flip;
  if (delta.rotation !== undefined) out.rotation += delta.rotation;
  if (delta.z_index !== undefined) out.z_index = delta.z_index;
  if (delta.visible !== undefined) out.visible = delta.visible;
  return out;
}

export function coalesce(a: EditDelta, b: EditDelta): EditDelta {
  const out: EditDelta = { ...a };
  if (b.translate) {
    out.translate = a.translate
      ? [a.translate[0] + b.translate[0], a.translate[1] + b.translate[1]]
      : b.translate;
  }
  if (b.scale !== undefined) out.scale = (a.scale ?? 1) * b.scale;
  if (b.flip) out.flip = !(a.flip ?? false);
  if (b.rotation !== undefined) out.rotation = (a.rotation ?? 0) + b.rotation;
  if (b.z_index !== undefined) out.z_index = b.z_index;
  if (b.visible !== undefined) out.visible = b.visible;
  if (b.reset) return { reset: true };
  return out;
}

export class SessionStore {
  revision = -1;
  canvasSize: [number, number] = [0, 0];
  background: [number, number, number] = [0, 0, 0];
  layers = new Map<number, LayerView>();
  lastError: string | null = null;

  private inFlight = new Map<number, Promise<void>>();
  private pending = new Map<number, EditDelta>();
  private listeners: Listener[] = [];

  constructor(
    readonly client: ServiceClient,
    readonly sessionId: string,
  ) {}

  onChange(fn: Listener): void {
    this.listeners.push(fn);
  }

  private emit(): void {
    for (const fn of this.listeners) fn();
  }

  private fail(err: unknown): void {
    this.lastError = err instanceof Error ? err.message : String(err);
    this.emit();
  }

  /** Fetch the layer list (and pixel sources once) at the server revision. */
  async sync(): Promise<void> {
    try {
      const needPixels = this.layers.size === 0;
      const res: LayersResponse = await this.client.layers(this.sessionId, needPixels);
      this.canvasSize = res.canvas_size;
      this.background = [
        res.background_color[0] / 255,
        res.background_color[1] / 255,
        res.background_color[2] / 255,
      ];
      const seen = new Set<number>();
      for (const wire of res.layers) {
        seen.add(wire.object_id);
        const existing = this.layers.get(wire.object_id);
        let pixels: LayerPixels | null = existing?.pixels ?? null;
        if (pixels === null && wire.rgb_png_b64 && wire.mask_png_b64 && wire.centroid) {
          pixels = await decodeLayerPixels(wire.rgb_png_b64, wire.mask_png_b64, wire.centroid);
        }
        this.layers.set(wire.object_id, {
          objectId: wire.object_id,
          category: wire.category,
          thumbnailPngB64: wire.thumbnail_png_b64,
          edit: wire.edit,
          selected: existing?.selected ?? false,
          pixels,
        });
      }
      for (const oid of [...this.layers.keys()]) {
        if (!seen.has(oid)) this.layers.delete(oid);
      }
      this.revision = res.revision;
      this.lastError = null;
      this.emit();
    } catch (err) {
      this.fail(err);
      throw err;
    }
  }

  /** Optimistic local edit + queued PATCH; resolves when this layer is idle. */
  manipulate(objectId: number, delta: EditDelta): Promise<void> {
    const view = this.layers.get(objectId);
    if (!view) return Promise.reject(new Error(`unknown layer ${objectId}`));
    if (!delta.reset) {
      view.edit = applyDelta(view.edit, delta);
      this.emit();
    }
    const queued = this.pending.get(objectId);
    if (queued || this.inFlight.has(objectId)) {
      this.pending.set(objectId, queued ? coalesce(queued, delta) : delta);
      return this.idle(objectId);
    }
    return this.dispatch(objectId, delta);
  }

  private dispatch(objectId: number, delta: EditDelta): Promise<void> {
    const run = (async () => {
      try {
        const res = await this.client.patchLayer(this.sessionId, objectId, delta);
        const view = this.layers.get(objectId);
        if (view) view.edit = res.edit; // adopt the server state verbatim
        this.revision = res.revision;
        if (res.displaced.length > 0) await this.refreshEdits();
        this.lastError = null;
        this.emit();
      } catch (err) {
        if (err instanceof StaleRevisionError) {
          await this.sync();
        } else {
          this.fail(err);
          throw err;
        }
      } finally {
        this.inFlight.delete(objectId);
        const next = this.pending.get(objectId);
        if (next) {
          this.pending.delete(objectId);
          void this.dispatch(objectId, next);
        }
      }
    })();
    this.inFlight.set(objectId, run);
    return run;
  }

  /** Resolves when no PATCH for this layer (or any layer) is outstanding. */
  async idle(objectId?: number): Promise<void> {
    for (;;) {
      const waits =
        objectId === undefined
          ? [...this.inFlight.values()]
          : ([this.inFlight.get(objectId)].filter(Boolean) as Promise<void>[]);
      if (waits.length === 0) return;
      await Promise.allSettled(waits);
    }
  }

  /** Re-pull just the edit states at the current server revision. */
  private async refreshEdits(): Promise<void> {
    const res = await this.client.layers(this.sessionId, false);
    for (const wire of res.layers) {
      const view = this.layers.get(wire.object_id);
      if (view) view.edit = wire.edit;
    }
    this.revision = res.revision;
  }

  async reorder(order: number[]): Promise<void> {
    try {
      await this.client.reorder(this.sessionId, order);
      await this.refreshEdits();
      this.lastError = null;
      this.emit();
    } catch (err) {
      this.fail(err);
      throw err;
    }
  }

  async resetAll(): Promise<void> {
    for (const oid of [...this.layers.keys()].sort((a, b) => a - b)) {
      await this.manipulate(oid, { reset: true });
      await this.idle(oid);
    }
    await this.refreshEdits();
    this.emit();
  }

  orderedLayers(): LayerView[] {
    return [...this.layers.values()].sort((a, b) => a.edit.z_index - b.edit.z_index);
  }

  /** Field-for-field equality of local edits against the server (post-reconcile). */
  async convergedWithServer(): Promise<boolean> {
    await this.idle();
    const res = await this.client.layers(this.sessionId, false);
    for (const wire of res.layers) {
      const view = this.layers.get(wire.object_id);
      if (!view || !editsEqual(view.edit, wire.edit)) return false;
    }
    return res.revision === this.revision;
  }
}

async function decodeLayerPixels(
  rgbB64: string,
  maskB64: string,
  centroid: [number, number],
): Promise<LayerPixels> {
  const rgbPng = await decodePngB64(rgbB64);
  const maskPng = await decodePngB64(maskB64);
  if (rgbPng.channels !== 3 || maskPng.channels !== 1) {
    throw new Error("unexpected layer pixel formats");
  }
  const n = rgbPng.width * rgbPng.height;
  const rgb = new Float64Array(n * 3);
  for (let i = 0; i < n * 3; i++) rgb[i] = rgbPng.data[i] / 255;
  const mask = new Float64Array(n);
  for (let i = 0; i < n; i++) mask[i] = maskPng.data[i] > 127 ? 1 : 0;
  return { width: rgbPng.width, height: rgbPng.height, rgb, mask, centroid };
}
