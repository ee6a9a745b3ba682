/** Editing canvas: live client-side composite plus direct-manipulation
handles (drag to move, corner handle to resize, top handle to rotate).

The optimistic composite renders on every change; when a gesture ends the
server composite for the acknowledged revision is fetched and drawn as
ground truth. */

import { renderComposite } from "./compositor.js";
import { Gesture, gestureToDelta } from "./gestures.js";
import { decodePng } from "./png.js";
import { SessionStore } from "./session.js";
import { LayerPixels, LayerView } from "./types.js";

const VIEW_SCALE = 6;

export class CanvasView {
  private canvas: HTMLCanvasElement;
  private ctx: CanvasRenderingContext2D;
  private banner: HTMLElement;
  private selectedId: number | null = null;
  private gesture:
    | { mode: "drag" | "resize" | "rotate"; startX: number; startY: number; moved: boolean }
    | null = null;

  constructor(
    container: HTMLElement,
    private store: SessionStore,
  ) {
    this.canvas = document.createElement("canvas");
    this.canvas.className = "edit-canvas";
    this.banner = document.createElement("div");
    this.banner.className = "error-banner";
    this.banner.hidden = true;
    container.appendChild(this.banner);
    container.appendChild(this.canvas);
    this.ctx = this.canvas.getContext("2d")!;
    store.onChange(() => this.render());
    this.canvas.addEventListener("pointerdown", (e) => this.pointerDown(e));
    this.canvas.addEventListener("pointermove", (e) => this.pointerMove(e));
    this.canvas.addEventListener("pointerup", (e) => this.pointerUp(e));
  }

  select(objectId: number): void {
    this.selectedId = objectId;
    for (const layer of this.store.layers.values()) {
      layer.selected = layer.objectId === objectId;
    }
    this.render();
  }

  render(): void {
    this.banner.hidden = this.store.lastError === null;
    if (this.store.lastError !== null) {
      this.banner.textContent = `connection problem: ${this.store.lastError}`;
    }
    const [h, w] = this.store.canvasSize;
    if (h === 0) return;
    this.canvas.width = w * VIEW_SCALE;
    this.canvas.height = h * VIEW_SCALE;
    const layers = this.store
      .orderedLayers()
      .filter((l): l is LayerView & { pixels: LayerPixels } => l.pixels !== null)
      .map((l) => ({ pixels: l.pixels, edit: l.edit }));
    const rgb = renderComposite({
      canvasW: w,
      canvasH: h,
      background: this.store.background,
      layers,
    });
    const img = this.ctx.createImageData(w, h);
    for (let i = 0; i < w * h; i++) {
      img.data[i * 4] = Math.round(rgb[i * 3] * 255);
      img.data[i * 4 + 1] = Math.round(rgb[i * 3 + 1] * 255);
      img.data[i * 4 + 2] = Math.round(rgb[i * 3 + 2] * 255);
      img.data[i * 4 + 3] = 255;
    }
    createImageBitmap(img).then((bmp) => {
      this.ctx.imageSmoothingEnabled = false;
      this.ctx.drawImage(bmp, 0, 0, w * VIEW_SCALE, h * VIEW_SCALE);
      this.drawHandles();
    });
  }

  /** After a gesture lands, draw the server's composite as ground truth. */
  private async confirmWithServer(): Promise<void> {
    try {
      await this.store.idle();
      const { png } = await this.store.client.composite(this.store.sessionId);
      const decoded = await decodePng(png);
      const [h, w] = this.store.canvasSize;
      const img = this.ctx.createImageData(w, h);
      for (let i = 0; i < w * h; i++) {
        img.data[i * 4] = decoded.data[i * 3];
        img.data[i * 4 + 1] = decoded.data[i * 3 + 1];
        img.data[i * 4 + 2] = decoded.data[i * 3 + 2];
        img.data[i * 4 + 3] = 255;
      }
      const bmp = await createImageBitmap(img);
      this.ctx.imageSmoothingEnabled = false;
      this.ctx.drawImage(bmp, 0, 0, w * VIEW_SCALE, h * VIEW_SCALE);
      this.drawHandles();
    } catch {
      // the store already surfaced the error banner
    }
  }

  private selectedPivot(): { x: number; y: number } | null {
    if (this.selectedId === null) return null;
    const layer = this.store.layers.get(this.selectedId);
    if (!layer?.pixels) return null;
    const [cx, cy] = layer.pixels.centroid;
    return {
      x: (cx + layer.edit.translate[0]) * VIEW_SCALE,
      y: (cy + layer.edit.translate[1]) * VIEW_SCALE,
    };
  }

  private drawHandles(): void {
    const pivot = this.selectedPivot();
    if (!pivot) return;
    const r = 14;
    this.ctx.strokeStyle = "#2b8";
    this.ctx.lineWidth = 2;
    this.ctx.strokeRect(pivot.x - r, pivot.y - r, 2 * r, 2 * r);
    this.ctx.fillStyle = "#2b8";
    this.ctx.fillRect(pivot.x + r - 4, pivot.y + r - 4, 8, 8); // resize corner
    this.ctx.beginPath();
    this.ctx.arc(pivot.x, pivot.y - r - 10, 4, 0, Math.PI * 2); // rotate knob
    this.ctx.fill();
  }

  private hit(e: PointerEvent): { mode: "drag" | "resize" | "rotate" } | null {
    const pivot = this.selectedPivot();
    if (!pivot) return null;
    const rect = this.canvas.getBoundingClientRect();
    const x = e.clientX - rect.left;
    const y = e.clientY - rect.top;
    const r = 14;
    if (Math.hypot(x - (pivot.x + r), y - (pivot.y + r)) < 8) return { mode: "resize" };
    if (Math.hypot(x - pivot.x, y - (pivot.y - r - 10)) < 8) return { mode: "rotate" };
    return { mode: "drag" };
  }

  private pointerDown(e: PointerEvent): void {
    const hit = this.hit(e);
    if (!hit) return;
    this.canvas.setPointerCapture(e.pointerId);
    this.gesture = { mode: hit.mode, startX: e.clientX, startY: e.clientY, moved: false };
  }

  private pointerMove(e: PointerEvent): void {
    if (!this.gesture || this.selectedId === null) return;
    const pivot = this.selectedPivot()!;
    const rect = this.canvas.getBoundingClientRect();
    const curX = e.clientX - rect.left;
    const curY = e.clientY - rect.top;
    const prevX = this.gesture.startX - rect.left;
    const prevY = this.gesture.startY - rect.top;
    let g: Gesture | null = null;
    if (this.gesture.mode === "drag") {
      g = {
        kind: "drag",
        dx: (e.clientX - this.gesture.startX) / VIEW_SCALE,
        dy: (e.clientY - this.gesture.startY) / VIEW_SCALE,
      };
    } else if (this.gesture.mode === "resize") {
      const startR = Math.hypot(prevX - pivot.x, prevY - pivot.y);
      const endR = Math.hypot(curX - pivot.x, curY - pivot.y);
      if (startR > 0 && endR > 0) g = { kind: "resize", startRadius: startR, endRadius: endR };
    } else {
      const a0 = (Math.atan2(prevY - pivot.y, prevX - pivot.x) * 180) / Math.PI;
      const a1 = (Math.atan2(curY - pivot.y, curX - pivot.x) * 180) / Math.PI;
      g = { kind: "rotate", startAngle: a0, endAngle: a1 };
    }
    if (g) {
      void this.store.manipulate(this.selectedId, gestureToDelta(g));
      this.gesture.startX = e.clientX;
      this.gesture.startY = e.clientY;
      this.gesture.moved = true;
    }
  }

  private pointerUp(e: PointerEvent): void {
    if (this.gesture?.moved) void this.confirmWithServer();
    this.gesture = null;
    this.canvas.releasePointerCapture(e.pointerId);
  }
}
