/** Pure gesture -> edit-delta math for the canvas manipulation handles. */

import { EditDelta } from "./types.js";

export interface DragGesture {
  kind: "drag";
  dx: number;
  dy: number;
}

export interface ResizeGesture {
  kind: "resize";
  /** Distance from the layer pivot to the handle when the gesture started/ended. */
  startRadius: number;
  endRadius: number;
}

export interface RotateGesture {
  kind: "rotate";
  /** Angles (deg) of the pointer around the pivot at gesture start/end. */
  startAngle: number;
  endAngle: number;
}

export interface FlipGesture {
  kind: "flip";
}

export type Gesture = DragGesture | ResizeGesture | RotateGesture | FlipGesture;

export function gestureToDelta(g: Gesture): EditDelta {
  switch (g.kind) {
    case "drag":
      return { translate: [g.dx, g.dy] };
    case "resize": {
      if (g.startRadius <= 0) throw new Error("degenerate resize gesture");
      return { scale: g.endRadius / g.startRadius };
    }
    case "rotate":
      return { rotation: normalizeAngle(g.endAngle - g.startAngle) };
    case "flip":
      return { flip: true };
  }
}

export function normalizeAngle(deg: number): number {
  let a = deg % 360;
  if (a > 180) a -= 360;
  if (a < -180) a += 360;
  return a;
}
