import { describe, expect, test } from "vitest";

import { gestureToDelta, normalizeAngle } from "../src/gestures.js";
import { coalesce } from "../src/session.js";

describe("gesture mapping", () => {
  test("drag by (10,5) becomes translate delta (10,5)", () => {
    expect(gestureToDelta({ kind: "drag", dx: 10, dy: 5 })).toEqual({ translate: [10, 5] });
  });

  test("resize handle to twice the pivot distance becomes scale 2.0", () => {
    expect(gestureToDelta({ kind: "resize", startRadius: 12, endRadius: 24 })).toEqual({
      scale: 2.0,
    });
  });

  test("rotate maps to the swept angle", () => {
    expect(gestureToDelta({ kind: "rotate", startAngle: 10, endAngle: 55 })).toEqual({
      rotation: 45,
    });
  });

  test("flip maps to a flip toggle", () => {
    expect(gestureToDelta({ kind: "flip" })).toEqual({ flip: true });
  });

  test("degenerate resize is rejected", () => {
    expect(() => gestureToDelta({ kind: "resize", startRadius: 0, endRadius: 5 })).toThrow();
  });

  test("angles normalize into (-180, 180]", () => {
    expect(normalizeAngle(350)).toBe(-10);
    expect(normalizeAngle(-350)).toBe(10);
  });
});

describe("gesture coalescing", () => {
  test("translations add, scales multiply, flips toggle", () => {
    const merged = coalesce(
      { translate: [3, 1], scale: 2, flip: true },
      { translate: [2, 2], scale: 0.5, flip: true, rotation: 15 },
    );
    expect(merged.translate).toEqual([5, 3]);
    expect(merged.scale).toBe(1);
    expect(merged.flip).toBe(false);
    expect(merged.rotation).toBe(15);
  });

  test("z and visible take the latest value", () => {
    expect(coalesce({ z_index: 1, visible: false }, { z_index: 3, visible: true })).toEqual({
      z_index: 3,
      visible: true,
    });
  });
});
