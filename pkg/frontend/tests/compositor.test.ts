/** The client compositor must reproduce the server composite pixel-for-pixel
(within PNG 8-bit quantization) across the whole edit vocabulary. */

import { beforeAll, describe, expect, test } from "vitest";

import { ServiceClient } from "../src/api.js";
import { meanAbsDiff8bit, renderComposite } from "../src/compositor.js";
import { SessionStore } from "../src/session.js";
import { LayerPixels, LayerView } from "../src/types.js";
import { newSession, serverCompositeRgb, serviceUrl } from "./helpers.js";

let client: ServiceClient;

beforeAll(() => {
  client = new ServiceClient(serviceUrl());
});

async function clientComposite(store: SessionStore): Promise<Float64Array> {
  const layers = store
    .orderedLayers()
    .filter((l): l is LayerView & { pixels: LayerPixels } => l.pixels !== null)
    .map((l) => ({ pixels: l.pixels, edit: l.edit }));
  return renderComposite({
    canvasW: store.canvasSize[1],
    canvasH: store.canvasSize[0],
    background: store.background,
    layers,
  });
}

describe("client compositor vs server", () => {
  test("fresh session matches within PNG quantization", async () => {
    const sid = await newSession(client);
    const store = new SessionStore(client, sid);
    await store.sync();
    const local = await clientComposite(store);
    const { rgb: remote } = await serverCompositeRgb(client, sid);
    expect(meanAbsDiff8bit(local, remote)).toBeLessThanOrEqual(0.51);
  });

  test("after drag + resize + rotate + flip + z-swap, still within 2px MAD", async () => {
    const sid = await newSession(client);
    const store = new SessionStore(client, sid);
    await store.sync();
    await store.manipulate(1, { translate: [4, 2] });
    await store.manipulate(1, { rotation: 30 });
    await store.manipulate(2, { scale: 1.5 });
    await store.manipulate(2, { flip: true });
    await store.idle();
    await store.reorder([2, 1]);
    const local = await clientComposite(store);
    const { rgb: remote } = await serverCompositeRgb(client, sid);
    expect(meanAbsDiff8bit(local, remote)).toBeLessThanOrEqual(2.0);
    // in practice the port is exact to quantization
    expect(meanAbsDiff8bit(local, remote)).toBeLessThanOrEqual(0.51);
  });

  test("hidden layers are excluded like the server excludes them", async () => {
    const sid = await newSession(client);
    const store = new SessionStore(client, sid);
    await store.sync();
    await store.manipulate(2, { visible: false });
    await store.idle();
    const local = await clientComposite(store);
    const { rgb: remote } = await serverCompositeRgb(client, sid);
    expect(meanAbsDiff8bit(local, remote)).toBeLessThanOrEqual(0.51);
  });
});
