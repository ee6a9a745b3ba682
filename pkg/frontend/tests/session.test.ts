import { beforeAll, describe, expect, test } from "vitest";

import { ApiError, ServiceClient, StaleRevisionError } from "../src/api.js";
import { meanAbsDiff8bit, renderComposite } from "../src/compositor.js";
import { SessionStore } from "../src/session.js";
import { LayerPixels, LayerView, editsEqual } from "../src/types.js";
import { newSession, serverCompositeRgb, serviceUrl, uploadPayload } from "./helpers.js";

let client: ServiceClient;

beforeAll(() => {
  client = new ServiceClient(serviceUrl());
});

describe("sync", () => {
  test("fresh session lists layers in z order with pixel sources", async () => {
    const sid = await newSession(client);
    const store = new SessionStore(client, sid);
    await store.sync();
    const ordered = store.orderedLayers();
    expect(ordered.map((l) => l.objectId)).toEqual([1, 2]);
    expect(ordered.map((l) => l.edit.z_index)).toEqual([0, 1]);
    expect(ordered.every((l) => l.pixels !== null)).toBe(true);
    expect(store.revision).toBe(0);
  });

  test("network failure surfaces an explicit error, no silent divergence", async () => {
    const bad = new SessionStore(new ServiceClient("http://127.0.0.1:9"), "nope");
    await expect(bad.sync()).rejects.toThrow();
    expect(bad.lastError).not.toBeNull();
  });

  test("unknown session yields a 404 ApiError", async () => {
    const store = new SessionStore(client, "does-not-exist");
    await expect(store.sync()).rejects.toThrow(ApiError);
  });
});

describe("manipulate + reconcile", () => {
  test("optimistic edit reconciles to the server state field-for-field", async () => {
    const sid = await newSession(client);
    const store = new SessionStore(client, sid);
    await store.sync();
    await store.manipulate(1, { translate: [6, -2], rotation: 15 });
    await store.idle();
    expect(await store.convergedWithServer()).toBe(true);
    const edit = store.layers.get(1)!.edit;
    expect(edit.translate).toEqual([6, -2]);
    expect(edit.rotation).toBe(15);
  });

  test("rapid gestures coalesce: at most one in-flight PATCH per layer", async () => {
    const sid = await newSession(client);
    const store = new SessionStore(client, sid);
    await store.sync();
    let patches = 0;
    const orig = store.client.patchLayer.bind(store.client);
    // count real PATCH round trips
    (store.client as ServiceClient & { patchLayer: typeof orig }).patchLayer = async (
      s: string,
      o: number,
      d: Parameters<typeof orig>[2],
    ) => {
      patches += 1;
      return orig(s, o, d);
    };
    const burst = 12;
    const waits = [];
    for (let i = 0; i < burst; i++) waits.push(store.manipulate(1, { translate: [1, 0] }));
    await Promise.allSettled(waits);
    await store.idle();
    expect(patches).toBeLessThan(burst);
    expect(store.layers.get(1)!.edit.translate).toEqual([burst, 0]);
    expect(await store.convergedWithServer()).toBe(true);
  });

  test("optimistic composite within 2px MAD of server after reconcile", async () => {
    const sid = await newSession(client);
    const store = new SessionStore(client, sid);
    await store.sync();
    void store.manipulate(1, { translate: [5, 3] });
    void store.manipulate(2, { rotation: 20, scale: 1.25 });
    await store.idle();
    const layers = store
      .orderedLayers()
      .filter((l): l is LayerView & { pixels: LayerPixels } => l.pixels !== null)
      .map((l) => ({ pixels: l.pixels, edit: l.edit }));
    const local = renderComposite({
      canvasW: store.canvasSize[1],
      canvasH: store.canvasSize[0],
      background: store.background,
      layers,
    });
    const { rgb: remote } = await serverCompositeRgb(client, sid);
    expect(meanAbsDiff8bit(local, remote)).toBeLessThanOrEqual(2.0);
  });

  test("z collision displacement propagates to the local view", async () => {
    const sid = await newSession(client);
    const store = new SessionStore(client, sid);
    await store.sync();
    await store.manipulate(1, { z_index: 1 });
    await store.idle();
    expect(store.layers.get(1)!.edit.z_index).toBe(1);
    expect(store.layers.get(2)!.edit.z_index).toBe(2);
    expect(await store.convergedWithServer()).toBe(true);
  });
});

describe("two clients", () => {
  test("a change by one client converges on the other after sync", async () => {
    const sid = await newSession(client);
    const a = new SessionStore(client, sid);
    const b = new SessionStore(client, sid);
    await a.sync();
    await b.sync();
    await a.manipulate(1, { translate: [7, 7] });
    await a.idle();
    expect(editsEqual(a.layers.get(1)!.edit, b.layers.get(1)!.edit)).toBe(false);
    await b.sync();
    expect(editsEqual(a.layers.get(1)!.edit, b.layers.get(1)!.edit)).toBe(true);
    expect(b.revision).toBe(a.revision);
    expect(await b.convergedWithServer()).toBe(true);
  });

  test("stale composite requests raise StaleRevisionError for refetch", async () => {
    const sid = await newSession(client);
    await expect(client.composite(sid, 99)).rejects.toThrow(StaleRevisionError);
  });
});

describe("undo via server revisions", () => {
  test("reset-all reproduces the revision-0 composite bitwise", async () => {
    const sid = await newSession(client);
    const store = new SessionStore(client, sid);
    await store.sync();
    const { rgb: base } = await serverCompositeRgb(client, sid, 0);
    await store.reorder([2, 1]);
    await store.manipulate(1, { translate: [4, 2] });
    await store.idle();
    const { rgb: changed } = await serverCompositeRgb(client, sid);
    expect(meanAbsDiff8bit(base, changed)).toBeGreaterThan(0);
    await store.resetAll();
    const { rgb: reset } = await serverCompositeRgb(client, sid);
    expect(base).toEqual(reset);
    expect(await store.convergedWithServer()).toBe(true);
  });
});
