/** Shared fixtures: build an upload session with two overlapping squares. */

import { deflateSync } from "node:zlib";
import { ServiceClient } from "../src/api.js";
import { decodePng } from "../src/png.js";

export function serviceUrl(): string {
  const url = process.env.DEOCC_SERVICE_URL;
  if (!url) throw new Error("service URL missing; globalSetup did not run");
  return url;
}

// -- tiny PNG encoder (enough to build upload payloads in tests) -------------

function crc32(buf: Uint8Array): number {
  let crc = ~0;
  for (let i = 0; i < buf.length; i++) {
    crc ^= buf[i];
    for (let j = 0; j < 8; j++) crc = (crc >>> 1) ^ (0xedb88320 & -(crc & 1));
  }
  return ~crc >>> 0;
}

function chunk(type: string, body: Uint8Array): Uint8Array {
  const out = new Uint8Array(12 + body.length);
  const dv = new DataView(out.buffer);
  dv.setUint32(0, body.length);
  for (let i = 0; i < 4; i++) out[4 + i] = type.charCodeAt(i);
  out.set(body, 8);
  const crcBuf = out.subarray(4, 8 + body.length);
  dv.setUint32(8 + body.length, crc32(crcBuf));
  return out;
}

export function encodePng(
  data: Uint8Array,
  width: number,
  height: number,
  channels: 1 | 3,
): Uint8Array {
  const colorType = channels === 1 ? 0 : 2;
  const ihdr = new Uint8Array(13);
  const dv = new DataView(ihdr.buffer);
  dv.setUint32(0, width);
  dv.setUint32(4, height);
  ihdr[8] = 8;
  ihdr[9] = colorType;
  const stride = width * channels;
  const raw = new Uint8Array(height * (stride + 1));
  for (let y = 0; y < height; y++) {
    raw[y * (stride + 1)] = 0; // filter: none
    raw.set(data.subarray(y * stride, (y + 1) * stride), y * (stride + 1) + 1);
  }
  const idat = new Uint8Array(deflateSync(raw));
  const sig = new Uint8Array([137, 80, 78, 71, 13, 10, 26, 10]);
  const parts = [sig, chunk("IHDR", ihdr), chunk("IDAT", idat), chunk("IEND", new Uint8Array(0))];
  const total = parts.reduce((n, p) => n + p.length, 0);
  const out = new Uint8Array(total);
  let off = 0;
  for (const p of parts) {
    out.set(p, off);
    off += p.length;
  }
  return out;
}

export function b64(bytes: Uint8Array): string {
  let bin = "";
  for (const byte of bytes) bin += String.fromCharCode(byte);
  return btoa(bin);
}

export interface TestScene {
  size: number;
  background: [number, number, number];
}

/** Two overlapping opaque squares (red below, green above) on 32x32. */
export function uploadPayload(): { payload: unknown; scene: TestScene } {
  const n = 32;
  const rgbA = new Uint8Array(n * n * 3);
  const maskA = new Uint8Array(n * n);
  const rgbB = new Uint8Array(n * n * 3);
  const maskB = new Uint8Array(n * n);
  for (let y = 0; y < n; y++) {
    for (let x = 0; x < n; x++) {
      if (y >= 4 && y < 18 && x >= 4 && x < 18) {
        maskA[y * n + x] = 255;
        rgbA[(y * n + x) * 3] = 255;
        if (x < 11) rgbA[(y * n + x) * 3 + 1] = 255; // asymmetric yellow half
      }
      if (y >= 10 && y < 26 && x >= 10 && x < 26) {
        maskB[y * n + x] = 255;
        rgbB[(y * n + x) * 3 + 1] = 255;
      }
    }
  }
  const payload = {
    schema_version: 1,
    layers: {
      canvas_size: [n, n],
      background_color: [10, 10, 10],
      layers: [
        {
          object_id: 1,
          category: "square-flat",
          rgb_png_b64: b64(encodePng(rgbA, n, n, 3)),
          mask_png_b64: b64(encodePng(maskA, n, n, 1)),
          z_index: 0,
        },
        {
          object_id: 2,
          category: "square-flat",
          rgb_png_b64: b64(encodePng(rgbB, n, n, 3)),
          mask_png_b64: b64(encodePng(maskB, n, n, 1)),
          z_index: 1,
        },
      ],
    },
  };
  return { payload, scene: { size: n, background: [10 / 255, 10 / 255, 10 / 255] } };
}

export async function newSession(client: ServiceClient): Promise<string> {
  const { payload } = uploadPayload();
  const res = await client.createUploadSession(payload);
  return res.session_id;
}

export async function serverCompositeRgb(
  client: ServiceClient,
  sessionId: string,
  revision?: number,
): Promise<{ rgb: Float64Array; revision: number }> {
  const { png, revision: rev } = await client.composite(sessionId, revision);
  const decoded = await decodePng(png);
  const out = new Float64Array(decoded.data.length);
  for (let i = 0; i < decoded.data.length; i++) out[i] = decoded.data[i] / 255;
  return { rgb: out, revision: rev };
}
