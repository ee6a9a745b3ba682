/** Typed HTTP client for the recomposition service. */

import {
  CreateSessionResponse,
  EditDelta,
  LayersResponse,
  PatchResponse,
  SCHEMA_VERSION,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(`HTTP ${status}: ${message}`);
  }
}

export class StaleRevisionError extends ApiError {}

async function jsonOrThrow<T>(res: Response): Promise<T> {
  if (!res.ok) {
    const text = await res.text();
    if (res.status === 409) throw new StaleRevisionError(res.status, text);
    throw new ApiError(res.status, text);
  }
  return (await res.json()) as T;
}

export class ServiceClient {
  constructor(readonly baseUrl: string) {}

  async health(): Promise<{ status: string }> {
    return jsonOrThrow(await fetch(`${this.baseUrl}/healthz`));
  }

  async createUploadSession(payload: unknown): Promise<CreateSessionResponse> {
    const res = await fetch(`${this.baseUrl}/sessions`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
    return jsonOrThrow(res);
  }

  async createSynthSession(synth: {
    seed: number;
    size?: number;
    k_min?: number;
    k_max?: number;
    strategy?: string;
  }): Promise<CreateSessionResponse> {
    const res = await fetch(`${this.baseUrl}/sessions`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ schema_version: SCHEMA_VERSION, synth }),
    });
    return jsonOrThrow(res);
  }

  async layers(sessionId: string, includePixels = false): Promise<LayersResponse> {
    const q = includePixels ? "?include_pixels=1" : "";
    return jsonOrThrow(await fetch(`${this.baseUrl}/sessions/${sessionId}/layers${q}`));
  }

  async patchLayer(sessionId: string, objectId: number, delta: EditDelta): Promise<PatchResponse> {
    const res = await fetch(`${this.baseUrl}/sessions/${sessionId}/layers/${objectId}`, {
      method: "PATCH",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(delta),
    });
    return jsonOrThrow(res);
  }

  async reorder(sessionId: string, order: number[]): Promise<{ revision: number }> {
    const res = await fetch(`${this.baseUrl}/sessions/${sessionId}/reorder`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ order }),
    });
    return jsonOrThrow(res);
  }

  /** Server composite PNG; revision comes back in the X-Revision header. */
  async composite(sessionId: string, revision?: number): Promise<{ png: Uint8Array; revision: number }> {
    const q = revision === undefined ? "" : `?revision=${revision}`;
    const res = await fetch(`${this.baseUrl}/sessions/${sessionId}/composite${q}`);
    if (!res.ok) {
      const text = await res.text();
      if (res.status === 409) throw new StaleRevisionError(res.status, text);
      throw new ApiError(res.status, text);
    }
    const buf = new Uint8Array(await res.arrayBuffer());
    return { png: buf, revision: Number(res.headers.get("X-Revision")) };
  }
}
