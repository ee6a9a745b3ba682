/** Spawns the Python recomposition service for the integration tests. */

import { spawn, ChildProcess } from "node:child_process";

declare global {
  // eslint-disable-next-line no-var
  var __service: ChildProcess | undefined;
}

const PORT = 8031;
export const BASE_URL = `http://127.0.0.1:${PORT}`;

async function waitForHealth(timeoutMs: number): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  for (;;) {
    try {
      const res = await fetch(`${BASE_URL}/healthz`);
      if (res.ok) return;
    } catch {
      // not up yet
    }
    if (Date.now() > deadline) throw new Error("service did not come up");
    await new Promise((r) => setTimeout(r, 250));
  }
}

export default async function setup(): Promise<() => void> {
  const proc = spawn(
    "python3",
    ["-m", "deocc.cli", "serve", "--port", String(PORT), "--host", "127.0.0.1"],
    { stdio: "ignore", cwd: "..", env: { ...process.env } },
  );
  globalThis.__service = proc;
  await waitForHealth(30_000);
  process.env.DEOCC_SERVICE_URL = BASE_URL;
  return () => {
    proc.kill("SIGTERM");
  };
}
