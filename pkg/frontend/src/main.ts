/** Bootstrap: create or join a session and wire the panel + canvas. */

import { ServiceClient } from "./api.js";
import { CanvasView } from "./canvasView.js";
import { LayerPanel } from "./layerPanel.js";
import { SessionStore } from "./session.js";

async function boot(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const base = params.get("api") ?? "http://127.0.0.1:8008";
  const client = new ServiceClient(base);

  let sessionId = params.get("session");
  if (!sessionId) {
    const seed = Number(params.get("seed") ?? 7);
    const created = await client.createSynthSession({ seed, size: 64 });
    sessionId = created.session_id;
  }

  const store = new SessionStore(client, sessionId);
  const root = document.getElementById("app")!;
  const panelHost = document.createElement("div");
  const canvasHost = document.createElement("div");
  root.appendChild(canvasHost);
  root.appendChild(panelHost);

  const view = new CanvasView(canvasHost, store);
  new LayerPanel(panelHost, store, (oid) => view.select(oid));

  const toolbar = document.createElement("div");
  toolbar.className = "toolbar";
  const resetBtn = document.createElement("button");
  resetBtn.textContent = "reset all edits";
  resetBtn.addEventListener("click", () => void store.resetAll());
  const syncBtn = document.createElement("button");
  syncBtn.textContent = "sync";
  syncBtn.addEventListener("click", () => void store.sync());
  toolbar.append(resetBtn, syncBtn);
  root.prepend(toolbar);

  await store.sync();
  // converge with edits made by other clients
  window.setInterval(() => void store.sync(), 4000);
}

void boot();
