/** Layer list panel: thumbnails, selection, visibility toggles, flip button,
and z-order reordering by drag. */

import { SessionStore } from "./session.js";

export class LayerPanel {
  private element: HTMLElement;
  private draggedId: number | null = null;

  constructor(
    container: HTMLElement,
    private store: SessionStore,
    private onSelect: (objectId: number) => void,
  ) {
    this.element = document.createElement("div");
    this.element.className = "layer-panel";
    container.appendChild(this.element);
    store.onChange(() => this.render());
    this.render();
  }

  render(): void {
    this.element.innerHTML = "";
    const title = document.createElement("h2");
    title.textContent = `Layers (rev ${this.store.revision})`;
    this.element.appendChild(title);
    // top-most first in the panel
    const layers = this.store.orderedLayers().reverse();
    for (const layer of layers) {
      const row = document.createElement("div");
      row.className = "layer-row" + (layer.selected ? " selected" : "");
      row.draggable = true;
      row.dataset.oid = String(layer.objectId);

      const thumb = document.createElement("img");
      thumb.src = `data:image/png;base64,${layer.thumbnailPngB64}`;
      thumb.className = "layer-thumb";
      row.appendChild(thumb);

      const label = document.createElement("span");
      label.textContent = `#${layer.objectId} ${layer.category}`;
      row.appendChild(label);

      const vis = document.createElement("input");
      vis.type = "checkbox";
      vis.checked = layer.edit.visible;
      vis.title = "visible";
      vis.addEventListener("change", () => {
        void this.store.manipulate(layer.objectId, { visible: vis.checked });
      });
      row.appendChild(vis);

      const flip = document.createElement("button");
      flip.textContent = "flip";
      flip.addEventListener("click", () => {
        void this.store.manipulate(layer.objectId, { flip: true });
      });
      row.appendChild(flip);

      row.addEventListener("click", () => this.onSelect(layer.objectId));
      row.addEventListener("dragstart", () => {
        this.draggedId = layer.objectId;
      });
      row.addEventListener("dragover", (e) => e.preventDefault());
      row.addEventListener("drop", (e) => {
        e.preventDefault();
        if (this.draggedId === null || this.draggedId === layer.objectId) return;
        const order = this.store.orderedLayers().map((l) => l.objectId);
        const from = order.indexOf(this.draggedId);
        const to = order.indexOf(layer.objectId);
        order.splice(from, 1);
        order.splice(to, 0, this.draggedId);
        this.draggedId = null;
        void this.store.reorder(order);
      });
      this.element.appendChild(row);
    }
  }
}
