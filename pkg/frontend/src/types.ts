/** Wire types mirroring the recomposition service schemas (schema_version 1). */

export const SCHEMA_VERSION = 1;

export interface EditState {
  translate: [number, number];
  scale: number;
  flip: boolean;
  rotation: number;
  z_index: number;
  visible: boolean;
}

export function identityEdit(zIndex: number): EditState {
  return { translate: [0, 0], scale: 1, flip: false, rotation: 0, z_index: zIndex, visible: true };
}

export function editsEqual(a: EditState, b: EditState): boolean {
  return (
    a.translate[0] === b.translate[0] &&
    a.translate[1] === b.translate[1] &&
    a.scale === b.scale &&
    a.flip === b.flip &&
    a.rotation === b.rotation &&
    a.z_index === b.z_index &&
    a.visible === b.visible
  );
}

export interface LayerWire {
  object_id: number;
  category: string;
  edit: EditState;
  thumbnail_png_b64: string;
  rgb_png_b64?: string;
  mask_png_b64?: string;
  centroid?: [number, number];
}

export interface LayersResponse {
  schema_version: number;
  revision: number;
  canvas_size: [number, number];
  background_color: [number, number, number];
  layers: LayerWire[];
}

export interface EditDelta {
  translate?: [number, number];
  scale?: number;
  flip?: boolean;
  rotation?: number;
  z_index?: number;
  visible?: boolean;
  reset?: boolean;
}

export interface PatchResponse {
  schema_version: number;
  revision: number;
  edit: EditState;
  displaced: number[];
}

export interface CreateSessionResponse {
  schema_version: number;
  session_id: string;
  revision: number;
  num_layers: number;
}

/** Full-resolution pixel source of one layer, decoded client-side. */
export interface LayerPixels {
  width: number;
  height: number;
  /** RGB in [0,1], premultiplied by the binary mask (black outside). */
  rgb: Float64Array;
  /** Binary mask as 0/1. */
  mask: Float64Array;
  /** Pivot (cx, cy) of the original mask, as the server computes it. */
  centroid: [number, number];
}

export interface LayerView {
  objectId: number;
  category: string;
  thumbnailPngB64: string;
  edit: EditState;
  selected: boolean;
  pixels: LayerPixels | null;
}
