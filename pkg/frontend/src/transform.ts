/**
 * Pixel-space / view-space mapping for the canvas stack.
 *
 * The image layer is never scaled through CSS; every zoom or pan is this
 * one affine transform, so coordinates handed to the API are always image
 * pixels no matter how the canvas is displayed:
 *
 *   view = image * zoom + pan
 */

export interface ViewTransform {
  zoom: number;
  panX: number;
  panY: number;
}

export interface Point {
  x: number;
  y: number;
}

export const MIN_ZOOM = 0.25;
export const MAX_ZOOM = 8;

export function identityTransform(): ViewTransform {
  return { zoom: 1, panX: 0, panY: 0 };
}

export function imageToView(t: ViewTransform, x: number, y: number): Point {
  return { x: x * t.zoom + t.panX, y: y * t.zoom + t.panY };
}

export function viewToImage(t: ViewTransform, vx: number, vy: number): Point {
  return { x: (vx - t.panX) / t.zoom, y: (vy - t.panY) / t.zoom };
}

/**
 * Map a view-space click to an integer pixel, or null when it falls
 * outside the image; callers use null as the "ignore this click" signal.
 */
export function viewToPixel(
  t: ViewTransform,
  vx: number,
  vy: number,
  width: number,
  height: number,
): Point | null {
  const p = viewToImage(t, vx, vy);
  const x = Math.floor(p.x);
  const y = Math.floor(p.y);
  if (x < 0 || y < 0 || x >= width || y >= height) {
    return null;
  }
  return { x, y };
}

/** Rescale around a view-space anchor so the pixel under it stays put. */
export function zoomAt(
  t: ViewTransform,
  factor: number,
  anchorVx: number,
  anchorVy: number,
): ViewTransform {
  const zoom = Math.min(MAX_ZOOM, Math.max(MIN_ZOOM, t.zoom * factor));
  const pivot = viewToImage(t, anchorVx, anchorVy);
  return {
    zoom,
    panX: anchorVx - pivot.x * zoom,
    panY: anchorVy - pivot.y * zoom,
  };
}

export function panBy(t: ViewTransform, dx: number, dy: number): ViewTransform {
  return { zoom: t.zoom, panX: t.panX + dx, panY: t.panY + dy };
}
