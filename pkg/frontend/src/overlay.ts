/**
 * Mask-to-pixels helpers for the canvas overlay.  Pure functions: the input
 * mask is never mutated, callers own the returned buffers.
 */

import { Shape2D } from "./rle.js";

export interface OverlayStyle {
  r: number;
  g: number;
  b: number;
  /** 0..1 opacity applied to mask pixels; background stays transparent. */
  alpha: number;
}

export const DEFAULT_STYLE: OverlayStyle = { r: 237, g: 110, b: 60, alpha: 0.45 };

/** Build an RGBA byte buffer (h*w*4) with style color where the mask is set. */
export function maskToRgba(
  mask: ArrayLike<number>,
  shape: Shape2D,
  style: OverlayStyle = DEFAULT_STYLE,
): Uint8ClampedArray<ArrayBuffer> {
  const [h, w] = shape;
  if (mask.length !== h * w) {
    throw new Error(`mask length ${mask.length} does not match shape ${h}x${w}`);
  }
  const a = Math.round(Math.min(1, Math.max(0, style.alpha)) * 255);
  const out = new Uint8ClampedArray(new ArrayBuffer(h * w * 4));
  for (let i = 0; i < mask.length; i++) {
    if (mask[i]) {
      const o = i * 4;
      out[o] = style.r;
      out[o + 1] = style.g;
      out[o + 2] = style.b;
      out[o + 3] = a;
    }
  }
  return out;
}

/** Number of pixels where the two masks disagree. */
export function maskDiffCount(a: ArrayLike<number>, b: ArrayLike<number>): number {
  if (a.length !== b.length) {
    throw new Error("masks must have equal length");
  }
  let n = 0;
  for (let i = 0; i < a.length; i++) {
    if ((a[i] ? 1 : 0) !== (b[i] ? 1 : 0)) n++;
  }
  return n;
}
