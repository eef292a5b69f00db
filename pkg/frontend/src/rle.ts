/**
 * Run-length wire format for binary masks, shared with the segmentation
 * service: row-major pixel order, alternating run lengths, the first run
 * counting background pixels (so a mask that starts with foreground begins
 * with a 0). Run lengths must be non-negative integers summing to
 * height * width.
 */

export type Shape2D = [number, number];

export function rleDecode(rle: number[], shape: Shape2D): Uint8Array {
  const [height, width] = shape;
  const total = height * width;
  const out = new Uint8Array(total);
  let pos = 0;
  let value = 0;
  for (const run of rle) {
    if (!Number.isInteger(run) || run < 0) {
      throw new Error(`run lengths must be non-negative integers, got ${run}`);
    }
    if (value === 1) {
      out.fill(1, pos, pos + run);
    }
    pos += run;
    value = 1 - value;
  }
  if (pos !== total) {
    throw new Error(`run lengths sum to ${pos}, expected ${total} for ${height}x${width}`);
  }
  return out;
}

export function rleEncode(mask: ArrayLike<number>, shape: Shape2D): number[] {
  const [height, width] = shape;
  const total = height * width;
  if (mask.length !== total) {
    throw new Error(`mask length ${mask.length} != ${total} for ${height}x${width}`);
  }
  const runs: number[] = [];
  let current = 0; // runs start from background
  let count = 0;
  for (let i = 0; i < total; i++) {
    const v = mask[i] ? 1 : 0;
    if (v === current) {
      count += 1;
    } else {
      runs.push(count);
      current = v;
      count = 1;
    }
  }
  runs.push(count);
  return runs;
}

export function maskArea(mask: Uint8Array): number {
  let n = 0;
  for (let i = 0; i < mask.length; i++) {
    if (mask[i]) n += 1;
  }
  return n;
}
