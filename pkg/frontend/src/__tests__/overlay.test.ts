import { describe, expect, it } from "vitest";

import { DEFAULT_STYLE, maskDiffCount, maskToRgba } from "../overlay.js";

describe("maskToRgba", () => {
  it("colors set pixels and leaves background fully transparent", () => {
    const mask = Uint8Array.from([0, 1, 1, 0]);
    const rgba = maskToRgba(mask, [2, 2], { r: 10, g: 20, b: 30, alpha: 1 });
    expect(Array.from(rgba.slice(0, 4))).toEqual([0, 0, 0, 0]);
    expect(Array.from(rgba.slice(4, 8))).toEqual([10, 20, 30, 255]);
    expect(Array.from(rgba.slice(8, 12))).toEqual([10, 20, 30, 255]);
    expect(Array.from(rgba.slice(12, 16))).toEqual([0, 0, 0, 0]);
  });

  it("scales alpha and clamps it to [0, 1]", () => {
    const mask = Uint8Array.from([1]);
    expect(maskToRgba(mask, [1, 1], { r: 1, g: 1, b: 1, alpha: 0.5 })[3]).toBe(128);
    expect(maskToRgba(mask, [1, 1], { r: 1, g: 1, b: 1, alpha: 7 })[3]).toBe(255);
    expect(maskToRgba(mask, [1, 1], { r: 1, g: 1, b: 1, alpha: -1 })[3]).toBe(0);
  });

  it("never mutates the input mask", () => {
    const mask = Uint8Array.from([0, 1, 0, 1, 1, 0]);
    const copy = Uint8Array.from(mask);
    maskToRgba(mask, [2, 3], DEFAULT_STYLE);
    expect(Array.from(mask)).toEqual(Array.from(copy));
  });

  it("rejects a mask that does not match the shape", () => {
    expect(() => maskToRgba(new Uint8Array(5), [2, 3])).toThrow(/length/);
  });
});

describe("maskDiffCount", () => {
  it("is zero for identical masks", () => {
    const a = Uint8Array.from([0, 1, 1, 0, 1]);
    expect(maskDiffCount(a, Uint8Array.from(a))).toBe(0);
  });

  it("counts disagreements, treating any nonzero as set", () => {
    const a = Uint8Array.from([0, 1, 1, 0]);
    const b = Uint8Array.from([1, 1, 0, 0]);
    expect(maskDiffCount(a, b)).toBe(2);
    expect(maskDiffCount(a, Uint8Array.from([0, 255, 7, 0]))).toBe(0);
  });

  it("rejects length mismatches", () => {
    expect(() => maskDiffCount(new Uint8Array(3), new Uint8Array(4))).toThrow(/length/);
  });
});
