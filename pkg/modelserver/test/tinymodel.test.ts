import { describe, expect, it } from "vitest";
import { TinyLinearModel, tinyBias, tinyWeight } from "../src/tinymodel";

const model = new TinyLinearModel();
const P = 64;

describe("tiny linear model", () => {
  it("reports 4x4x4 dims, 3 classes, gradient support", () => {
    expect(model.dims).toEqual([4, 4, 4]);
    expect(model.numClasses).toBe(3);
    expect(model.numVoxels).toBe(P);
    expect(model.hasGradient).toBe(true);
  });

  it("uses weights that are exact in float32 and never zero", () => {
    for (let c = 0; c < 3; c++) {
      expect(Math.fround(tinyBias(c))).toBe(tinyBias(c));
      for (let i = 0; i < P; i++) {
        const w = tinyWeight(i, c);
        expect(Math.fround(w)).toBe(w);
        expect(w).not.toBe(0);
        expect(Math.abs(w)).toBeGreaterThanOrEqual(0.5 / 8);
      }
    }
  });

  it("matches the closed form logit by logit", () => {
    const x = new Float64Array(P);
    for (let i = 0; i < P; i++) x[i] = Math.fround((i % 7) / 7);
    const logits = model.forward(x);
    expect(logits.length).toBe(P * 3);
    for (let i = 0; i < P; i++) {
      for (let c = 0; c < 3; c++) {
        expect(logits[i * 3 + c]).toBe(tinyWeight(i, c) * x[i] + tinyBias(c));
      }
    }
  });

  it("returns the masked weight row as the gradient", () => {
    const x = new Float64Array(P).fill(0.5);
    const mask = new Uint8Array(P);
    for (let i = 0; i < P; i += 2) mask[i] = 1;
    const grad = model.gradient(x, 2, mask);
    for (let i = 0; i < P; i++) {
      expect(grad[i]).toBe(mask[i] ? tinyWeight(i, 2) : 0);
    }
  });

  it("rejects wrong sizes and class indices", () => {
    expect(() => model.forward(new Float64Array(10))).toThrow(/expected 64/);
    expect(() => model.gradient(new Float64Array(P), 3, new Uint8Array(P))).toThrow(/out of range/);
    expect(() => model.gradient(new Float64Array(P), -1, new Uint8Array(P))).toThrow(/out of range/);
    expect(() => model.gradient(new Float64Array(P), 0, new Uint8Array(5))).toThrow(/expected 64/);
  });
});
