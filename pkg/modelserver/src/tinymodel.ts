/**
 * Built-in deterministic linear model for conformance testing. No ML
 * dependency: per-class voxel weights follow a fixed modular formula whose
 * values are exact in float32 and never zero, so finite differences against
 * the served gradient stay well conditioned.
 */

export interface ServedModel {
  name: string;
  dims: [number, number, number];
  numClasses: number;
  hasGradient: boolean;
  /** voxels: p float values in wire order -> p*numClasses logits, voxel-major. */
  forward(voxels: Float64Array): Float64Array;
  /** d(sum_i logits[i][classIndex] * mask[i]) / d voxels, length p. */
  gradient(voxels: Float64Array, classIndex: number, mask: Uint8Array): Float64Array;
}

const TINY_DIMS: [number, number, number] = [4, 4, 4];
const TINY_CLASSES = 3;

export function tinyWeight(i: number, c: number): number {
  return (((i * 31 + c * 17) % 13) - 6.5) / 8;
}

export function tinyBias(c: number): number {
  return (c - 1) / 4;
}

export class TinyLinearModel implements ServedModel {
  name = "tiny-linear";
  dims = TINY_DIMS;
  numClasses = TINY_CLASSES;
  hasGradient = true;

  get numVoxels(): number {
    return this.dims[0] * this.dims[1] * this.dims[2];
  }

  forward(voxels: Float64Array): Float64Array {
    const p = this.numVoxels;
    if (voxels.length !== p) {
      throw new Error(`expected ${p} voxels, got ${voxels.length}`);
    }
    const logits = new Float64Array(p * this.numClasses);
    for (let i = 0; i < p; i++) {
      for (let c = 0; c < this.numClasses; c++) {
        logits[i * this.numClasses + c] = tinyWeight(i, c) * voxels[i] + tinyBias(c);
      }
    }
    return logits;
  }

  gradient(voxels: Float64Array, classIndex: number, mask: Uint8Array): Float64Array {
    const p = this.numVoxels;
    if (voxels.length !== p || mask.length !== p) {
      throw new Error(`expected ${p} voxels and mask entries, got ${voxels.length}/${mask.length}`);
    }
    if (classIndex < 0 || classIndex >= this.numClasses || !Number.isInteger(classIndex)) {
      throw new Error(`class index ${classIndex} out of range [0, ${this.numClasses})`);
    }
    const grad = new Float64Array(p);
    for (let i = 0; i < p; i++) {
      grad[i] = mask[i] ? tinyWeight(i, classIndex) : 0;
    }
    return grad;
  }
}
