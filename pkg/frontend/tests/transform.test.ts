import { describe, expect, it } from "vitest";
import {
  canvasToVoxel,
  canvasToWorld,
  markRadiusPx,
  voxelToCanvas,
  voxelToWorld,
  worldToVoxel,
  type ViewTransform,
} from "../src/transform.js";

const SPACING: [number, number, number] = [1.0, 1.2, 3.0];

function rng(seed: number): () => number {
  let s = seed >>> 0;
  return () => {
    s = (s * 1664525 + 1013904223) >>> 0;
    return s / 2 ** 32;
  };
}

describe("mark re-projection", () => {
  it("round-trips voxel -> canvas -> voxel exactly under any zoom and pan", () => {
    const rand = rng(7);
    for (let trial = 0; trial < 500; trial++) {
      const t: ViewTransform = {
        zoom: 0.5 + rand() * 15,
        panX: (rand() - 0.5) * 400,
        panY: (rand() - 0.5) * 400,
      };
      const x = Math.floor(rand() * 96);
      const y = Math.floor(rand() * 96);
      const p = voxelToCanvas(t, x, y);
      expect(canvasToVoxel(t, p)).toEqual({ x, y });
    }
  });

  it("round-trips voxel -> world -> voxel on the anisotropic grid", () => {
    for (const [x, y, z] of [
      [0, 0, 0],
      [95, 95, 23],
      [13, 47, 11],
    ] as const) {
      expect(worldToVoxel(SPACING, voxelToWorld(SPACING, x, y, z))).toEqual([x, y, z]);
    }
  });

  it("maps a canvas click at a voxel centre on slice k back to slice k", () => {
    const t: ViewTransform = { zoom: 5, panX: 12, panY: -3 };
    const k = 7;
    const p = voxelToCanvas(t, 40, 21);
    const world = canvasToWorld(t, SPACING, p, k);
    expect(worldToVoxel(SPACING, world)).toEqual([40, 21, k]);
  });

  it("scales the tolerance circle linearly with zoom", () => {
    const base: ViewTransform = { zoom: 2, panX: 0, panY: 0 };
    const doubled: ViewTransform = { zoom: 4, panX: 50, panY: 50 };
    expect(markRadiusPx(doubled, SPACING)).toBeCloseTo(
      2 * markRadiusPx(base, SPACING),
      12,
    );
    // 3 mm at 1 mm in-plane spacing and zoom 2 is 6 canvas pixels
    expect(markRadiusPx(base, [1, 1, 3])).toBeCloseTo(6, 12);
  });
});
