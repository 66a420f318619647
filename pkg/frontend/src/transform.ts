/**
 * Client-side coordinate mapping between canvas pixels, in-plane voxel
 * indices, and world millimetres. The slice image is drawn with its voxel
 * (0, 0) at canvas point (panX, panY) and `zoom` canvas pixels per voxel.
 */

export interface ViewTransform {
  zoom: number; // canvas pixels per voxel, > 0
  panX: number;
  panY: number;
}

export interface CanvasPoint {
  px: number;
  py: number;
}

/** Canvas position of a voxel's centre. */
export function voxelToCanvas(t: ViewTransform, x: number, y: number): CanvasPoint {
  return { px: (x + 0.5) * t.zoom + t.panX, py: (y + 0.5) * t.zoom + t.panY };
}

/** In-plane voxel containing a canvas point (may lie outside the slice). */
export function canvasToVoxel(t: ViewTransform, p: CanvasPoint): { x: number; y: number } {
  return {
    x: Math.floor((p.px - t.panX) / t.zoom),
    y: Math.floor((p.py - t.panY) / t.zoom),
  };
}

export function voxelToWorld(
  spacing: [number, number, number],
  x: number,
  y: number,
  z: number,
): [number, number, number] {
  return [x * spacing[0], y * spacing[1], z * spacing[2]];
}

export function worldToVoxel(
  spacing: [number, number, number],
  xyzMm: [number, number, number],
): [number, number, number] {
  return [
    Math.round(xyzMm[0] / spacing[0]),
    Math.round(xyzMm[1] / spacing[1]),
    Math.round(xyzMm[2] / spacing[2]),
  ];
}

/** World point for a canvas click on slice k. */
export function canvasToWorld(
  t: ViewTransform,
  spacing: [number, number, number],
  p: CanvasPoint,
  k: number,
): [number, number, number] {
  const v = canvasToVoxel(t, p);
  return voxelToWorld(spacing, v.x, v.y, k);
}

export const MARK_RADIUS_MM = 3.0; // drawn at the lesion-matching tolerance

/** Mark radius in canvas pixels: 3 mm converted at the in-plane x spacing. */
export function markRadiusPx(t: ViewTransform, spacing: [number, number, number]): number {
  return (MARK_RADIUS_MM / spacing[0]) * t.zoom;
}
