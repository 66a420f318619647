import type { ViewTransform } from "./transform.js";
import { markRadiusPx, voxelToCanvas } from "./transform.js";
import type { CandidateInfo, SlicePayload } from "./types.js";
import type { MarkState } from "./state.js";

/** Decode base64 to bytes in either the browser or node. */
export function decodeBase64(data: string): Uint8Array {
  if (typeof atob === "function") {
    const bin = atob(data);
    const out = new Uint8Array(bin.length);
    for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
    return out;
  }
  return new Uint8Array(Buffer.from(data, "base64"));
}

/** Expand the server's 8-bit grayscale payload to opaque RGBA. */
export function sliceToRgba(payload: SlicePayload) {
  const gray = decodeBase64(payload.pixels);
  const n = payload.width * payload.height;
  if (gray.length !== n) {
    throw new Error(`pixel payload has ${gray.length} bytes, expected ${n}`);
  }
  const rgba = new Uint8ClampedArray(new ArrayBuffer(n * 4));
  for (let i = 0; i < n; i++) {
    const v = gray[i];
    rgba[4 * i] = v;
    rgba[4 * i + 1] = v;
    rgba[4 * i + 2] = v;
    rgba[4 * i + 3] = 255;
  }
  return rgba;
}

export const MARK_COLORS: Record<MarkState, string> = {
  undecided: "#ffd43b",
  accepted: "#51cf66",
  rejected: "#ff6b6b",
};

export interface MarkCircle {
  candidateId: string;
  px: number;
  py: number;
  radiusPx: number;
  color: string;
}

/**
 * Geometry for the overlay circles of one slice: every candidate on slice k,
 * centred on its source voxel, at the matching-tolerance radius.
 */
export function sliceMarkCircles(
  candidates: CandidateInfo[],
  k: number,
  t: ViewTransform,
  spacing: [number, number, number],
  stateOf: (id: string) => MarkState,
): MarkCircle[] {
  return candidates
    .filter((c) => c.slice === k)
    .map((c) => {
      const p = voxelToCanvas(t, c.voxel[0], c.voxel[1]);
      return {
        candidateId: c.id,
        px: p.px,
        py: p.py,
        radiusPx: markRadiusPx(t, spacing),
        color: MARK_COLORS[stateOf(c.id)],
      };
    });
}

/** Paint one slice and its overlay onto a 2D canvas context. */
export function drawSlice(
  ctx: CanvasRenderingContext2D,
  payload: SlicePayload,
  circles: MarkCircle[],
  t: ViewTransform,
): void {
  ctx.save();
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, ctx.canvas.width, ctx.canvas.height);
  const image = new ImageData(sliceToRgba(payload), payload.width, payload.height);
  const off = new OffscreenCanvas(payload.width, payload.height);
  const offCtx = off.getContext("2d");
  if (!offCtx) throw new Error("2d context unavailable");
  offCtx.putImageData(image, 0, 0);
  ctx.drawImage(
    off,
    t.panX,
    t.panY,
    payload.width * t.zoom,
    payload.height * t.zoom,
  );
  ctx.lineWidth = 1.5;
  for (const c of circles) {
    ctx.strokeStyle = c.color;
    ctx.beginPath();
    ctx.arc(c.px, c.py, c.radiusPx, 0, 2 * Math.PI);
    ctx.stroke();
  }
  ctx.restore();
}
