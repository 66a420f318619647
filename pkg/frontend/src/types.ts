/** Wire types mirroring the review server's JSON payloads. */

export interface CaseInfo {
  id: string;
  n_slices: number;
  dims: [number, number, number]; // (nx, ny, nz)
  spacing: [number, number, number]; // (sx, sy, sz) in mm
  split: string;
  n_candidates: number;
}

export interface SlicePayload {
  case: string;
  slice: number;
  modality: string;
  width: number;
  height: number;
  window: number;
  level: number;
  /** base64 of width*height 8-bit grayscale values, row-major. */
  pixels: string;
}

export interface CandidateInfo {
  id: string;
  case: string;
  voxel: [number, number, number]; // (x, y, z)
  xyz_mm: [number, number, number];
  slice: number;
  p1: number;
  p2: number | null;
}

export type Decision =
  | { action: "accept" | "reject" | "revoke"; case: string; candidate: string }
  | { action: "add"; case: string; xyz_mm: [number, number, number] }
  | { action: "submit"; case: string };

export interface SessionState {
  session_id: string;
  threshold: number;
  cases: string[];
  accepted: string[];
  rejected: string[];
  added: { case: string; xyz_mm: [number, number, number] }[];
  status: Record<string, "pending" | "done">;
  seq: number;
}

export interface ExportedMark {
  case: string;
  xyz_mm: [number, number, number];
  score: number;
}

export interface OperatingPoint {
  sensitivity: number;
  fp_per_slice: number;
}

export interface Evaluation {
  session_id: string;
  aided: OperatingPoint;
  cad: OperatingPoint;
}
