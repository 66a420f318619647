import type { ReviewApi } from "./api.js";
import type { CanvasPoint, ViewTransform } from "./transform.js";
import { canvasToVoxel, voxelToWorld } from "./transform.js";
import type { CaseInfo, Decision, SessionState } from "./types.js";

export type MarkState = "undecided" | "accepted" | "rejected";

/** One review keystroke advances a candidate along this cycle. */
export function nextMarkState(s: MarkState): MarkState {
  switch (s) {
    case "undecided":
      return "accepted";
    case "accepted":
      return "rejected";
    case "rejected":
      return "undecided";
  }
}

export class PendingDecisionsError extends Error {
  constructor() {
    super("pending decisions must be submitted or discarded before switching case");
  }
}

export class OutsideVolumeError extends Error {
  constructor() {
    super("added marks must lie inside the case volume");
  }
}

/**
 * Client-side review state for one session. Candidate decisions are held
 * locally until submitCase() posts them; the pending queue is the minimal
 * action sequence turning the last server-acknowledged state into the
 * local one, so a failed POST leaves everything still pending.
 */
export class ViewerState {
  sliceIndex = 0;
  modality: "flair" | "t1" = "flair";
  windowLevel: { window: number; level: number } | null = null;
  overlayVisible = true;

  private caseIndex = 0;
  private committed = new Map<string, MarkState>();
  private local = new Map<string, MarkState>();
  private pendingAdds: { case: string; xyz_mm: [number, number, number] }[] = [];
  private done = new Set<string>();

  constructor(
    readonly sessionId: string,
    readonly cases: CaseInfo[],
    session: SessionState,
  ) {
    if (cases.length === 0) {
      throw new Error("session has no cases");
    }
    this.applySession(session);
  }

  get currentCase(): CaseInfo {
    return this.cases[this.caseIndex];
  }

  caseStatus(caseId: string): "pending" | "done" {
    return this.done.has(caseId) ? "done" : "pending";
  }

  private applySession(session: SessionState): void {
    this.committed.clear();
    for (const id of session.accepted) this.committed.set(id, "accepted");
    for (const id of session.rejected) this.committed.set(id, "rejected");
    this.local = new Map(this.committed);
    this.pendingAdds = [];
    this.done = new Set(
      Object.entries(session.status)
        .filter(([, s]) => s === "done")
        .map(([c]) => c),
    );
  }

  // --- slice / modality / overlay ------------------------------------------

  setSlice(k: number): void {
    const n = this.currentCase.n_slices;
    this.sliceIndex = Math.min(Math.max(k, 0), n - 1);
  }

  nextSlice(): void {
    this.setSlice(this.sliceIndex + 1);
  }

  prevSlice(): void {
    this.setSlice(this.sliceIndex - 1);
  }

  toggleModality(): void {
    this.modality = this.modality === "flair" ? "t1" : "flair";
  }

  toggleOverlay(): void {
    this.overlayVisible = !this.overlayVisible;
  }

  // --- decisions -------------------------------------------------------------

  markState(candidateId: string): MarkState {
    return this.local.get(candidateId) ?? "undecided";
  }

  toggleMark(candidateId: string): MarkState {
    const next = nextMarkState(this.markState(candidateId));
    if (next === "undecided") {
      this.local.delete(candidateId);
    } else {
      this.local.set(candidateId, next);
    }
    return next;
  }

  /** Queue a manual mark for a canvas click on the current slice. */
  addMark(t: ViewTransform, p: CanvasPoint): [number, number, number] {
    const c = this.currentCase;
    const v = canvasToVoxel(t, p);
    const [nx, ny] = c.dims;
    if (v.x < 0 || v.x >= nx || v.y < 0 || v.y >= ny) {
      throw new OutsideVolumeError();
    }
    const xyz = voxelToWorld(c.spacing, v.x, v.y, this.sliceIndex);
    this.pendingAdds.push({ case: c.id, xyz_mm: xyz });
    return xyz;
  }

  /** Minimal decision batch turning the server state into the local state. */
  get pending(): Decision[] {
    const out: Decision[] = [];
    const ids = new Set([...this.committed.keys(), ...this.local.keys()]);
    for (const id of [...ids].sort()) {
      const before = this.committed.get(id) ?? "undecided";
      const after = this.local.get(id) ?? "undecided";
      if (before === after) continue;
      const caseId = id.split(":")[0];
      if (before !== "undecided") {
        out.push({ action: "revoke", case: caseId, candidate: id });
      }
      if (after !== "undecided") {
        out.push({
          action: after === "accepted" ? "accept" : "reject",
          case: caseId,
          candidate: id,
        });
      }
    }
    for (const a of this.pendingAdds) {
      out.push({ action: "add", case: a.case, xyz_mm: a.xyz_mm });
    }
    return out;
  }

  get hasPending(): boolean {
    return this.pending.length > 0;
  }

  discardPending(): void {
    this.local = new Map(this.committed);
    this.pendingAdds = [];
  }

  setCase(caseId: string, opts: { discard?: boolean } = {}): void {
    const idx = this.cases.findIndex((c) => c.id === caseId);
    if (idx < 0) {
      throw new Error(`unknown case ${caseId}`);
    }
    if (idx === this.caseIndex) return;
    if (this.hasPending) {
      if (!opts.discard) throw new PendingDecisionsError();
      this.discardPending();
    }
    this.caseIndex = idx;
    this.sliceIndex = 0;
  }

  /**
   * POST the queued decisions plus a submit record for the current case.
   * On failure the queue is left untouched (nothing was acknowledged).
   */
  async submitCase(api: ReviewApi): Promise<void> {
    const batch: Decision[] = [
      ...this.pending,
      { action: "submit", case: this.currentCase.id },
    ];
    const res = await api.postDecisions(this.sessionId, batch);
    this.applySession(res.session);
  }
}
