import { ReviewApi } from "./api.js";
import { ViewerState, OutsideVolumeError } from "./state.js";
import { sliceMarkCircles, drawSlice } from "./render.js";
import type { ViewTransform } from "./transform.js";
import type { CandidateInfo } from "./types.js";

const HELP = [
  "j/k or arrows: slice",
  "m: FLAIR/T1",
  "o: overlay",
  "click mark: cycle accept/reject",
  "shift+click: add mark",
  "enter: submit case",
  "n/p: next/previous case",
  "e: evaluation",
].join("   ");

async function boot(): Promise<void> {
  const canvas = document.getElementById("viewer") as HTMLCanvasElement;
  const status = document.getElementById("status") as HTMLElement;
  const help = document.getElementById("help") as HTMLElement;
  help.textContent = HELP;
  const ctx = canvas.getContext("2d");
  if (!ctx) throw new Error("canvas 2d context unavailable");

  const api = new ReviewApi("");
  const cases = await api.listCases();
  const session = await api.createSession(0.0);
  const state = new ViewerState(session.session_id, cases, session);

  const transform: ViewTransform = { zoom: 6, panX: 10, panY: 10 };
  let candidates: CandidateInfo[] = [];

  async function loadCase(): Promise<void> {
    candidates = await api.getCandidates(state.currentCase.id, session.threshold);
    await redraw();
  }

  async function redraw(): Promise<void> {
    const c = state.currentCase;
    const payload = await api.getSlice(
      c.id,
      state.sliceIndex,
      state.modality,
      state.windowLevel ?? undefined,
    );
    const circles = state.overlayVisible
      ? sliceMarkCircles(candidates, state.sliceIndex, transform, c.spacing, (id) =>
          state.markState(id),
        )
      : [];
    drawSlice(ctx!, payload, circles, transform);
    status.textContent =
      `${c.id} (${state.caseStatus(c.id)})  slice ${state.sliceIndex + 1}/${c.n_slices}` +
      `  ${state.modality}  pending: ${state.pending.length}`;
  }

  function say(msg: string): void {
    status.textContent = msg;
  }

  canvas.addEventListener("click", (ev) => {
    const rect = canvas.getBoundingClientRect();
    const p = { px: ev.clientX - rect.left, py: ev.clientY - rect.top };
    if (ev.shiftKey) {
      try {
        state.addMark(transform, p);
      } catch (err) {
        if (err instanceof OutsideVolumeError) return say(err.message);
        throw err;
      }
    } else {
      const circles = sliceMarkCircles(
        candidates,
        state.sliceIndex,
        transform,
        state.currentCase.spacing,
        (id) => state.markState(id),
      );
      const hit = circles.find(
        (c) => Math.hypot(c.px - p.px, c.py - p.py) <= c.radiusPx,
      );
      if (hit) state.toggleMark(hit.candidateId);
    }
    void redraw();
  });

  async function switchCase(step: number): Promise<void> {
    const idx = cases.findIndex((c) => c.id === state.currentCase.id);
    const next = cases[(idx + step + cases.length) % cases.length];
    try {
      state.setCase(next.id);
    } catch {
      return say("submit (enter) or discard (d) pending decisions first");
    }
    await loadCase();
  }

  document.addEventListener("keydown", (ev) => {
    const run = async () => {
      switch (ev.key) {
        case "j":
        case "ArrowDown":
          state.nextSlice();
          return redraw();
        case "k":
        case "ArrowUp":
          state.prevSlice();
          return redraw();
        case "m":
          state.toggleModality();
          return redraw();
        case "o":
          state.toggleOverlay();
          return redraw();
        case "d":
          state.discardPending();
          return redraw();
        case "n":
          return switchCase(1);
        case "p":
          return switchCase(-1);
        case "Enter":
          try {
            await state.submitCase(api);
            say(`submitted ${state.currentCase.id}`);
          } catch (err) {
            say(`submit failed, decisions kept: ${(err as Error).message}`);
          }
          return redraw();
        case "e": {
          const ev2 = await api.getEvaluation(state.sessionId);
          return say(
            `aided: sens ${ev2.aided.sensitivity.toFixed(3)} @ ` +
              `${ev2.aided.fp_per_slice.toFixed(3)} FP/slice   ` +
              `CAD: sens ${ev2.cad.sensitivity.toFixed(3)} @ ` +
              `${ev2.cad.fp_per_slice.toFixed(3)} FP/slice`,
          );
        }
      }
    };
    void run();
  });

  await loadCase();
}

void boot();
