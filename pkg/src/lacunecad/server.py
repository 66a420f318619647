"""Review server for the aided-reading workflow.

Serves axial slices and CAD candidates over HTTP, persists observer
decisions (accept / reject / revoke / add / submit) as an append-only
JSON-lines event log per session, and computes the aided operating point
against the cohort reference marks with the same 3 mm matching as the
offline evaluation.
"""

from __future__ import annotations

import base64
import json
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import froc as froc_mod
from . import phantom as phantom_mod
from .stage1 import load_candidates
from .volume import Mark, MarkSet, VolumeError, world_to_voxel

# window/level defaults per modality (normalized phantom intensities)
WINDOW_LEVEL = {"flair": (1.0, 0.5), "t1": (1.0, 0.5)}

_ACTIONS = ("accept", "reject", "revoke", "add", "submit")


class ApiError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


@dataclass
class Session:
    session_id: str
    threshold: float
    cases: list[str]
    accepted: set = field(default_factory=set)
    rejected: set = field(default_factory=set)
    added: list = field(default_factory=list)  # (case_id, xyz_mm)
    status: dict = field(default_factory=dict)  # case_id -> pending | done
    seq: int = 0

    def to_json(self) -> dict:
        return {
            "session_id": self.session_id,
            "threshold": self.threshold,
            "cases": list(self.cases),
            "accepted": sorted(self.accepted),
            "rejected": sorted(self.rejected),
            "added": [
                {"case": c, "xyz_mm": list(p)} for c, p in self.added
            ],
            "status": dict(self.status),
            "seq": self.seq,
        }


class ReviewStore:
    """Cohort + detections + event-sourced review sessions."""

    def __init__(self, cohort, detections_path, run_cfg, data_dir=None):
        self.cohort = Path(cohort)
        self.manifest = phantom_mod.load_manifest(self.cohort)
        self.entries = {e["id"]: e for e in self.manifest["cases"]}
        self.froc_cfg = run_cfg.froc
        cands = load_candidates(detections_path)
        self.candidates: dict[str, list] = {}
        for c in cands:
            self.candidates.setdefault(c.case_id, []).append(c)
        ref_path = self.cohort / "reference_marks.json"
        self.reference = MarkSet.load(ref_path) if ref_path.exists() else None
        self.sessions_dir = Path(
            data_dir if data_dir is not None else Path(detections_path).parent
        ) / "sessions"
        self.sessions_dir.mkdir(parents=True, exist_ok=True)
        self.sessions: dict[str, Session] = {}
        self.write_lock = threading.Lock()
        self._case_cache: dict[str, object] = {}
        for log in sorted(self.sessions_dir.glob("*.jsonl")):
            self._replay(log)

    # --- case access ----------------------------------------------------------

    def entry(self, case_id: str) -> dict:
        if case_id not in self.entries:
            raise ApiError(404, f"unknown case {case_id!r}")
        return self.entries[case_id]

    def case(self, case_id: str):
        if case_id not in self._case_cache:
            if len(self._case_cache) >= 4:  # bound resident volumes
                self._case_cache.pop(next(iter(self._case_cache)))
            self._case_cache[case_id] = phantom_mod.load_case(
                self.cohort, self.entry(case_id)
            )
        return self._case_cache[case_id]

    def candidate_map(self, case_id: str) -> dict[str, object]:
        return {
            f"{case_id}:{i}": c
            for i, c in enumerate(self.candidates.get(case_id, []))
        }

    # --- event log ------------------------------------------------------------

    def _log_path(self, sid: str) -> Path:
        return self.sessions_dir / f"{sid}.jsonl"

    def _replay(self, log: Path) -> None:
        session = None
        for line in log.read_text().splitlines():
            event = json.loads(line)
            if event["action"] == "create":
                session = Session(
                    session_id=event["session_id"],
                    threshold=event["threshold"],
                    cases=event["cases"],
                    status={c: "pending" for c in event["cases"]},
                )
            else:
                self._apply(session, event)
                session.seq = event["seq"]
        if session is not None:
            self.sessions[session.session_id] = session

    def create_session(self, threshold: float, cases: list[str]) -> Session:
        for c in cases:
            self.entry(c)
        sid = uuid.uuid4().hex[:12]
        session = Session(
            session_id=sid,
            threshold=threshold,
            cases=cases,
            status={c: "pending" for c in cases},
        )
        with self.write_lock:
            record = {
                "action": "create",
                "session_id": sid,
                "threshold": threshold,
                "cases": cases,
            }
            with open(self._log_path(sid), "a") as f:
                f.write(json.dumps(record) + "\n")
            self.sessions[sid] = session
        return session

    def session(self, sid: str) -> Session:
        if sid not in self.sessions:
            raise ApiError(404, f"unknown session {sid!r}")
        return self.sessions[sid]

    def _apply(self, session: Session, event: dict) -> None:
        """Validate and apply one decision event to the in-memory state."""
        action = event["action"]
        case_id = event["case"]
        if case_id not in session.cases:
            raise ApiError(404, f"case {case_id!r} not in session")
        if action in ("accept", "reject", "revoke"):
            cand_id = event.get("candidate")
            if cand_id not in self.candidate_map(case_id):
                raise ApiError(404, f"unknown candidate {cand_id!r}")
            if action == "accept":
                if cand_id in session.rejected:
                    raise ApiError(
                        409, f"{cand_id} is rejected; revoke before accepting"
                    )
                session.accepted.add(cand_id)
            elif action == "reject":
                if cand_id in session.accepted:
                    raise ApiError(
                        409, f"{cand_id} is accepted; revoke before rejecting"
                    )
                session.rejected.add(cand_id)
            else:
                session.accepted.discard(cand_id)
                session.rejected.discard(cand_id)
        elif action == "add":
            xyz = event.get("xyz_mm")
            if (
                not isinstance(xyz, (list, tuple))
                or len(xyz) != 3
                or not all(isinstance(v, (int, float)) for v in xyz)
            ):
                raise ApiError(400, "add requires xyz_mm: [x, y, z] in mm")
            case = self.case(case_id)
            try:
                world_to_voxel(case.flair, xyz)
            except VolumeError:
                raise ApiError(400, f"mark {list(xyz)} outside case volume")
            session.added.append((case_id, tuple(float(v) for v in xyz)))
        elif action == "submit":
            session.status[case_id] = "done"
        else:
            raise ApiError(400, f"unknown action {action!r}")

    def append_decisions(self, sid: str, decisions: list[dict]) -> list[int]:
        """Validate and append decisions atomically; returns assigned seqs."""
        session = self.session(sid)
        with self.write_lock:
            # validate the whole batch against a replayed copy first so a
            # failing batch leaves both memory and log untouched
            trial = Session(
                session_id=session.session_id,
                threshold=session.threshold,
                cases=session.cases,
                accepted=set(session.accepted),
                rejected=set(session.rejected),
                added=list(session.added),
                status=dict(session.status),
                seq=session.seq,
            )
            events = []
            for d in decisions:
                if not isinstance(d, dict) or "action" not in d or "case" not in d:
                    raise ApiError(400, "decision requires 'action' and 'case'")
                event = dict(d)
                self._apply(trial, event)
                trial.seq += 1
                event["seq"] = trial.seq
                events.append(event)
            with open(self._log_path(sid), "a") as f:
                for event in events:
                    f.write(json.dumps(event) + "\n")
            self.sessions[sid] = trial
            return [e["seq"] for e in events]

    # --- export & evaluation ----------------------------------------------------

    def export(self, sid: str) -> MarkSet:
        session = self.session(sid)
        marks = []
        for case_id in session.cases:
            cmap = self.candidate_map(case_id)
            for cand_id in sorted(session.accepted):
                if cand_id in cmap:
                    c = cmap[cand_id]
                    marks.append(Mark(case_id, tuple(c.xyz_mm), 1.0))
        for case_id, xyz in session.added:
            marks.append(Mark(case_id, xyz, 1.0))
        return MarkSet(f"session-{sid}", marks)

    def _point(self, detections: MarkSet, case_ids: list[str]) -> dict:
        counts = {c: self.entries[c]["n_slices"] for c in case_ids}
        n_slices = sum(counts.values())
        if not any(self.reference.for_case(c) for c in case_ids):
            raise ApiError(404, "reference has no marks for the session cases")
        if not detections.marks:
            return {"sensitivity": 0.0, "fp_per_slice": 0.0, "n_slices": n_slices}
        curve = froc_mod.froc(detections, self.reference, counts, self.froc_cfg)
        return {
            "sensitivity": float(curve.sensitivity[-1]),
            "fp_per_slice": float(curve.fp_per_slice[-1]),
            "n_slices": n_slices,
        }

    def evaluation(self, sid: str) -> dict:
        if self.reference is None:
            raise ApiError(404, "no reference marks configured")
        session = self.session(sid)
        aided = self._point(self.export(sid), session.cases)
        cad_marks = [
            Mark(c.case_id, tuple(c.xyz_mm), 1.0)
            for case_id in session.cases
            for c in self.candidates.get(case_id, [])
            if c.p2 is not None and c.p2 >= session.threshold
        ]
        cad = self._point(MarkSet("cad", cad_marks), session.cases)
        return {"session_id": sid, "aided": aided, "cad": cad}


def _window_level(modality: str, wl: str | None) -> tuple[float, float]:
    if modality not in WINDOW_LEVEL:
        raise ApiError(400, f"modality must be one of {sorted(WINDOW_LEVEL)}")
    if wl is None:
        return WINDOW_LEVEL[modality]
    try:
        window, level = (float(v) for v in wl.split(","))
    except ValueError:
        raise ApiError(400, "wl expects 'window,level'")
    if window <= 0:
        raise ApiError(400, "window must be > 0")
    return window, level


def create_app(cohort, detections_path, run_cfg, data_dir=None) -> FastAPI:
    store = ReviewStore(cohort, detections_path, run_cfg, data_dir=data_dir)
    app = FastAPI(title="lacunecad review server")
    app.state.store = store

    @app.exception_handler(ApiError)
    async def _api_error(_request, exc: ApiError):
        return JSONResponse(status_code=exc.status, content={"detail": exc.message})

    async def _body(request: Request) -> dict:
        try:
            doc = json.loads(await request.body() or b"{}")
        except json.JSONDecodeError:
            raise ApiError(400, "malformed JSON body")
        if not isinstance(doc, dict):
            raise ApiError(400, "body must be a JSON object")
        return doc

    @app.get("/cases")
    def list_cases():
        cfg = store.manifest["config"]
        return [
            {
                "id": e["id"],
                "n_slices": e["n_slices"],
                "dims": list(cfg["dims"]),
                "spacing": list(cfg["spacing"]),
                "split": e["split"],
                "n_candidates": len(store.candidates.get(e["id"], [])),
            }
            for e in store.manifest["cases"]
        ]

    @app.get("/cases/{case_id}/slices/{k}")
    def get_slice(case_id: str, k: int, modality: str = "flair", wl: str | None = None):
        entry = store.entry(case_id)
        if not 0 <= k < entry["n_slices"]:
            raise ApiError(404, f"slice {k} out of range")
        window, level = _window_level(modality, wl)
        case = store.case(case_id)
        vol = case.flair if modality == "flair" else case.t1
        values = vol.values[k]
        lo = level - window / 2.0
        pix = np.clip((values - lo) / window * 255.0, 0, 255).astype(np.uint8)
        return {
            "case": case_id,
            "slice": k,
            "modality": modality,
            "width": int(vol.dims[0]),
            "height": int(vol.dims[1]),
            "window": window,
            "level": level,
            "pixels": base64.b64encode(pix.tobytes()).decode(),
        }

    @app.get("/cases/{case_id}/candidates")
    def get_candidates(case_id: str, threshold: float = 0.0):
        store.entry(case_id)
        return [
            {
                "id": cand_id,
                "case": case_id,
                "voxel": list(c.voxel),
                "xyz_mm": list(c.xyz_mm),
                "slice": int(c.voxel[2]),
                "p1": c.p1,
                "p2": c.p2,
            }
            for cand_id, c in store.candidate_map(case_id).items()
            if c.p2 is None or c.p2 >= threshold
        ]

    @app.post("/sessions")
    async def create_session(request: Request):
        doc = await _body(request)
        threshold = doc.get("threshold", 0.0)
        if not isinstance(threshold, (int, float)) or isinstance(threshold, bool):
            raise ApiError(400, "threshold must be a number")
        cases = doc.get("cases", sorted(store.candidates))
        if not isinstance(cases, list) or not all(isinstance(c, str) for c in cases):
            raise ApiError(400, "cases must be a list of case ids")
        session = store.create_session(float(threshold), cases)
        return session.to_json()

    @app.get("/sessions/{sid}")
    def get_session(sid: str):
        return store.session(sid).to_json()

    @app.post("/sessions/{sid}/decisions")
    async def post_decisions(sid: str, request: Request):
        doc = await _body(request)
        decisions = doc.get("decisions", [doc] if "action" in doc else None)
        if not isinstance(decisions, list) or not decisions:
            raise ApiError(400, "body must be a decision or {'decisions': [...]}")
        seqs = store.append_decisions(sid, decisions)
        return {"seqs": seqs, "session": store.session(sid).to_json()}

    @app.get("/sessions/{sid}/export")
    def export_session(sid: str):
        ms = store.export(sid)
        return {
            "source_id": ms.source_id,
            "marks": [
                {"case": m.case_id, "xyz_mm": list(m.xyz_mm), "score": m.score}
                for m in ms.marks
            ],
        }

    @app.get("/sessions/{sid}/evaluation")
    def evaluate_session(sid: str):
        return store.evaluation(sid)

    return app
