"""Review-server tests: slice delivery, decision log semantics, export,
and the offline-evaluation cross-check."""

import base64
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from lacunecad import froc as froc_mod
from lacunecad import phantom
from lacunecad.cli import RunConfig
from lacunecad.server import create_app
from lacunecad.stage1 import Candidate, save_candidates
from lacunecad.volume import Mark, MarkSet


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("review")
    cfg = phantom.PhantomConfig(dims=(48, 48, 8), n_pvs=2, n_wmh=1, seed=3)
    manifest = phantom.generate_cohort(cfg, 3, root / "cohort", ratios=(0.0, 0.0, 1.0))
    reference = MarkSet.load(root / "cohort" / "reference_marks.json")
    cands = []
    for entry in manifest["cases"]:
        refs = reference.for_case(entry["id"])
        # one true-positive candidate on the first reference mark ...
        spacing = np.array(cfg.spacing)
        vox = tuple(int(round(c / s)) for c, s in zip(refs[0].xyz_mm, spacing))
        cands.append(Candidate(entry["id"], vox, tuple(refs[0].xyz_mm), 0.9, p2=0.8))
        # ... and one far-away false positive
        fp_vox = (5, 5, 1)
        fp_mm = tuple(float(v * s) for v, s in zip(fp_vox, spacing))
        cands.append(Candidate(entry["id"], fp_vox, fp_mm, 0.7, p2=0.3))
    save_candidates(cands, root / "candidates.json")
    return root


def make_client(cohort, data_dir=None):
    app = create_app(
        cohort / "cohort",
        cohort / "candidates.json",
        RunConfig(),
        data_dir=data_dir or cohort / "run",
    )
    return TestClient(app)


@pytest.fixture()
def client(cohort, tmp_path):
    return make_client(cohort, data_dir=tmp_path)


class TestCases:
    def test_case_list(self, client):
        cases = client.get("/cases").json()
        assert len(cases) == 3
        assert all(c["n_slices"] == 8 for c in cases)
        assert all(c["n_candidates"] == 2 for c in cases)

    def test_slice_payload_matches_window_level(self, client, cohort):
        cases = client.get("/cases").json()
        cid = cases[0]["id"]
        r = client.get(f"/cases/{cid}/slices/3", params={"modality": "t1", "wl": "0.5,0.4"})
        assert r.status_code == 200
        doc = r.json()
        assert (doc["width"], doc["height"]) == (48, 48)
        pix = np.frombuffer(base64.b64decode(doc["pixels"]), np.uint8)
        assert pix.shape == (48 * 48,)
        manifest = phantom.load_manifest(cohort / "cohort")
        entry = next(e for e in manifest["cases"] if e["id"] == cid)
        case = phantom.load_case(cohort / "cohort", entry)
        expect = np.clip((case.t1.values[3] - 0.15) / 0.5 * 255.0, 0, 255).astype(np.uint8)
        assert np.array_equal(pix.reshape(48, 48), expect)

    def test_slice_errors(self, client):
        cid = client.get("/cases").json()[0]["id"]
        assert client.get("/cases/nope/slices/0").status_code == 404
        assert client.get(f"/cases/{cid}/slices/99").status_code == 404
        assert client.get(f"/cases/{cid}/slices/0", params={"modality": "pet"}).status_code == 400
        assert client.get(f"/cases/{cid}/slices/0", params={"wl": "bogus"}).status_code == 400

    def test_candidate_threshold_filter(self, client):
        cid = client.get("/cases").json()[0]["id"]
        all_c = client.get(f"/cases/{cid}/candidates").json()
        assert len(all_c) == 2
        assert {c["id"] for c in all_c} == {f"{cid}:0", f"{cid}:1"}
        high = client.get(f"/cases/{cid}/candidates", params={"threshold": 0.5}).json()
        assert [c["p2"] for c in high] == [0.8]


class TestSessions:
    def make_session(self, client, **body):
        r = client.post("/sessions", json=body)
        assert r.status_code == 200
        return r.json()

    def test_accept_one_add_one_exports_two(self, client):
        ses = self.make_session(client, threshold=0.5)
        cid = ses["cases"][0]
        r = client.post(
            f"/sessions/{ses['session_id']}/decisions",
            json={"decisions": [
                {"action": "accept", "case": cid, "candidate": f"{cid}:0"},
                {"action": "reject", "case": cid, "candidate": f"{cid}:1"},
                {"action": "add", "case": cid, "xyz_mm": [10.0, 12.0, 9.0]},
                {"action": "submit", "case": cid},
            ]},
        )
        assert r.status_code == 200
        assert r.json()["seqs"] == [1, 2, 3, 4]
        assert r.json()["session"]["status"][cid] == "done"
        export = client.get(f"/sessions/{ses['session_id']}/export").json()
        assert len(export["marks"]) == 2
        by_case = [m for m in export["marks"] if m["case"] == cid]
        assert len(by_case) == 2

    def test_reject_all_empty_export_zero_sensitivity(self, client):
        ses = self.make_session(client)
        sid = ses["session_id"]
        for cid in ses["cases"]:
            for i in (0, 1):
                r = client.post(
                    f"/sessions/{sid}/decisions",
                    json={"action": "reject", "case": cid, "candidate": f"{cid}:{i}"},
                )
                assert r.status_code == 200
        assert client.get(f"/sessions/{sid}/export").json()["marks"] == []
        ev = client.get(f"/sessions/{sid}/evaluation").json()
        assert ev["aided"]["sensitivity"] == 0.0
        assert ev["aided"]["fp_per_slice"] == 0.0

    def test_contradictory_decisions_409(self, client):
        ses = self.make_session(client)
        sid, cid = ses["session_id"], ses["cases"][0]
        ok = client.post(
            f"/sessions/{sid}/decisions",
            json={"action": "reject", "case": cid, "candidate": f"{cid}:0"},
        )
        assert ok.status_code == 200
        conflict = client.post(
            f"/sessions/{sid}/decisions",
            json={"action": "accept", "case": cid, "candidate": f"{cid}:0"},
        )
        assert conflict.status_code == 409
        # an explicit revoke clears the way
        fix = client.post(
            f"/sessions/{sid}/decisions",
            json={"decisions": [
                {"action": "revoke", "case": cid, "candidate": f"{cid}:0"},
                {"action": "accept", "case": cid, "candidate": f"{cid}:0"},
            ]},
        )
        assert fix.status_code == 200
        state = client.get(f"/sessions/{sid}").json()
        assert state["accepted"] == [f"{cid}:0"]
        assert state["rejected"] == []

    def test_failed_batch_changes_nothing(self, client):
        ses = self.make_session(client)
        sid, cid = ses["session_id"], ses["cases"][0]
        r = client.post(
            f"/sessions/{sid}/decisions",
            json={"decisions": [
                {"action": "accept", "case": cid, "candidate": f"{cid}:0"},
                {"action": "reject", "case": cid, "candidate": f"{cid}:0"},
            ]},
        )
        assert r.status_code == 409
        state = client.get(f"/sessions/{sid}").json()
        assert state["accepted"] == [] and state["seq"] == 0

    def test_malformed_and_unknown(self, client):
        ses = self.make_session(client)
        sid, cid = ses["session_id"], ses["cases"][0]
        assert client.post(f"/sessions/{sid}/decisions", content=b"{oops").status_code == 400
        assert client.post(f"/sessions/{sid}/decisions", json={"x": 1}).status_code == 400
        assert client.post(
            f"/sessions/{sid}/decisions",
            json={"action": "add", "case": cid, "xyz_mm": [1.0, 2.0]},
        ).status_code == 400
        assert client.post(
            f"/sessions/{sid}/decisions",
            json={"action": "add", "case": cid, "xyz_mm": [1e6, 0.0, 0.0]},
        ).status_code == 400
        assert client.post(
            f"/sessions/{sid}/decisions",
            json={"action": "accept", "case": cid, "candidate": "nope:7"},
        ).status_code == 404
        assert client.post(
            f"/sessions/{sid}/decisions",
            json={"action": "accept", "case": "nope", "candidate": f"{cid}:0"},
        ).status_code == 404
        assert client.get("/sessions/nope/export").status_code == 404

    def test_replay_reconstructs_state(self, cohort, tmp_path):
        client = make_client(cohort, data_dir=tmp_path)
        ses = client.post("/sessions", json={"threshold": 0.5}).json()
        sid, cid = ses["session_id"], ses["cases"][0]
        client.post(
            f"/sessions/{sid}/decisions",
            json={"decisions": [
                {"action": "accept", "case": cid, "candidate": f"{cid}:0"},
                {"action": "add", "case": cid, "xyz_mm": [10.0, 12.0, 9.0]},
                {"action": "submit", "case": cid},
            ]},
        )
        before = client.get(f"/sessions/{sid}").json()
        export_before = client.get(f"/sessions/{sid}/export").json()
        reloaded = make_client(cohort, data_dir=tmp_path)
        assert reloaded.get(f"/sessions/{sid}").json() == before
        assert reloaded.get(f"/sessions/{sid}/export").json() == export_before

    def test_evaluation_matches_offline_froc(self, client, cohort):
        ses = self.make_session(client, threshold=0.5)
        sid = ses["session_id"]
        cid = ses["cases"][0]
        client.post(
            f"/sessions/{sid}/decisions",
            json={"decisions": [
                {"action": "accept", "case": cid, "candidate": f"{cid}:0"},
                {"action": "accept", "case": cid, "candidate": f"{cid}:1"},
                {"action": "add", "case": ses["cases"][1], "xyz_mm": [6.0, 6.0, 9.0]},
            ]},
        )
        ev = client.get(f"/sessions/{sid}/evaluation").json()
        export = client.get(f"/sessions/{sid}/export").json()
        marks = MarkSet(
            "aided",
            [Mark(m["case"], tuple(m["xyz_mm"]), m["score"]) for m in export["marks"]],
        )
        reference = MarkSet.load(cohort / "cohort" / "reference_marks.json")
        counts = {c: 8 for c in ses["cases"]}
        curve = froc_mod.froc(marks, reference, counts, RunConfig().froc)
        assert ev["aided"]["sensitivity"] == pytest.approx(float(curve.sensitivity[-1]))
        assert ev["aided"]["fp_per_slice"] == pytest.approx(float(curve.fp_per_slice[-1]))
        # the CAD point at the session threshold keeps only the p2 >= 0.5 marks
        assert ev["cad"]["sensitivity"] > 0.0
