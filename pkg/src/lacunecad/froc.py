"""Reference fusion, FROC analysis, bootstrap bands, and paired p-values.

Matching is done in world mm space: a detection is a true positive iff some
reference mark of the same case lies within the hit radius, and a reference
mark counts as detected iff some retained detection lies within the radius.
Detections do not compete for marks.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import Mark, MarkSet


@dataclass
class FrocConfig:
    hit_radius_mm: float = 3.0
    fp_cutoff_per_slice: float = 0.4
    n_bootstraps: int = 100
    seed: int = 0
    n_grid: int = 50  # FP-axis grid points for bootstrap banding

    def __post_init__(self):
        if self.hit_radius_mm <= 0:
            raise ValueError("hit_radius_mm must be > 0")
        if self.n_bootstraps < 1:
            raise ValueError("n_bootstraps must be >= 1")


@dataclass
class FrocCurve:
    thresholds: np.ndarray  # descending
    fp_per_slice: np.ndarray
    sensitivity: np.ndarray
    n_marks: int
    n_slices: int
    band_fp: np.ndarray | None = None  # FP grid of the 95% band
    band_lo: np.ndarray | None = None
    band_hi: np.ndarray | None = None
    degenerate_band: bool = False

    def __post_init__(self):
        t = np.asarray(self.thresholds, float)
        assert (np.diff(t) <= 0).all(), "thresholds must be descending"
        assert (np.diff(self.sensitivity) >= -1e-12).all()
        assert (np.diff(self.fp_per_slice) >= -1e-12).all()
        assert ((self.sensitivity >= 0) & (self.sensitivity <= 1)).all()
        assert (self.fp_per_slice >= 0).all()

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fp_per_slice", "sensitivity", "lo", "hi"])
            lo = self.band_lo
            hi = self.band_hi
            for i in range(len(self.thresholds)):
                b_lo = "" if lo is None else f"{self._band_at(self.fp_per_slice[i])[0]:.6f}"
                b_hi = "" if hi is None else f"{self._band_at(self.fp_per_slice[i])[1]:.6f}"
                w.writerow(
                    [
                        f"{self.thresholds[i]:.6f}",
                        f"{self.fp_per_slice[i]:.6f}",
                        f"{self.sensitivity[i]:.6f}",
                        b_lo,
                        b_hi,
                    ]
                )

    def _band_at(self, fp):
        lo = np.interp(fp, self.band_fp, self.band_lo)
        hi = np.interp(fp, self.band_fp, self.band_hi)
        return lo, hi


# --- observer fusion ----------------------------------------------------------


def fuse_majority(mark_sets: list[MarkSet], quorum: int, hit_radius_mm: float = 3.0) -> MarkSet:
    """Single-linkage clustering of observer marks per case at the hit
    radius; clusters with marks from at least ``quorum`` distinct observers
    emit their centroid."""
    if quorum < 1 or quorum > len(mark_sets):
        raise ValueError(f"quorum {quorum} out of range for {len(mark_sets)} observers")
    all_cases = sorted(set().union(*(ms.case_ids() for ms in mark_sets)))
    fused = []
    for cid in all_cases:
        pts = []
        obs = []
        for oi, ms in enumerate(mark_sets):
            for m in ms.for_case(cid):
                pts.append(np.asarray(m.xyz_mm, float))
                obs.append(oi)
        n = len(pts)
        # union-find single linkage
        parent = list(range(n))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for i in range(n):
            for j in range(i + 1, n):
                if np.linalg.norm(pts[i] - pts[j]) <= hit_radius_mm:
                    parent[find(i)] = find(j)
        clusters = {}
        for i in range(n):
            clusters.setdefault(find(i), []).append(i)
        for members in clusters.values():
            if len({obs[i] for i in members}) >= quorum:
                centroid = np.mean([pts[i] for i in members], axis=0)
                fused.append(Mark(cid, tuple(float(c) for c in centroid)))
    fused.sort(key=lambda m: (m.case_id, m.xyz_mm))
    return MarkSet("fused", fused)


# --- FROC ----------------------------------------------------------------------


def froc(
    detections: MarkSet,
    reference: MarkSet,
    slice_counts: dict[str, int],
    cfg: FrocConfig,
    case_ids: list[str] | None = None,
) -> FrocCurve:
    """FROC curve swept over the distinct detection scores (descending).

    ``slice_counts`` maps case id to its number of axial slices;
    ``case_ids`` restricts the evaluation universe (defaults to the keys of
    ``slice_counts``)."""
    if case_ids is None:
        case_ids = sorted(slice_counts)
    n_marks = sum(len(reference.for_case(c)) for c in case_ids)
    if n_marks == 0:
        raise ValueError("empty reference set")
    n_slices = sum(slice_counts[c] for c in case_ids)
    # per-detection (score, is_tp, ref hit indices) precomputed once
    det_scores = []
    det_tp = []
    det_ref_hits = []  # (case offset in global ref numbering)
    ref_offset = {}
    off = 0
    for c in case_ids:
        ref_offset[c] = off
        off += len(reference.for_case(c))
    for c in case_ids:
        dets = detections.for_case(c)
        refs = np.array([m.xyz_mm for m in reference.for_case(c)], float).reshape(-1, 3)
        pos = np.array([m.xyz_mm for m in dets], float).reshape(-1, 3)
        if len(dets) == 0:
            continue
        dist = (
            np.linalg.norm(pos[:, None, :] - refs[None, :, :], axis=2)
            if len(refs)
            else np.zeros((len(dets), 0))
        )
        for i, m in enumerate(dets):
            if m.score is None:
                raise ValueError(f"unscored detection in case {c}")
            hits = np.nonzero(dist[i] <= cfg.hit_radius_mm)[0] + ref_offset[c]
            det_scores.append(m.score)
            det_tp.append(len(hits) > 0)
            det_ref_hits.append(hits)
    if not det_scores:
        # no detections at all: a single degenerate operating point
        return FrocCurve(np.array([np.inf]), np.zeros(1), np.zeros(1),
                         n_marks, n_slices)
    thresholds = np.unique(np.asarray(det_scores, float))[::-1]
    sens = np.empty(len(thresholds))
    fps = np.empty(len(thresholds))
    scores = np.asarray(det_scores, float)
    for ti, t in enumerate(thresholds):
        keep = scores >= t
        hit = np.zeros(n_marks, bool)
        n_fp = 0
        for i in np.nonzero(keep)[0]:
            if det_tp[i]:
                hit[det_ref_hits[i]] = True
            else:
                n_fp += 1
        sens[ti] = hit.sum() / n_marks
        fps[ti] = n_fp / n_slices
    return FrocCurve(thresholds, fps, sens, n_marks, n_slices)


def operating_point(curve: FrocCurve, max_fp_per_slice: float = 0.07):
    """(threshold, sensitivity, fp_per_slice) of the highest-sensitivity
    operating point with FP/slice at or below the budget; None when no
    point qualifies."""
    sel = np.nonzero(curve.fp_per_slice <= max_fp_per_slice)[0]
    if len(sel) == 0:
        return None
    best = sel[np.argmax(curve.sensitivity[sel])]
    return (
        float(curve.thresholds[best]),
        float(curve.sensitivity[best]),
        float(curve.fp_per_slice[best]),
    )


def score(curve: FrocCurve, cfg: FrocConfig) -> float:
    """Mean sensitivity over operating points with FP/slice below the
    cutoff; 0 when no point qualifies."""
    sel = curve.fp_per_slice < cfg.fp_cutoff_per_slice
    if not sel.any():
        return 0.0
    return float(curve.sensitivity[sel].mean())


# --- bootstrap ------------------------------------------------------------------


def _resample_ids(case_ids, rng):
    return [case_ids[i] for i in rng.integers(0, len(case_ids), len(case_ids))]


def _curve_on_cases(detections, reference, slice_counts, cfg, ids):
    """FROC over a multiset of case ids (bootstrap resample)."""
    # duplicate cases by aliasing ids
    alias_dets = []
    alias_refs = []
    alias_slices = {}
    alias_ids = []
    for k, cid in enumerate(ids):
        a = f"{k}:{cid}"
        alias_ids.append(a)
        alias_slices[a] = slice_counts[cid]
        alias_dets += [Mark(a, m.xyz_mm, m.score) for m in detections.for_case(cid)]
        alias_refs += [Mark(a, m.xyz_mm, m.score) for m in reference.for_case(cid)]
    return froc(
        MarkSet("d", alias_dets),
        MarkSet("r", alias_refs),
        alias_slices,
        cfg,
        case_ids=alias_ids,
    )


def _interp_sens(curve: FrocCurve, fp_grid):
    """Highest sensitivity achievable at each FP budget (step interpolation)."""
    out = np.zeros(len(fp_grid))
    for i, f in enumerate(fp_grid):
        sel = curve.fp_per_slice <= f
        out[i] = curve.sensitivity[sel].max() if sel.any() else 0.0
    return out


def bootstrap_band(
    detections: MarkSet,
    reference: MarkSet,
    slice_counts: dict[str, int],
    cfg: FrocConfig,
) -> FrocCurve:
    """Point FROC curve plus a case-level bootstrap 95% percentile band on a
    fixed log-spaced FP grid."""
    case_ids = sorted(slice_counts)
    point = froc(detections, reference, slice_counts, cfg, case_ids=case_ids)
    fp_max = max(point.fp_per_slice.max(), 1e-3)
    fp_grid = np.geomspace(max(fp_max * 1e-3, 1e-6), fp_max, cfg.n_grid)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    curves = np.empty((cfg.n_bootstraps, cfg.n_grid))
    for b in range(cfg.n_bootstraps):
        ids = _resample_ids(case_ids, rng)
        while not any(reference.for_case(c) for c in ids):
            ids = _resample_ids(case_ids, rng)  # a resample must contain marks
        bc = _curve_on_cases(detections, reference, slice_counts, cfg, ids)
        curves[b] = _interp_sens(bc, fp_grid)
    lo = np.percentile(curves, 2.5, axis=0)
    hi = np.percentile(curves, 97.5, axis=0)
    point.band_fp = fp_grid
    point.band_lo = lo
    point.band_hi = hi
    point.degenerate_band = len({c for c in case_ids if reference.for_case(c)}) <= 1
    return point


def paired_pvalue(
    detections_a: MarkSet,
    detections_b: MarkSet,
    reference: MarkSet,
    slice_counts: dict[str, int],
    cfg: FrocConfig,
) -> float:
    """One-sided empirical p-value for 'A scores higher than B' over paired
    case-level bootstraps, with +1/(n+1) smoothing."""
    case_ids = sorted(slice_counts)
    missing = (detections_a.case_ids() | detections_b.case_ids()) - set(case_ids)
    if missing:
        raise ValueError(f"detections reference unknown cases: {sorted(missing)}")
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    n_le = 0
    for _ in range(cfg.n_bootstraps):
        ids = _resample_ids(case_ids, rng)
        while not any(reference.for_case(c) for c in ids):
            ids = _resample_ids(case_ids, rng)
        sa = score(_curve_on_cases(detections_a, reference, slice_counts, cfg, ids), cfg)
        sb = score(_curve_on_cases(detections_b, reference, slice_counts, cfg, ids), cfg)
        if sa - sb <= 0:
            n_le += 1
    return (n_le + 1) / (cfg.n_bootstraps + 1)


def comparison_report(
    detections_a, detections_b, reference, slice_counts, cfg: FrocConfig
) -> dict:
    curve_a = froc(detections_a, reference, slice_counts, cfg)
    curve_b = froc(detections_b, reference, slice_counts, cfg)
    return {
        "scores": {"A": score(curve_a, cfg), "B": score(curve_b, cfg)},
        "p_value": paired_pvalue(detections_a, detections_b, reference, slice_counts, cfg),
        "config": {
            "hit_radius_mm": cfg.hit_radius_mm,
            "fp_cutoff_per_slice": cfg.fp_cutoff_per_slice,
            "n_bootstraps": cfg.n_bootstraps,
            "seed": cfg.seed,
        },
    }


def save_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, sort_keys=True, indent=2))
