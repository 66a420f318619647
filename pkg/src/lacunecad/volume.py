"""Volume data model, file IO, and mask geometry utilities.

Volumes are dense 32-bit float grids with per-axis physical spacing in mm.
Voxel indices are (x, y, z); the value array is stored C-order with z as the
slowest axis, so ``values[z, y, x]`` addresses voxel (x, y, z) and
``world(v) = (x*sx, y*sy, z*sz)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

VOLUME_KIND = "f32le"


class VolumeError(Exception):
    """Raised for malformed volume files or invalid volume arguments."""


@dataclass
class Volume3D:
    dims: tuple[int, int, int]  # (nx, ny, nz)
    spacing: tuple[float, float, float]  # (sx, sy, sz) in mm
    values: np.ndarray  # shape (nz, ny, nx), float32

    def __post_init__(self):
        nx, ny, nz = self.dims
        if nx <= 0 or ny <= 0 or nz <= 0:
            raise VolumeError(f"non-positive dims {self.dims}")
        for s in self.spacing:
            if not np.isfinite(s) or s <= 0:
                raise VolumeError(f"non-positive spacing {self.spacing}")
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.shape != (nz, ny, nx):
            if self.values.size == nx * ny * nz:
                self.values = self.values.reshape(nz, ny, nx)
            else:
                raise VolumeError(
                    f"length mismatch: dims {self.dims} need {nx * ny * nz} "
                    f"values, got {self.values.size}"
                )

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def at(self, x: int, y: int, z: int) -> float:
        return float(self.values[z, y, x])

    def world(self, voxel) -> np.ndarray:
        """World mm position of a voxel index (x, y, z)."""
        return np.asarray(voxel, dtype=np.float64) * np.asarray(self.spacing)

    def like(self, values: np.ndarray) -> "Volume3D":
        """New volume with the same geometry and different values."""
        return Volume3D(self.dims, self.spacing, values)


def write_volume(v: Volume3D, path) -> None:
    """Write ``<path>.volhdr`` (JSON header) + ``<path>.volraw`` (raw floats)."""
    base = _base_path(path)
    header = {
        "dims": list(v.dims),
        "spacing": list(v.spacing),
        "kind": VOLUME_KIND,
    }
    base.with_suffix(".volhdr").write_text(json.dumps(header, sort_keys=True))
    base.with_suffix(".volraw").write_bytes(
        np.ascontiguousarray(v.values, dtype="<f4").tobytes()
    )


def read_volume(path) -> Volume3D:
    base = _base_path(path)
    hdr_path = base.with_suffix(".volhdr")
    raw_path = base.with_suffix(".volraw")
    if not hdr_path.exists():
        raise VolumeError(f"missing header file {hdr_path}")
    if not raw_path.exists():
        raise VolumeError(f"missing raw file {raw_path}")
    header = json.loads(hdr_path.read_text())
    if header.get("kind") != VOLUME_KIND:
        raise VolumeError(f"unsupported kind {header.get('kind')!r}")
    dims = tuple(int(d) for d in header["dims"])
    spacing = tuple(float(s) for s in header["spacing"])
    raw = raw_path.read_bytes()
    n = dims[0] * dims[1] * dims[2]
    if len(raw) != 4 * n:
        raise VolumeError(
            f"length mismatch: {raw_path} holds {len(raw) // 4} floats, "
            f"dims {dims} need {n}"
        )
    values = np.frombuffer(raw, dtype="<f4").reshape(dims[2], dims[1], dims[0])
    return Volume3D(dims, spacing, values.copy())


def _base_path(path) -> Path:
    p = Path(path)
    if p.suffix in (".volhdr", ".volraw"):
        p = p.with_suffix("")
    return p


def distance_transform(mask: Volume3D) -> Volume3D:
    """Exact Euclidean distance (mm) to the nearest foreground voxel."""
    fg = mask.values > 0.5
    if not fg.any():
        raise VolumeError("empty mask: distance transform needs >=1 foreground voxel")
    sx, sy, sz = mask.spacing
    dist = ndimage.distance_transform_edt(~fg, sampling=(sz, sy, sx))
    return mask.like(dist.astype(np.float32))


def boundary_mask(mask: Volume3D) -> Volume3D:
    """6-connected boundary voxels: foreground with a background neighbor.

    Voxels on the array border count as boundary (the outside is background).
    """
    fg = mask.values > 0.5
    interior = np.ones_like(fg)
    for axis in range(3):
        lo = np.roll(fg, 1, axis=axis)
        hi = np.roll(fg, -1, axis=axis)
        # roll wraps; force the faces to background
        sl_lo = [slice(None)] * 3
        sl_lo[axis] = 0
        lo[tuple(sl_lo)] = False
        sl_hi = [slice(None)] * 3
        sl_hi[axis] = -1
        hi[tuple(sl_hi)] = False
        interior &= lo & hi
    return mask.like((fg & ~interior).astype(np.float32))


def world_to_voxel(v: Volume3D, q) -> tuple[int, int, int]:
    """Nearest voxel index to a world mm point; rounds half away from zero."""
    q = np.asarray(q, dtype=np.float64)
    ratio = q / np.asarray(v.spacing, dtype=np.float64)
    idx = np.sign(ratio) * np.floor(np.abs(ratio) + 0.5)
    idx = idx.astype(int)
    for i, n in enumerate(v.dims):
        if idx[i] < 0 or idx[i] >= n:
            raise VolumeError(f"world point {q.tolist()} outside volume extent")
    return int(idx[0]), int(idx[1]), int(idx[2])


@dataclass
class Mark:
    case_id: str
    xyz_mm: tuple[float, float, float]
    score: float | None = None


@dataclass
class MarkSet:
    source_id: str
    marks: list[Mark] = field(default_factory=list)

    def for_case(self, case_id: str) -> list[Mark]:
        return [m for m in self.marks if m.case_id == case_id]

    def case_ids(self) -> set[str]:
        return {m.case_id for m in self.marks}

    def save(self, path) -> None:
        records = [
            {"case": m.case_id, "xyz_mm": list(map(float, m.xyz_mm)), "score": m.score}
            for m in self.marks
        ]
        Path(path).write_text(json.dumps(records, sort_keys=True))

    @classmethod
    def load(cls, path, source_id: str | None = None) -> "MarkSet":
        records = json.loads(Path(path).read_text())
        marks = [
            Mark(r["case"], tuple(r["xyz_mm"]), r.get("score")) for r in records
        ]
        return cls(source_id or Path(path).stem, marks)


@dataclass
class LocationFeatures:
    nx_norm: float
    ny_norm: float
    nz_norm: float
    d_vent_left: float
    d_vent_right: float
    d_cortex: float
    d_midsagittal: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [
                self.nx_norm,
                self.ny_norm,
                self.nz_norm,
                self.d_vent_left,
                self.d_vent_right,
                self.d_cortex,
                self.d_midsagittal,
            ],
            dtype=np.float32,
        )


N_LOCATION_FEATURES = 7


@dataclass
class CaseRecord:
    case_id: str
    flair: Volume3D
    t1: Volume3D
    brain_mask: Volume3D
    lacune_mask: Volume3D
    ventricle_left_mask: Volume3D
    ventricle_right_mask: Volume3D
    midsagittal_x: float
    lacune_marks: list[tuple[float, float, float]] = field(default_factory=list)

    _dist_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def validate(self) -> None:
        vols = [
            self.flair,
            self.t1,
            self.brain_mask,
            self.lacune_mask,
            self.ventricle_left_mask,
            self.ventricle_right_mask,
        ]
        for v in vols[1:]:
            if v.dims != vols[0].dims or v.spacing != vols[0].spacing:
                raise VolumeError(f"case {self.case_id}: volume geometry mismatch")
        lac = self.lacune_mask.values > 0.5
        if (lac & ~(self.brain_mask.values > 0.5)).any():
            raise VolumeError(f"case {self.case_id}: lacune_mask outside brain_mask")
        for mark in self.lacune_marks:
            x, y, z = world_to_voxel(self.brain_mask, mark)
            if self.brain_mask.at(x, y, z) <= 0.5:
                raise VolumeError(
                    f"case {self.case_id}: lacune mark {mark} outside brain_mask"
                )

    # Distance fields are derived, deterministic, and reused across many
    # candidates in one case, so they are cached on first access.
    def _distance_field(self, key: str) -> Volume3D:
        if key not in self._dist_cache:
            if key == "cortex":
                src = boundary_mask(self.brain_mask)
            elif key == "vent_left":
                src = self.ventricle_left_mask
            else:
                src = self.ventricle_right_mask
            self._dist_cache[key] = distance_transform(src)
        return self._dist_cache[key]

    def brain_bbox(self) -> tuple[np.ndarray, np.ndarray]:
        """(lo, hi) inclusive voxel bounds of the brain mask as (x, y, z)."""
        if "bbox" not in self._dist_cache:
            fg = self.brain_mask.values > 0.5
            zz, yy, xx = np.nonzero(fg)
            lo = np.array([xx.min(), yy.min(), zz.min()])
            hi = np.array([xx.max(), yy.max(), zz.max()])
            self._dist_cache["bbox"] = (lo, hi)
        return self._dist_cache["bbox"]


def location_features(case: CaseRecord, p) -> LocationFeatures:
    """Seven explicit location features for voxel index p = (x, y, z)."""
    x, y, z = (int(c) for c in p)
    nx, ny, nz = case.flair.dims
    if not (0 <= x < nx and 0 <= y < ny and 0 <= z < nz):
        raise VolumeError(f"voxel {p} outside volume dims {case.flair.dims}")
    lo, hi = case.brain_bbox()
    span = np.maximum(hi - lo, 1)
    norm = (np.array([x, y, z]) - lo) / span
    sx = case.flair.spacing[0]
    return LocationFeatures(
        nx_norm=float(norm[0]),
        ny_norm=float(norm[1]),
        nz_norm=float(norm[2]),
        d_vent_left=float(case._distance_field("vent_left").at(x, y, z)),
        d_vent_right=float(case._distance_field("vent_right").at(x, y, z)),
        d_cortex=float(case._distance_field("cortex").at(x, y, z)),
        d_midsagittal=float(abs(x - case.midsagittal_x) * sx),
    )
