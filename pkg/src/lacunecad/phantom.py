"""Deterministic synthetic cohort generator.

Each case is an ellipsoidal "brain" with mirrored ventricles and a
midsagittal plane, containing three object classes with full ground truth:

- lacune: ovoid CSF-intensity cavity (3-15 mm), dark on FLAIR and T1, with a
  hyperintense FLAIR rim drawn with configurable probability except in the
  inferior "cerebellum-like" zone, where rims never appear;
- pvs: thin elongated CSF tube clustered near the "basal-ganglia-like"
  ellipsoids flanking the ventricles; a configurable fraction is enlarged
  into the lacune size range (the main confounder);
- wmh: a FLAIR-hyperintense blob.

Cases are a pure function of (config, case_index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import CaseRecord, Mark, MarkSet, Volume3D, write_volume


class PlacementError(Exception):
    pass


PLACEMENT_RETRIES = 100


@dataclass
class PhantomConfig:
    dims: tuple[int, int, int] = (96, 96, 24)
    spacing: tuple[float, float, float] = (1.0, 1.2, 3.0)
    n_lacunes: int = 2
    n_pvs: int = 4
    n_wmh: int = 2
    rim_probability: float = 0.7
    lacune_diameter_mm: tuple[float, float] = (4.0, 10.0)
    pvs_diameter_mm: tuple[float, float] = (1.2, 2.5)
    pvs_enlarge_probability: float = 0.5
    pvs_enlarged_diameter_mm: tuple[float, float] = (4.0, 8.0)
    noise_sigma: float = 0.02
    seed: int = 0
    # canonical normalized intensity palette
    flair_tissue: float = 0.55
    flair_csf: float = 0.12
    flair_rim: float = 0.85
    flair_wmh: float = 0.80
    t1_tissue: float = 0.60
    t1_csf: float = 0.15
    background: float = 0.02

    def __post_init__(self):
        lo, hi = self.lacune_diameter_mm
        if not (3.0 <= lo <= hi <= 15.0):
            raise ValueError(
                f"lacune diameter range {self.lacune_diameter_mm} not within [3, 15] mm"
            )
        if self.pvs_diameter_mm[1] >= 3.0:
            raise ValueError("pvs base diameter must stay below 3 mm")
        if self.pvs_enlarged_diameter_mm[1] > 10.0:
            raise ValueError("enlarged pvs diameter capped at 10 mm")
        if not 0.0 <= self.rim_probability <= 1.0:
            raise ValueError("rim_probability must be in [0,1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "PhantomConfig":
        d = dict(d)
        for key in (
            "dims",
            "spacing",
            "lacune_diameter_mm",
            "pvs_diameter_mm",
            "pvs_enlarged_diameter_mm",
        ):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class PhantomObject:
    kind: str  # lacune | pvs | wmh
    mask: np.ndarray  # boolean (nz, ny, nx)
    centroid_mm: tuple[float, float, float]
    diameter_mm: float
    enlarged: bool = False
    has_rim: bool = False


@dataclass
class PhantomTruth:
    lacune_marks: list[tuple[float, float, float]]
    objects: list[PhantomObject]


class _Scene:
    """Voxel-center mm coordinate grids and anatomy masks for one case."""

    def __init__(self, cfg: PhantomConfig):
        nx, ny, nz = cfg.dims
        sx, sy, sz = cfg.spacing
        self.cfg = cfg
        zc, yc, xc = np.ogrid[0:nz, 0:ny, 0:nx]
        self.xmm = xc * sx
        self.ymm = yc * sy
        self.zmm = zc * sz
        self.center = np.array([(nx - 1) * sx / 2, (ny - 1) * sy / 2, (nz - 1) * sz / 2])
        self.brain_semi = np.array(
            [(nx - 1) * sx * 0.44, (ny - 1) * sy * 0.46, (nz - 1) * sz * 0.46]
        )
        self.brain = self._ellipsoid(self.center, self.brain_semi)
        vent_semi = np.array([5.0, 14.0, 7.0])
        self.vent_offset = 9.0
        cl = self.center + np.array([-self.vent_offset, 0, 2.0])
        cr = self.center + np.array([+self.vent_offset, 0, 2.0])
        self.vent_left = self._ellipsoid(cl, vent_semi)
        self.vent_right = self._ellipsoid(cr, vent_semi)
        # basal-ganglia-like ellipsoids flanking the ventricles
        bg_semi = np.array([8.0, 16.0, 8.0])
        self.bg_centers = [
            self.center + np.array([-self.vent_offset - 10.0, 0, 2.0]),
            self.center + np.array([+self.vent_offset + 10.0, 0, 2.0]),
        ]
        self.basal_ganglia = self._ellipsoid(
            self.bg_centers[0], bg_semi
        ) | self._ellipsoid(self.bg_centers[1], bg_semi)
        # cerebellum-like zone: inferior 20% of the brain's z extent
        zz = np.nonzero(self.brain.any(axis=(1, 2)))[0]
        z_lo, z_hi = zz.min(), zz.max()
        self.cerebellum_z_max = z_lo + 0.2 * (z_hi - z_lo)
        # interior region where object centers may land
        self.interior = self._ellipsoid(self.center, self.brain_semi - 6.0)

    def _ellipsoid(self, center_mm, semi_mm):
        q = (
            ((self.xmm - center_mm[0]) / semi_mm[0]) ** 2
            + ((self.ymm - center_mm[1]) / semi_mm[1]) ** 2
            + ((self.zmm - center_mm[2]) / semi_mm[2]) ** 2
        )
        return q <= 1.0

    def ellipsoid_at(self, center_mm, semi_mm, rot=None):
        if rot is None:
            return self._ellipsoid(center_mm, semi_mm)
        dx = self.xmm - center_mm[0]
        dy = self.ymm - center_mm[1]
        dz = self.zmm - center_mm[2]
        u = rot[0, 0] * dx + rot[0, 1] * dy + rot[0, 2] * dz
        v = rot[1, 0] * dx + rot[1, 1] * dy + rot[1, 2] * dz
        w = rot[2, 0] * dx + rot[2, 1] * dy + rot[2, 2] * dz
        return (u / semi_mm[0]) ** 2 + (v / semi_mm[1]) ** 2 + (w / semi_mm[2]) ** 2 <= 1.0


def _random_rotation(rng) -> np.ndarray:
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _mask_diameter_mm(mask: np.ndarray, spacing) -> float:
    sx, sy, sz = spacing
    zz, yy, xx = np.nonzero(mask)
    pts = np.stack([xx * sx, yy * sy, zz * sz], axis=1)
    if len(pts) > 2000:
        return 0.0  # absurdly large object; caller rejects
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.max()))


def _centroid_mm(mask: np.ndarray, spacing) -> tuple[float, float, float]:
    sx, sy, sz = spacing
    zz, yy, xx = np.nonzero(mask)
    return (float(xx.mean() * sx), float(yy.mean() * sy), float(zz.mean() * sz))


def _smooth_noise(shape, sigma, rng):
    noise = rng.standard_normal(shape) * sigma
    kernel = np.array([0.25, 0.5, 0.25])
    for axis in range(3):
        noise = ndimage.convolve1d(noise, kernel, axis=axis, mode="nearest")
    return noise


def _sample_center(scene: _Scene, allowed: np.ndarray, rng):
    zz, yy, xx = np.nonzero(allowed)
    i = int(rng.integers(len(xx)))
    sx, sy, sz = scene.cfg.spacing
    jitter = rng.uniform(-0.5, 0.5, size=3) * np.array([sx, sy, sz])
    return np.array([xx[i] * sx, yy[i] * sy, zz[i] * sz]) + jitter


def _place_lacune(scene: _Scene, rng, forbidden: np.ndarray) -> PhantomObject:
    cfg = scene.cfg
    lo, hi = cfg.lacune_diameter_mm
    allowed = scene.interior & ~forbidden & ~scene.basal_ganglia
    for _ in range(PLACEMENT_RETRIES):
        center = _sample_center(scene, allowed, rng)
        d = rng.uniform(lo + 1.0, hi - 0.5) if hi - lo > 1.5 else (lo + hi) / 2
        a = d / 2
        semi = np.array([a, a * rng.uniform(0.65, 0.9), max(a * rng.uniform(0.5, 0.8), 1.6)])
        mask = scene.ellipsoid_at(center, semi) & scene.brain
        if not mask.any() or (mask & forbidden).any():
            continue
        dm = _mask_diameter_mm(mask, cfg.spacing)
        if not (lo <= dm <= hi):
            continue
        in_cereb = center[2] / cfg.spacing[2] <= scene.cerebellum_z_max
        has_rim = (not in_cereb) and bool(rng.random() < cfg.rim_probability)
        return PhantomObject(
            "lacune", mask, _centroid_mm(mask, cfg.spacing), dm, has_rim=has_rim
        )
    raise PlacementError("placement failure: lacune")


def _place_pvs(scene: _Scene, rng, forbidden: np.ndarray) -> PhantomObject:
    cfg = scene.cfg
    enlarged = bool(rng.random() < cfg.pvs_enlarge_probability)
    allowed = scene.basal_ganglia & scene.interior & ~forbidden
    if not allowed.any():
        allowed = scene.interior & ~forbidden
    for _ in range(PLACEMENT_RETRIES):
        center = _sample_center(scene, allowed, rng)
        if enlarged:
            d = rng.uniform(*cfg.pvs_enlarged_diameter_mm)
            length = d * rng.uniform(1.1, 1.5)
        else:
            d = rng.uniform(*cfg.pvs_diameter_mm)
            length = rng.uniform(8.0, 16.0)
        rot = _random_rotation(rng)
        semi = np.array([length / 2, d / 2, max(d / 2, 1.6)])
        mask = scene.ellipsoid_at(center, semi, rot) & scene.brain
        if not mask.any() or (mask & forbidden).any():
            continue
        return PhantomObject(
            "pvs",
            mask,
            _centroid_mm(mask, cfg.spacing),
            _mask_diameter_mm(mask, cfg.spacing),
            enlarged=enlarged,
        )
    raise PlacementError("placement failure: pvs")


def _place_wmh(scene: _Scene, rng, forbidden: np.ndarray) -> PhantomObject:
    cfg = scene.cfg
    allowed = scene.interior & ~forbidden
    for _ in range(PLACEMENT_RETRIES):
        center = _sample_center(scene, allowed, rng)
        d = rng.uniform(6.0, 14.0)
        semi = np.array(
            [d / 2, d / 2 * rng.uniform(0.7, 1.0), max(d / 4, 1.8)]
        )
        mask = scene.ellipsoid_at(center, semi, _random_rotation(rng)) & scene.brain
        if not mask.any() or (mask & forbidden).any():
            continue
        return PhantomObject(
            "wmh", mask, _centroid_mm(mask, cfg.spacing),
            _mask_diameter_mm(mask, cfg.spacing),
        )
    raise PlacementError("placement failure: wmh")


def generate_case(cfg: PhantomConfig, case_index: int) -> tuple[CaseRecord, PhantomTruth]:
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=cfg.seed, spawn_key=(case_index,))
    )
    scene = _Scene(cfg)
    nx, ny, nz = cfg.dims

    # margin keeps objects clear of the ventricles and of each other
    dilate = ndimage.binary_dilation
    forbidden = dilate(scene.vent_left | scene.vent_right, iterations=2)

    objects: list[PhantomObject] = []
    for _ in range(cfg.n_wmh):
        obj = _place_wmh(scene, rng, forbidden)
        objects.append(obj)
        forbidden = forbidden | dilate(obj.mask, iterations=2)
    for _ in range(cfg.n_lacunes):
        obj = _place_lacune(scene, rng, forbidden)
        objects.append(obj)
        forbidden = forbidden | dilate(obj.mask, iterations=3)
    for _ in range(cfg.n_pvs):
        obj = _place_pvs(scene, rng, forbidden)
        objects.append(obj)
        forbidden = forbidden | dilate(obj.mask, iterations=2)

    flair = np.full((nz, ny, nx), cfg.background, dtype=np.float64)
    t1 = np.full((nz, ny, nx), cfg.background, dtype=np.float64)
    flair[scene.brain] = cfg.flair_tissue
    t1[scene.brain] = cfg.t1_tissue
    vents = scene.vent_left | scene.vent_right
    flair[vents] = cfg.flair_csf
    t1[vents] = cfg.t1_csf

    for obj in objects:
        if obj.kind == "wmh":
            flair[obj.mask] = cfg.flair_wmh
            # wmh is subtle on T1: slightly darker than tissue
            t1[obj.mask] = cfg.t1_tissue - 0.05
        elif obj.kind == "lacune":
            if obj.has_rim:
                rim = dilate(obj.mask, iterations=2) & scene.brain & ~obj.mask
                flair[rim] = cfg.flair_rim
            flair[obj.mask] = cfg.flair_csf
            t1[obj.mask] = cfg.t1_csf
        else:  # pvs
            flair[obj.mask] = cfg.flair_csf
            t1[obj.mask] = cfg.t1_csf

    flair += _smooth_noise(flair.shape, cfg.noise_sigma, rng)
    t1 += _smooth_noise(t1.shape, cfg.noise_sigma, rng)

    lacune_mask = np.zeros((nz, ny, nx), dtype=np.float32)
    marks = []
    for obj in objects:
        if obj.kind == "lacune":
            lacune_mask[obj.mask] = 1.0
            marks.append(obj.centroid_mm)

    vol = lambda a: Volume3D(cfg.dims, cfg.spacing, a.astype(np.float32))
    case = CaseRecord(
        case_id=f"case_{case_index:04d}",
        flair=vol(flair),
        t1=vol(t1),
        brain_mask=vol(scene.brain.astype(np.float32)),
        lacune_mask=Volume3D(cfg.dims, cfg.spacing, lacune_mask),
        ventricle_left_mask=vol(scene.vent_left.astype(np.float32)),
        ventricle_right_mask=vol(scene.vent_right.astype(np.float32)),
        midsagittal_x=(nx - 1) / 2,
        lacune_marks=marks,
    )
    return case, PhantomTruth(lacune_marks=marks, objects=objects)


def _split_sizes(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    n_train = int(n * ratios[0])
    n_val = int(n * ratios[1])
    return n_train, n_val, n - n_train - n_val


CASE_VOLUMES = (
    "flair",
    "t1",
    "brain_mask",
    "lacune_mask",
    "ventricle_left_mask",
    "ventricle_right_mask",
)


def generate_cohort(
    cfg: PhantomConfig,
    n_cases: int,
    out_dir,
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
) -> dict:
    """Write n_cases phantom cases plus a cohort manifest; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_train, n_val, n_test = _split_sizes(n_cases, ratios)
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    entries = []
    all_marks = []
    for i in range(n_cases):
        try:
            case, truth = generate_case(cfg, i)
        except PlacementError as e:
            raise PlacementError(f"case {i}: {e}") from None
        case_dir = out / case.case_id
        case_dir.mkdir(exist_ok=True)
        paths = {}
        for name in CASE_VOLUMES:
            write_volume(getattr(case, name), case_dir / name)
            paths[name] = f"{case.case_id}/{name}"
        truth_doc = {
            "lacune_marks": [list(m) for m in truth.lacune_marks],
            "objects": [
                {
                    "kind": o.kind,
                    "centroid_mm": list(o.centroid_mm),
                    "diameter_mm": o.diameter_mm,
                    "enlarged": o.enlarged,
                    "has_rim": o.has_rim,
                }
                for o in truth.objects
            ],
        }
        (case_dir / "truth.json").write_text(json.dumps(truth_doc, sort_keys=True))
        entries.append(
            {
                "id": case.case_id,
                "flair": paths["flair"],
                "t1": paths["t1"],
                "masks": {k: paths[k] for k in CASE_VOLUMES[2:]},
                "midsagittal_x": case.midsagittal_x,
                "n_slices": cfg.dims[2],
                "truth": f"{case.case_id}/truth.json",
                "split": splits[i],
            }
        )
        for m in truth.lacune_marks:
            all_marks.append(Mark(case.case_id, tuple(m)))
    MarkSet("reference", all_marks).save(out / "reference_marks.json")
    manifest = {"cases": entries, "config": cfg.to_json()}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


def load_manifest(cohort_dir) -> dict:
    path = Path(cohort_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"missing cohort manifest {path}")
    return json.loads(path.read_text())


def load_case(cohort_dir, entry: dict) -> CaseRecord:
    from .volume import read_volume

    base = Path(cohort_dir)
    truth = json.loads((base / entry["truth"]).read_text())
    return CaseRecord(
        case_id=entry["id"],
        flair=read_volume(base / entry["flair"]),
        t1=read_volume(base / entry["t1"]),
        brain_mask=read_volume(base / entry["masks"]["brain_mask"]),
        lacune_mask=read_volume(base / entry["masks"]["lacune_mask"]),
        ventricle_left_mask=read_volume(base / entry["masks"]["ventricle_left_mask"]),
        ventricle_right_mask=read_volume(base / entry["masks"]["ventricle_right_mask"]),
        midsagittal_x=entry["midsagittal_x"],
        lacune_marks=[tuple(m) for m in truth["lacune_marks"]],
    )


def cases_for_split(manifest: dict, split: str) -> list[dict]:
    return [c for c in manifest["cases"] if c["split"] == split]
