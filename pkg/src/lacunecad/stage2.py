"""False-positive reduction stage.

Each candidate is described by three axial 3D patches at growing extents
(32x32x5, 64x64x5, 128x128x5 voxels; the larger two block-mean-pooled back
to 32x32x5) plus seven explicit location features. A three-stream 3D CNN
with one shared convolutional weight set, per-stream fully connected layers,
and feature fusion at the first post-fusion layer scores each candidate;
test-time augmentation averages the 242 crop/flip variants.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .nn import ModelBundle, Sequential, TrainConfig, train
from .nn.network import softmax
from .stage1 import Candidate
from .volume import (
    N_LOCATION_FEATURES,
    CaseRecord,
    location_features,
    world_to_voxel,
)

BASE_EXTENT = 32
SCALES = (32, 64, 128)
DEPTH = 5
CROP_HALF = 5  # crop offsets -5..+5 per axis: an 11x11 grid
N_VARIANTS = (2 * CROP_HALF + 1) ** 2 * 2  # 242


@dataclass
class Stage2Config:
    scales: tuple = ((32, 32, 5), (64, 64, 5), (128, 128, 5))
    channels: int = 2
    conv_filters: tuple = (64, 64, 128, 128, 256, 256)
    conv_kernels: tuple = ((3, 3, 2), (3, 3, 2), (3, 3, 1), (3, 3, 1), (3, 3, 1), (3, 3, 1))
    pool_size: tuple = (2, 2, 1)
    stream_fc: int = 300
    fc_sizes: tuple = (200, 2)
    dropout: float = 0.5
    l2_lambda: float = 2e-5
    lr: float = 5e-4
    lr_decay_factor: float = 2.0
    epochs: int = 40
    hit_radius_mm: float = 3.0

    @property
    def fused_width(self) -> int:
        return 3 * self.stream_fc + N_LOCATION_FEATURES

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        for k in ("conv_filters", "pool_size", "fc_sizes"):
            if k in d:
                d[k] = tuple(d[k])
        for k in ("scales", "conv_kernels"):
            if k in d:
                d[k] = tuple(tuple(v) for v in d[k])
        return cls(**d)

    def train_config(self, seed=0, **overrides) -> TrainConfig:
        kw = dict(
            batch_size=128,
            lr=self.lr,
            l2_lambda=self.l2_lambda,
            lr_decay_factor=self.lr_decay_factor,
            max_epochs=self.epochs,
            seed=seed,
        )
        kw.update(overrides)
        return TrainConfig(**kw)


# --- multi-scale patch extraction --------------------------------------------

_PAD_XY = SCALES[-1] // 2 + CROP_HALF  # 69
_PAD_Z = DEPTH // 2  # 2


def multiscale_padded(case: CaseRecord) -> np.ndarray:
    """(nz + 4, 2, H + 138, W + 138) mirror-padded FLAIR+T1 stack."""
    stack = np.stack([case.flair.values, case.t1.values], axis=1)
    return np.pad(
        stack.astype(np.float32),
        ((_PAD_Z, _PAD_Z), (0, 0), (_PAD_XY, _PAD_XY), (_PAD_XY, _PAD_XY)),
        mode="symmetric",
    )


def _block_mean(patch: np.ndarray, b: int) -> np.ndarray:
    """In-plane b x b block mean over the trailing two axes."""
    *lead, h, w = patch.shape
    return patch.reshape(*lead, h // b, b, w // b, b).mean(axis=(-3, -1))


def extract_multiscale(
    case: CaseRecord,
    voxel,
    crop_offset=(0, 0),
    flip: bool = False,
    padded: np.ndarray | None = None,
) -> np.ndarray:
    """Three 2-channel 32x32x5 tensors, stacked as (3, 2, 5, 32, 32).

    The crop offset (dy, dx) shifts the in-plane center at native
    resolution; a horizontal flip mirrors all three tensors consistently.
    Out-of-volume context is mirror-padded.
    """
    if padded is None:
        padded = multiscale_padded(case)
    x, y, z = (int(c) for c in voxel)
    dy, dx = crop_offset
    cy, cx = y + dy + _PAD_XY, x + dx + _PAD_XY
    slab = padded[z : z + DEPTH]  # z already offset by _PAD_Z
    out = np.empty((3, 2, DEPTH, BASE_EXTENT, BASE_EXTENT), dtype=np.float32)
    for si, extent in enumerate(SCALES):
        half = extent // 2
        patch = slab[:, :, cy - half : cy + half, cx - half : cx + half]
        patch = patch.transpose(1, 0, 2, 3)  # (C, Z, H, W)
        if extent != BASE_EXTENT:
            patch = _block_mean(patch, extent // BASE_EXTENT)
        out[si] = patch
    if flip:
        out = out[:, :, :, :, ::-1]
    return out


# --- the three-stream fusion network ------------------------------------------


def _stream_specs(cfg: Stage2Config) -> list[dict]:
    specs = []
    c = cfg.channels
    for i, (f, k) in enumerate(zip(cfg.conv_filters, cfg.conv_kernels)):
        specs.append({"kind": "conv3d", "in_channels": c, "filters": f, "kernel": list(k)})
        specs.append({"kind": "batchnorm", "num_features": f})
        specs.append({"kind": "relu"})
        if i == 1:  # single pooling layer, after the second convolution
            specs.append(
                {"kind": "maxpool3d", "size": list(cfg.pool_size), "stride": list(cfg.pool_size)}
            )
        c = f
    specs.append({"kind": "flatten"})
    return specs


def _stream_out_features(cfg: Stage2Config) -> int:
    h = w = BASE_EXTENT
    z = DEPTH
    for i, (ky, kx, kz) in enumerate(cfg.conv_kernels):
        h, w, z = h - ky + 1, w - kx + 1, z - kz + 1
        if i == 1:
            py, px, pz = cfg.pool_size
            h, w, z = h // py, w // px, z // pz
    return cfg.conv_filters[-1] * z * h * w


def assert_stage2_architecture(cfg: Stage2Config):
    """Structural constants of the false-positive-reduction network."""
    assert cfg.fused_width == 907, "fused width must be exactly 907"
    assert cfg.conv_filters == (64, 64, 128, 128, 256, 256)
    assert tuple(tuple(k) for k in cfg.conv_kernels) == (
        (3, 3, 2), (3, 3, 2), (3, 3, 1), (3, 3, 1), (3, 3, 1), (3, 3, 1),
    )
    assert tuple(cfg.pool_size) == (2, 2, 1)
    assert tuple(cfg.fc_sizes) == (200, 2)
    # per-stream shape law: 32x32x5 -> ... -> 6x6x3
    assert _stream_out_features(cfg) == 256 * 6 * 6 * 3
    assert N_VARIANTS == 242


class Stage2Net:
    """Late-fusion network: one shared conv stack applied to all three
    streams (streams folded into the batch axis), three separate per-stream
    fc layers, and a post-fusion head that also receives the 7 location
    features."""

    def __init__(self, cfg: Stage2Config, rng=None, dtype=np.float32):
        assert_stage2_architecture(cfg)
        self.cfg = cfg
        stream_out = _stream_out_features(cfg)
        self.stream = Sequential.from_specs(_stream_specs(cfg), rng=rng, dtype=dtype)
        fc_specs = [
            {"kind": "dense", "in_features": stream_out, "out_features": cfg.stream_fc},
            {"kind": "batchnorm", "num_features": cfg.stream_fc},
            {"kind": "relu"},
            {"kind": "dropout", "rate": cfg.dropout},
        ]
        self.fc_streams = [
            Sequential.from_specs(fc_specs, rng=rng, dtype=dtype) for _ in range(3)
        ]
        head_specs = [
            {"kind": "dense", "in_features": cfg.fused_width, "out_features": cfg.fc_sizes[0]},
            {"kind": "batchnorm", "num_features": cfg.fc_sizes[0]},
            {"kind": "relu"},
            {"kind": "dropout", "rate": cfg.dropout},
            {"kind": "dense", "in_features": cfg.fc_sizes[0], "out_features": cfg.fc_sizes[1]},
        ]
        self.head = Sequential.from_specs(head_specs, rng=rng, dtype=dtype)
        self._parts = [("stream", self.stream)] + [
            (f"fc{i}", net) for i, net in enumerate(self.fc_streams)
        ] + [("head", self.head)]

    # --- folded forward/backward ---------------------------------------------

    def _fold(self, patches):
        # (N, 3, 2, 5, 32, 32) -> (3N, 2, 5, 32, 32), stream-major
        n = patches.shape[0]
        return patches.transpose(1, 0, 2, 3, 4, 5).reshape(3 * n, *patches.shape[2:])

    def stream_features(self, patches, train=False):
        """(N, 3, 2, 5, 32, 32) -> (N, 900) concatenated per-stream fc outputs."""
        n = patches.shape[0]
        flat = self.stream.forward(self._fold(patches), train=train)
        hs = [
            self.fc_streams[s].forward(flat[s * n : (s + 1) * n], train=train)
            for s in range(3)
        ]
        self._n = n
        return np.concatenate(hs, axis=1)

    def head_logits(self, fused900, feats, train=False):
        fused = np.concatenate([fused900, feats.astype(fused900.dtype)], axis=1)
        if fused.shape[1] != self.cfg.fused_width:
            raise ValueError(f"fused width {fused.shape[1]} != {self.cfg.fused_width}")
        return self.head.forward_logits(fused, train=train)

    def forward_logits(self, inputs, train=False):
        patches, feats = inputs
        h = self.stream_features(patches, train=train)
        return self.head_logits(h, feats, train=train)

    def backward(self, dlogits):
        n = self._n
        w = self.cfg.stream_fc
        dfused = self.head.backward(dlogits)
        dflat_parts = [
            self.fc_streams[s].backward(dfused[:, s * w : (s + 1) * w])
            for s in range(3)
        ]
        self.stream.backward(np.concatenate(dflat_parts, axis=0))

    def predict_proba(self, inputs):
        return softmax(self.forward_logits(inputs, train=False))

    # --- parameter plumbing ----------------------------------------------------

    def parameters(self):
        out = []
        for prefix, net in self._parts:
            for name, layer, key in net.parameters():
                out.append((f"{prefix}.{name}", layer, key))
        return out

    def state_dict(self):
        out = {}
        for prefix, net in self._parts:
            for name, arr in net.state_dict().items():
                out[f"{prefix}.{name}"] = arr
        return out

    def load_state_dict(self, state):
        for prefix, net in self._parts:
            sub = {
                name[len(prefix) + 1 :]: arr
                for name, arr in state.items()
                if name.startswith(prefix + ".")
            }
            net.load_state_dict(sub)

    def reseed(self, seed: int) -> None:
        ss = np.random.SeedSequence(seed)
        for (prefix, net), child in zip(self._parts, ss.spawn(len(self._parts))):
            net.reseed(child.generate_state(1)[0])


def build_stage2_net(cfg: Stage2Config, seed: int = 0) -> Stage2Net:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    return Stage2Net(cfg, rng=rng)


# --- sampling -----------------------------------------------------------------


@dataclass
class SampleItem:
    """Provenance of one training sample; patches are extracted lazily."""

    case_index: int
    voxel: tuple[int, int, int]
    crop_offset: tuple[int, int]
    flip: bool
    label: int


class Stage2Dataset:
    """Lazy multiscale patch dataset: items hold provenance only; tensors
    are extracted and normalized per batch so the 242-fold augmented set
    never needs to be materialized."""

    def __init__(self, cases: list[CaseRecord], items: list[SampleItem], stats: dict):
        self.cases = cases
        self.items = items
        self.stats = stats
        self.labels = np.array([it.label for it in items], dtype=int)
        self._padded = {}
        feats = np.stack(
            [
                location_features(cases[it.case_index], it.voxel).as_array()
                for it in items
            ]
        )
        mean = np.asarray(stats["feat_mean"], np.float32)
        std = np.asarray(stats["feat_std"], np.float32)
        self.feats = (feats - mean) / std

    def padded(self, ci: int) -> np.ndarray:
        if ci not in self._padded:
            self._padded[ci] = multiscale_padded(self.cases[ci])
        return self._padded[ci]

    def __len__(self):
        return len(self.items)

    def _extract(self, sel) -> np.ndarray:
        mean = np.asarray(self.stats["mean"], np.float32).reshape(1, 1, 2, 1, 1, 1)
        std = np.asarray(self.stats["std"], np.float32).reshape(1, 1, 2, 1, 1, 1)
        out = np.empty((len(sel), 3, 2, DEPTH, BASE_EXTENT, BASE_EXTENT), np.float32)
        for i, idx in enumerate(sel):
            it = self.items[idx]
            out[i] = extract_multiscale(
                self.cases[it.case_index],
                it.voxel,
                it.crop_offset,
                it.flip,
                padded=self.padded(it.case_index),
            )
        return (out - mean) / std

    def batches(self, batch_size, rng=None):
        order = np.arange(len(self.items))
        if rng is not None:
            rng.shuffle(order)
        for i in range(0, len(order), batch_size):
            sel = order[i : i + batch_size]
            yield (self._extract(sel), self.feats[sel]), self.labels[sel]


def _mark_voxels(case: CaseRecord, marks) -> list[tuple[int, int, int]]:
    return [world_to_voxel(case.flair, m) for m in marks]


def sample_stage2(
    cases: list[CaseRecord],
    candidates: list[Candidate],
    cfg: Stage2Config,
    rng,
    reference=None,
    stats_samples: int = 256,
) -> Stage2Dataset:
    """Balanced dataset: every reference lacune mark expanded to all 242
    crop/flip variants; an equal number of negatives drawn from candidates
    farther than the hit radius from every mark, each with one random crop
    and flip (with replacement when the pool is short).

    ``reference`` is an optional MarkSet; by default each case's own
    lacune marks are the reference."""
    case_index = {c.case_id: i for i, c in enumerate(cases)}

    def marks_of(case):
        if reference is None:
            return case.lacune_marks
        return [m.xyz_mm for m in reference.for_case(case.case_id)]
    items: list[SampleItem] = []
    offsets = [
        (dy, dx)
        for dy in range(-CROP_HALF, CROP_HALF + 1)
        for dx in range(-CROP_HALF, CROP_HALF + 1)
    ]
    for ci, case in enumerate(cases):
        for v in _mark_voxels(case, marks_of(case)):
            for off in offsets:
                for flip in (False, True):
                    items.append(SampleItem(ci, v, off, flip, 1))
    n_pos = len(items)
    if n_pos == 0:
        raise ValueError("no reference lacune marks in the cohort")
    neg_pool = []
    for cand in candidates:
        ci = case_index.get(cand.case_id)
        if ci is None:
            continue
        case = cases[ci]
        d = [
            np.linalg.norm(np.subtract(cand.xyz_mm, m))
            for m in marks_of(case)
        ]
        if not d or min(d) > cfg.hit_radius_mm:
            neg_pool.append((ci, cand.voxel))
    if not neg_pool:
        raise ValueError("no negative candidates available")
    pick = rng.choice(len(neg_pool), size=n_pos, replace=len(neg_pool) < n_pos)
    for idx in pick:
        ci, v = neg_pool[idx]
        off = (int(rng.integers(-CROP_HALF, CROP_HALF + 1)),
               int(rng.integers(-CROP_HALF, CROP_HALF + 1)))
        flip = bool(rng.integers(0, 2))
        items.append(SampleItem(ci, v, off, flip, 0))

    # normalization statistics from a deterministic subsample of the tensors
    # and from every sample's location features
    probe = rng.choice(len(items), size=min(stats_samples, len(items)), replace=False)
    raw = Stage2Dataset(cases, [items[i] for i in probe],
                        {"mean": [0, 0], "std": [1, 1],
                         "feat_mean": [0] * 7, "feat_std": [1] * 7})
    tensors = raw._extract(range(len(probe)))
    mean = tensors.mean(axis=(0, 1, 3, 4, 5))
    std = tensors.std(axis=(0, 1, 3, 4, 5))
    std[std == 0] = 1.0
    all_feats = np.stack(
        [location_features(cases[it.case_index], it.voxel).as_array() for it in items]
    )
    fstd = all_feats.std(axis=0)
    fstd[fstd == 0] = 1.0
    stats = {
        "mean": mean.tolist(),
        "std": std.tolist(),
        "feat_mean": all_feats.mean(axis=0).tolist(),
        "feat_std": fstd.tolist(),
    }
    return Stage2Dataset(cases, items, stats)


# --- training -----------------------------------------------------------------


def train_stage2(
    train_ds: Stage2Dataset,
    cfg: Stage2Config,
    train_cfg: TrainConfig,
    val_ds: Stage2Dataset | None = None,
) -> tuple[ModelBundle, list]:
    net = build_stage2_net(cfg, seed=train_cfg.seed)
    history, _ = train(net, train_ds, train_cfg, val_data=val_ds)
    bundle = ModelBundle(
        arch={"type": "stage2-fusion", "config": cfg.to_json()},
        state=net.state_dict(),
        stats=train_ds.stats,
        meta={"history": history},
    )
    return bundle, history


def load_stage2_net(bundle: ModelBundle) -> Stage2Net:
    if bundle.arch.get("type") != "stage2-fusion":
        raise ValueError(f"not a stage-2 bundle: {bundle.arch.get('type')}")
    net = Stage2Net(Stage2Config.from_json(bundle.arch["config"]))
    net.load_state_dict(bundle.state)
    return net


def _cached_stage2_net(bundle: ModelBundle) -> Stage2Net:
    """Per-bundle instantiated net; reuse keeps inference-time layer caches
    (e.g. kernel spectra) warm across candidates and cases."""
    net = getattr(bundle, "_stage2_net", None)
    if net is None:
        net = load_stage2_net(bundle)
        bundle._stage2_net = net
    return net


# --- scoring ------------------------------------------------------------------

_VARIANTS = [
    ((dy, dx), flip)
    for dy in range(-CROP_HALF, CROP_HALF + 1)
    for dx in range(-CROP_HALF, CROP_HALF + 1)
    for flip in (False, True)
]
_CENTER_INDEX = _VARIANTS.index(((0, 0), False))

@dataclass
class CandidateScores:
    p2: float  # mean softmax probability over the 242 variants
    p2_center: float  # centered unflipped variant only
    p2_ablate: float  # 242-variant mean with the location features zeroed


def _stream_splits(net: Stage2Net):
    """The shared conv stack split at its pooling layer: (prefix layers,
    pool, suffix conv layers); the trailing flatten is left off."""
    layers = net.stream.layers
    pool_idx = next(
        i for i, l in enumerate(layers) if l.spec()["kind"] == "maxpool3d"
    )
    return layers[:pool_idx], layers[pool_idx], layers[pool_idx + 1 : -1]


def _dense_conv_maps(prefix, pool, suffix, windows, b):
    """Conv-stack output maps covering every crop/flip variant of one scale.

    ``windows`` are the normalized raw fields (n_cand, 2, DEPTH,
    extent + 10, extent + 10) around each candidate. Valid convolutions
    commute with cropping, so instead of 242 independent passes per
    candidate the stack runs densely over the fields; the b x b block-mean
    downsampling and the stride-2 pooling are not shift-invariant, so each
    splits into phase grids that are enumerated here (batched by field
    shape, with candidates sharing every batch). Keys are
    (flip, block_phase_y, block_phase_x, pool_phase_y, pool_phase_x) and
    values are (n_cand, filters, 3, My, Mx) maps whose 6x6 spatial windows
    are the per-crop conv features."""
    nc = windows.shape[0]
    span = 2 * CROP_HALF
    entries = []
    for flip in (False, True):
        raw = windows[..., ::-1] if flip else windows
        for py in range(b):
            ky = BASE_EXTENT + (span - py) // b
            for px in range(b):
                kx = BASE_EXTENT + (span - px) // b
                sub = raw[:, :, :, py : py + ky * b, px : px + kx * b]
                if b > 1:
                    sub = _block_mean(sub, b)
                entries.append(((flip, py, px), sub))
    groups: dict[tuple, list] = {}
    for key, field in entries:
        groups.setdefault(field.shape, []).append((key, field))
    maps = {}
    phases = ((0, 0), (0, 1), (1, 0), (1, 1))
    red_y = sum(l.spec()["kernel"][0] - 1 for l in suffix if "kernel" in l.spec())
    red_x = sum(l.spec()["kernel"][1] - 1 for l in suffix if "kernel" in l.spec())
    for items in groups.values():
        x = np.concatenate([field for _, field in items])
        for layer in prefix:
            x = layer.forward(x, train=False)
        pooled = [pool.forward(x[:, :, :, qy:, qx:], train=False) for qy, qx in phases]
        # phase maps differ by at most one row/column; zero-pad them to a
        # common size and run the suffix once — valid convolution keeps
        # every in-range output untouched by the padding
        n, c, z = pooled[0].shape[:3]
        my = max(p.shape[3] for p in pooled)
        mx = max(p.shape[4] for p in pooled)
        batch = np.zeros((4 * n, c, z, my, mx), dtype=x.dtype)
        for pi, p in enumerate(pooled):
            batch[pi * n : (pi + 1) * n, :, :, : p.shape[3], : p.shape[4]] = p
        y = batch
        for layer in suffix:
            y = layer.forward(y, train=False)
        for pi, (qy, qx) in enumerate(phases):
            vy = pooled[pi].shape[3] - red_y
            vx = pooled[pi].shape[4] - red_x
            for bi, (key, _) in enumerate(items):
                rows = y[pi * n + bi * nc : pi * n + (bi + 1) * nc]
                maps[key + (qy, qx)] = rows[:, :, :, :vy, :vx]
    return maps


_FC_GRID = 6  # per-crop conv output is 6x6x3 by the asserted shape law


def _variant_probs(net: Stage2Net, case, voxels, feats_z, stats, padded):
    """Per-variant probabilities for a batch of candidate voxels.

    ``feats_z`` is (n_cand, n_features) of normalized location features;
    returns ``(p, p0)`` arrays of shape (n_cand, N_VARIANTS), where ``p0``
    has the location features zeroed."""
    mean = np.asarray(stats["mean"], np.float32).reshape(2, 1, 1, 1)
    std = np.asarray(stats["std"], np.float32).reshape(2, 1, 1, 1)
    prefix, pool, suffix = _stream_splits(net)
    nc = len(voxels)
    n_flat = _stream_out_features(net.cfg)
    hs = []
    for si, extent in enumerate(SCALES):
        half = extent // 2
        b = extent // BASE_EXTENT
        side = extent + 2 * CROP_HALF
        windows = np.empty((nc, 2, DEPTH, side, side), np.float32)
        for ci, voxel in enumerate(voxels):
            x0, y0, z0 = (int(c) for c in voxel)
            cy, cx = y0 + _PAD_XY, x0 + _PAD_XY
            slab = padded[z0 : z0 + DEPTH]  # z already offset by _PAD_Z
            window = slab[
                :, :, cy - half - CROP_HALF : cy - half - CROP_HALF + side,
                cx - half - CROP_HALF : cx - half - CROP_HALF + side,
            ]
            windows[ci] = (window.transpose(1, 0, 2, 3) - mean) / std
        maps = _dense_conv_maps(prefix, pool, suffix, windows, b)
        flat = np.empty((nc, N_VARIANTS, n_flat), np.float32)
        for vi, ((dy, dx), flip) in enumerate(_VARIANTS):
            sy = dy + CROP_HALF
            sx = (-dx if flip else dx) + CROP_HALF
            py, ky = sy % b, sy // b
            px, kx = sx % b, sx // b
            m = maps[(flip, py, px, ky % 2, kx % 2)]
            uy, ux = ky // 2, kx // 2
            flat[:, vi] = m[:, :, :, uy : uy + _FC_GRID, ux : ux + _FC_GRID].reshape(
                nc, -1
            )
        hs.append(
            net.fc_streams[si].forward(
                flat.reshape(nc * N_VARIANTS, n_flat), train=False
            )
        )
    fused = np.concatenate(hs, axis=1)
    feats = np.repeat(np.asarray(feats_z, np.float32), N_VARIANTS, axis=0)
    p = softmax(net.head_logits(fused, feats, train=False))[:, 1]
    p0 = softmax(net.head_logits(fused, np.zeros_like(feats), train=False))[:, 1]
    return p.reshape(nc, N_VARIANTS), p0.reshape(nc, N_VARIANTS)


def _variant_scores(net: Stage2Net, case, voxel, feats_z, stats, padded) -> CandidateScores:
    p, p0 = _variant_probs(net, case, [voxel], feats_z.reshape(1, -1), stats, padded)
    return CandidateScores(
        p2=float(p[0].mean()),
        p2_center=float(p[0, _CENTER_INDEX]),
        p2_ablate=float(p0[0].mean()),
    )


def candidate_variant_scores(
    bundle: ModelBundle, case: CaseRecord, candidate: Candidate
) -> np.ndarray:
    """All N_VARIANTS per-variant probabilities for one candidate; their
    mean is the TTA score and entry _CENTER_INDEX is the no-TTA score."""
    net = _cached_stage2_net(bundle)
    f = location_features(case, candidate.voxel).as_array()
    feats_z = (f - np.asarray(bundle.stats["feat_mean"], np.float32)) / np.asarray(
        bundle.stats["feat_std"], np.float32
    )
    p, _ = _variant_probs(
        net,
        case,
        [candidate.voxel],
        feats_z.reshape(1, -1),
        bundle.stats,
        multiscale_padded(case),
    )
    return p[0]


def score_candidate(
    bundle: ModelBundle, case: CaseRecord, candidate: Candidate, tta: bool = True
) -> float:
    net = _cached_stage2_net(bundle)
    s = _score_one(net, bundle.stats, case, candidate, multiscale_padded(case))
    return s.p2 if tta else s.p2_center


def _score_one(net, stats, case, candidate, padded) -> CandidateScores:
    f = location_features(case, candidate.voxel).as_array()
    feats_z = (f - np.asarray(stats["feat_mean"], np.float32)) / np.asarray(
        stats["feat_std"], np.float32
    )
    return _variant_scores(net, case, candidate.voxel, feats_z, stats, padded)


_SCORE_CHUNK = 12  # candidates scored per batched forward (memory bound)


def score_all(
    bundle: ModelBundle,
    cases: list[CaseRecord],
    candidates: list[Candidate],
    progress=None,
) -> tuple[list[Candidate], list[CandidateScores]]:
    """Attach the TTA stage-2 score to every candidate, order preserved.
    Also returns the full per-candidate score breakdown (center-only and
    location-features-ablated scores come for free from the shared stream
    features). Candidates of one case are scored in fixed-size batches."""
    net = _cached_stage2_net(bundle)
    case_map = {c.case_id: c for c in cases}
    feat_mean = np.asarray(bundle.stats["feat_mean"], np.float32)
    feat_std = np.asarray(bundle.stats["feat_std"], np.float32)
    scored = []
    details = []
    i = 0
    while i < len(candidates):
        case_id = candidates[i].case_id
        if case_id not in case_map:
            raise KeyError(f"missing case volumes for {case_id}")
        j = i
        while j < len(candidates) and candidates[j].case_id == case_id:
            j += 1
        case = case_map[case_id]
        padded = multiscale_padded(case)
        for k in range(i, j, _SCORE_CHUNK):
            chunk = candidates[k : min(j, k + _SCORE_CHUNK)]
            feats_z = np.stack(
                [
                    (location_features(case, c.voxel).as_array() - feat_mean)
                    / feat_std
                    for c in chunk
                ]
            )
            p, p0 = _variant_probs(
                net, case, [c.voxel for c in chunk], feats_z, bundle.stats, padded
            )
            for ci, cand in enumerate(chunk):
                s = CandidateScores(
                    p2=float(p[ci].mean()),
                    p2_center=float(p[ci, _CENTER_INDEX]),
                    p2_ablate=float(p0[ci].mean()),
                )
                scored.append(
                    Candidate(cand.case_id, cand.voxel, cand.xyz_mm, cand.p1, p2=s.p2)
                )
                details.append(s)
                if progress is not None:
                    progress(len(scored), len(candidates))
        i = j
    return scored, details
