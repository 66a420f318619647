"""Candidate detection stage.

A seven-layer 2D CNN classifies 51x51 two-channel (FLAIR, T1) patches; the
trained fully connected layers are rewritten as convolutions so whole slices
can be scored densely, and the stride lost to the single 2x2 pooling is
recovered by running the network at the four input shifts and interleaving
the outputs. Candidates are thresholded local maxima of the stitched
likelihood map.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from .nn import ModelBundle, Sequential, TrainConfig, train
from .nn.train import ArrayDataset
from .volume import CaseRecord, Volume3D

PATCH = 51
MARGIN = PATCH // 2  # 25


@dataclass
class Stage1Config:
    patch_size: int = PATCH
    channels: int = 2
    conv_filters: tuple = (20, 40, 80, 110)
    conv_kernels: tuple = ((7, 7), (5, 5), (3, 3), (3, 3))
    pool_size: tuple = (2, 2)
    pool_stride: int = 2
    fc_sizes: tuple = (300, 200, 2)
    dropout: float = 0.3
    l2_lambda: float = 1e-4
    batch_size: int = 128
    neg_pos_ratio: int = 2
    maxima_window: int = 10
    cand_threshold: float = 0.1

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        for k in ("conv_filters", "fc_sizes", "pool_size"):
            if k in d:
                d[k] = tuple(d[k])
        if "conv_kernels" in d:
            d["conv_kernels"] = tuple(tuple(k) for k in d["conv_kernels"])
        return cls(**d)


def _patch_net_specs(cfg: Stage1Config) -> list[dict]:
    specs = []
    c = cfg.channels
    size = cfg.patch_size
    for i, (f, k) in enumerate(zip(cfg.conv_filters, cfg.conv_kernels)):
        specs.append({"kind": "conv2d", "in_channels": c, "filters": f, "kernel": list(k)})
        specs.append({"kind": "batchnorm", "num_features": f})
        specs.append({"kind": "relu"})
        size -= k[0] - 1
        if i == 0:  # single pooling layer, after the first convolution
            specs.append(
                {"kind": "maxpool2d", "size": list(cfg.pool_size), "stride": [cfg.pool_stride] * 2}
            )
            size = (size - cfg.pool_size[0]) // cfg.pool_stride + 1
        c = f
    specs.append({"kind": "flatten"})
    in_features = c * size * size
    for i, width in enumerate(cfg.fc_sizes):
        specs.append({"kind": "dense", "in_features": in_features, "out_features": width})
        if i < len(cfg.fc_sizes) - 1:
            specs.append({"kind": "batchnorm", "num_features": width})
            specs.append({"kind": "relu"})
            specs.append({"kind": "dropout", "rate": cfg.dropout})
        in_features = width
    specs.append({"kind": "softmax"})
    return specs


def assert_stage1_architecture(specs: list[dict], cfg: Stage1Config | None = None):
    """Structural constants of the candidate-detection network."""
    cfg = cfg or Stage1Config()
    convs = [s for s in specs if s["kind"] == "conv2d"]
    pools = [s for s in specs if s["kind"] == "maxpool2d"]
    denses = [s for s in specs if s["kind"] == "dense"]
    assert tuple(s["filters"] for s in convs) == cfg.conv_filters
    assert tuple(tuple(s["kernel"]) for s in convs) == cfg.conv_kernels
    assert len(pools) == 1, "exactly one pooling layer"
    assert tuple(pools[0]["size"]) == cfg.pool_size
    assert tuple(pools[0]["stride"]) == (cfg.pool_stride,) * 2
    assert tuple(s["out_features"] for s in denses) == cfg.fc_sizes
    assert denses[-1]["out_features"] == 2
    # the pool follows the first conv block
    first_pool = specs.index(pools[0])
    second_conv = specs.index(convs[1])
    assert first_pool < second_conv


def build_stage1_net(cfg: Stage1Config, rng, dtype=np.float32) -> Sequential:
    specs = _patch_net_specs(cfg)
    assert_stage1_architecture(specs, cfg)
    return Sequential.from_specs(specs, rng=rng, dtype=dtype)


# --- patch sampling ---------------------------------------------------------


def _padded_slices(case: CaseRecord, stats=None) -> np.ndarray:
    """(nz, 2, H+2*MARGIN, W+2*MARGIN) mirror-padded FLAIR+T1 slices."""
    stack = np.stack([case.flair.values, case.t1.values], axis=1)  # (nz, 2, H, W)
    if stats is not None:
        mean = np.asarray(stats["mean"], dtype=np.float32).reshape(1, 2, 1, 1)
        std = np.asarray(stats["std"], dtype=np.float32).reshape(1, 2, 1, 1)
        stack = (stack - mean) / std
    return np.pad(
        stack.astype(np.float32),
        ((0, 0), (0, 0), (MARGIN, MARGIN), (MARGIN, MARGIN)),
        mode="symmetric",
    )


def _extract_patches(padded, coords):
    """coords: array of (x, y, z); returns (n, 2, PATCH, PATCH)."""
    out = np.empty((len(coords), padded.shape[1], PATCH, PATCH), dtype=np.float32)
    for i, (x, y, z) in enumerate(coords):
        out[i] = padded[z, :, y : y + PATCH, x : x + PATCH]
    return out


def sample_stage1(cases: list[CaseRecord], cfg: Stage1Config, rng, stats=None):
    """Patch dataset: every lacune voxel (plus horizontal flip) as positives,
    neg_pos_ratio x the pre-flip positive count of random brain voxels as
    negatives. Returns (patches, labels, stats, info).

    When ``stats`` is given (a held-out set normalized with the training
    statistics) it is used as-is instead of being computed."""
    pos_patches = []
    neg_pools = []  # (case_idx, xs, ys, zs)
    padded_cache = {}
    n_pos = 0
    for ci, case in enumerate(cases):
        padded = _padded_slices(case)
        padded_cache[ci] = padded
        lac = case.lacune_mask.values > 0.5
        zz, yy, xx = np.nonzero(lac)
        if len(xx):
            coords = np.stack([xx, yy, zz], axis=1)
            pos_patches.append(_extract_patches(padded, coords))
            n_pos += len(coords)
        brain = (case.brain_mask.values > 0.5) & ~lac
        bz, by, bx = np.nonzero(brain)
        neg_pools.append((ci, bx, by, bz))
    if n_pos == 0:
        raise ValueError("no positive voxels in the cohort")
    n_neg = cfg.neg_pos_ratio * n_pos
    pool_sizes = np.array([len(p[1]) for p in neg_pools])
    total = int(pool_sizes.sum())
    pick = rng.choice(total, size=min(n_neg, total), replace=False)
    pick.sort()
    neg_patches = []
    offsets = np.concatenate([[0], np.cumsum(pool_sizes)])
    for (ci, bx, by, bz), lo, hi in zip(neg_pools, offsets[:-1], offsets[1:]):
        sel = pick[(pick >= lo) & (pick < hi)] - lo
        if len(sel):
            coords = np.stack([bx[sel], by[sel], bz[sel]], axis=1)
            neg_patches.append(_extract_patches(padded_cache[ci], coords))
    pos = np.concatenate(pos_patches) if pos_patches else np.empty((0, 2, PATCH, PATCH))
    pos = np.concatenate([pos, pos[:, :, :, ::-1]])  # horizontal flip augmentation
    neg = np.concatenate(neg_patches)
    patches = np.concatenate([pos, neg]).astype(np.float32)
    labels = np.concatenate([np.ones(len(pos), int), np.zeros(len(neg), int)])
    if stats is None:
        mean = patches.mean(axis=(0, 2, 3))
        std = patches.std(axis=(0, 2, 3))
        std[std == 0] = 1.0
        stats = {"mean": mean.tolist(), "std": std.tolist()}
    patches -= np.asarray(stats["mean"], np.float32).reshape(1, 2, 1, 1)
    patches /= np.asarray(stats["std"], np.float32).reshape(1, 2, 1, 1)
    info = {
        "n_pos_voxels": n_pos,
        "n_pos_patches": len(pos),
        "n_neg_patches": len(neg),
        "neg_pos_ratio": cfg.neg_pos_ratio,
    }
    return patches, labels, stats, info


def normalize_with(patches, stats):
    mean = np.asarray(stats["mean"], dtype=np.float32).reshape(1, 2, 1, 1)
    std = np.asarray(stats["std"], dtype=np.float32).reshape(1, 2, 1, 1)
    return (patches - mean) / std


def train_stage1(
    patches,
    labels,
    stats: dict,
    cfg: Stage1Config,
    train_cfg: TrainConfig,
    val=None,
) -> tuple[ModelBundle, list]:
    rng = np.random.default_rng(np.random.SeedSequence(train_cfg.seed, spawn_key=(1,)))
    net = build_stage1_net(cfg, rng)
    ds = ArrayDataset(patches, labels)
    val_ds = ArrayDataset(*val) if val is not None else None
    history, _ = train(net, ds, train_cfg, val_data=val_ds)
    bundle = ModelBundle(
        arch={"type": "stage1-patch", "layers": net.specs()},
        state=net.state_dict(),
        stats=stats,
        meta={"config": cfg.to_json(), "history": history},
    )
    return bundle, history


def load_stage1_net(bundle: ModelBundle) -> Sequential:
    net = Sequential.from_specs(bundle.arch["layers"])
    net.load_state_dict(bundle.state)
    return net


# --- fully convolutional conversion -----------------------------------------


def convert_to_fcn(bundle: ModelBundle) -> ModelBundle:
    """Rewrite trained dense layers as convolutions; weights reshaped only."""
    if bundle.arch.get("type") != "stage1-patch":
        raise ValueError(f"not a stage-1 patch bundle: {bundle.arch.get('type')}")
    specs = bundle.arch["layers"]
    state = bundle.state
    new_specs = []
    new_state = {}
    # spatial size entering the dense stack
    conv_channels = None
    fc_input_side = None
    size = PATCH
    for s in specs:
        if s["kind"] == "conv2d":
            size -= s["kernel"][0] - 1
            conv_channels = s["filters"]
        elif s["kind"] == "maxpool2d":
            size = (size - s["size"][0]) // s["stride"][0] + 1
    fc_input_side = size
    in_channels = conv_channels
    first_dense = True
    for i, s in enumerate(specs):
        prefix = f"{i}."
        if s["kind"] == "flatten":
            continue  # convolution output feeds the conv-rewritten fc directly
        if s["kind"] == "dense":
            k = fc_input_side if first_dense else 1
            new = {
                "kind": "conv2d",
                "in_channels": in_channels,
                "filters": s["out_features"],
                "kernel": [k, k],
            }
            j = len(new_specs)
            W = state[f"{i}.W"]  # (in_features, out_features)
            if first_dense:
                Wc = W.T.reshape(s["out_features"], in_channels, k, k)
                first_dense = False
            else:
                Wc = W.T.reshape(s["out_features"], in_channels, 1, 1)
            new_state[f"{j}.W"] = Wc
            new_state[f"{j}.b"] = state[f"{i}.b"]
            new_specs.append(new)
            in_channels = s["out_features"]
            continue
        j = len(new_specs)
        new_specs.append(dict(s))
        for key in ("W", "b", "gamma", "beta", "running_mean", "running_var"):
            if prefix + key in state:
                new_state[f"{j}.{key}"] = state[prefix + key]
    return ModelBundle(
        arch={"type": "stage1-fcn", "layers": new_specs},
        state=new_state,
        stats=bundle.stats,
        meta=bundle.meta,
    )


def load_fcn_net(bundle: ModelBundle) -> Sequential:
    if bundle.arch.get("type") != "stage1-fcn":
        raise ValueError("not a stage-1 FCN bundle")
    net = Sequential.from_specs(bundle.arch["layers"])
    net.load_state_dict(bundle.state)
    return net


# --- dense prediction (shift-and-stitch) -------------------------------------


@dataclass
class LikelihoodMap:
    volume: Volume3D
    valid: np.ndarray  # boolean (nz, ny, nx)


STRIDE = 2  # output stride of the FCN (one 2x2/2 pooling)


def shift_grids(h: int, w: int) -> list[tuple[int, int, np.ndarray, np.ndarray]]:
    """The four (sy, sx) shift grids and the output rows/cols each covers."""
    grids = []
    for sy in range(STRIDE):
        for sx in range(STRIDE):
            ys = np.arange(sy, h, STRIDE)
            xs = np.arange(sx, w, STRIDE)
            grids.append((sy, sx, ys, xs))
    return grids


def _cached_fcn_net(bundle: ModelBundle) -> Sequential:
    """Per-bundle instantiated net; reuse keeps inference-time layer caches
    (e.g. kernel spectra) warm across cases."""
    net = getattr(bundle, "_fcn_net", None)
    if net is None:
        net = load_fcn_net(bundle)
        bundle._fcn_net = net
    return net


def dense_predict(fcn_bundle: ModelBundle, case: CaseRecord) -> LikelihoodMap:
    net = _cached_fcn_net(fcn_bundle)
    padded = _padded_slices(case, stats=fcn_bundle.stats)
    nz = padded.shape[0]
    h = case.flair.dims[1]
    w = case.flair.dims[0]
    if padded.shape[2] < PATCH or padded.shape[3] < PATCH:
        raise ValueError("slice smaller than the receptive field after padding")
    lik = np.full((nz, h, w), -1.0, dtype=np.float32)
    # Layers before the stride-2 pool see near-identical inputs across the
    # four shifts (crops differing by one pixel), so run them once on the
    # full padding and realize each shift as a pooling phase.
    pool_idx = next(
        i for i, l in enumerate(net.layers) if l.spec()["kind"] == "maxpool2d"
    )
    head = padded
    for layer in net.layers[:pool_idx]:
        head = layer.forward(head, train=False)
    for sy, sx, ys, xs in shift_grids(h, w):
        x = head[:, :, sy:, sx:]
        for layer in net.layers[pool_idx:]:
            x = layer.forward(x, train=False)
        p1 = x[:, 1]  # (nz, oh, ow)
        oh = min(p1.shape[1], len(ys))
        ow = min(p1.shape[2], len(xs))
        lik[np.ix_(range(nz), ys[:oh], xs[:ow])] = p1[:, :oh, :ow]
    if (lik < 0).any():
        raise AssertionError("shift-and-stitch left uncovered output voxels")
    vol = Volume3D(case.flair.dims, case.flair.spacing, lik)
    return LikelihoodMap(volume=vol, valid=case.brain_mask.values > 0.5)


def patch_likelihoods(bundle: ModelBundle, case: CaseRecord, coords) -> np.ndarray:
    """Sliding-window oracle: patch-network likelihood at each (x, y, z)."""
    net = load_stage1_net(bundle)
    padded = _padded_slices(case, stats=bundle.stats)
    out = np.empty(len(coords), dtype=np.float32)
    batch = 512
    coords = np.asarray(coords)
    for i in range(0, len(coords), batch):
        patches = _extract_patches(padded, coords[i : i + batch])
        out[i : i + batch] = net.predict_proba(patches)[:, 1]
    return out


# --- candidate extraction -----------------------------------------------------


@dataclass
class Candidate:
    case_id: str
    voxel: tuple[int, int, int]
    xyz_mm: tuple[float, float, float]
    p1: float
    p2: float | None = None

    def to_json(self):
        d = {
            "case": self.case_id,
            "voxel": list(self.voxel),
            "xyz_mm": [float(c) for c in self.xyz_mm],
            "p1": float(self.p1),
        }
        if self.p2 is not None:
            d["p2"] = float(self.p2)
        return d

    @classmethod
    def from_json(cls, d):
        return cls(
            d["case"], tuple(d["voxel"]), tuple(d["xyz_mm"]), d["p1"], d.get("p2")
        )


def save_candidates(cands: list[Candidate], path):
    Path(path).write_text(json.dumps([c.to_json() for c in cands], sort_keys=True))


def load_candidates(path) -> list[Candidate]:
    return [Candidate.from_json(d) for d in json.loads(Path(path).read_text())]


def extract_candidates(
    lmap: LikelihoodMap, case: CaseRecord, cfg: Stage1Config
) -> list[Candidate]:
    """Per-slice local maxima of a sliding 10x10 window (offsets -5..+4 in
    y and x), ties kept only at the lexicographically smallest (y, x),
    filtered at the likelihood threshold."""
    w = cfg.maxima_window
    lo = w // 2  # window spans [-lo, w - lo - 1]
    values = lmap.volume.values.copy()
    values[~lmap.valid] = -np.inf
    spacing = lmap.volume.spacing
    out = []
    for z in range(values.shape[0]):
        sl = values[z]
        mx = ndimage.maximum_filter(sl, size=(w, w), mode="constant", cval=-np.inf)
        cand_mask = (sl == mx) & (sl >= cfg.cand_threshold) & np.isfinite(sl)
        for y, x in np.argwhere(cand_mask):
            if not _lex_smallest_tie(sl, y, x, w, lo):
                continue
            out.append(
                Candidate(
                    case_id=case.case_id,
                    voxel=(int(x), int(y), int(z)),
                    xyz_mm=(x * spacing[0], y * spacing[1], z * spacing[2]),
                    p1=float(sl[y, x]),
                )
            )
    return out


def _lex_smallest_tie(sl, y, x, w, lo) -> bool:
    y0, y1 = max(0, y - lo), min(sl.shape[0], y + w - lo)
    x0, x1 = max(0, x - lo), min(sl.shape[1], x + w - lo)
    window = sl[y0:y1, x0:x1]
    ties = np.argwhere(window == sl[y, x])
    ty, tx = ties[0]  # argwhere scans rows then cols: first hit is lex-min
    return (y0 + ty, x0 + tx) == (y, x)
