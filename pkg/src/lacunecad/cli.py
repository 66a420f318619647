"""Command-line pipeline: phantom cohorts, two training stages, detection,
FROC evaluation, comparison, and the review server.

Every command reads one JSON configuration (overridable with repeated
``--set dotted.key=value`` flags), writes its outputs plus a run manifest
(inputs, config hash, seed, wall time), and takes a lock on the output
directory so concurrent runs cannot interleave writes.

Exit codes: 0 success, 2 configuration error, 3 missing input artifact,
4 runtime failure.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np

from . import froc as froc_mod
from . import phantom as phantom_mod
from . import stage1 as stage1_mod
from . import stage2 as stage2_mod
from .froc import FrocConfig
from .nn import ModelBundle, TrainConfig
from .phantom import PhantomConfig
from .stage1 import Stage1Config
from .stage2 import Stage2Config
from .volume import Mark, MarkSet

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_RUNTIME = 4


class ConfigError(Exception):
    """Invalid run configuration; message lists every failure found."""


class MissingArtifact(Exception):
    pass


# --- run configuration ----------------------------------------------------------


@dataclass
class RunConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    train1: TrainConfig = field(default_factory=lambda: TrainConfig(
        batch_size=128, lr=1e-3, l2_lambda=1e-4, lr_decay_factor=2.0, max_epochs=10))
    train2: TrainConfig = field(default_factory=lambda: TrainConfig(
        batch_size=128, lr=5e-4, l2_lambda=2e-5, lr_decay_factor=2.0, max_epochs=40))
    froc: FrocConfig = field(default_factory=FrocConfig)
    seed: int = 0
    n_cases: int = 10

    _SECTIONS = {
        "phantom": PhantomConfig,
        "stage1": Stage1Config,
        "stage2": Stage2Config,
        "train1": TrainConfig,
        "train2": TrainConfig,
        "froc": FrocConfig,
    }

    def to_json(self) -> dict:
        from dataclasses import asdict

        return {
            "phantom": self.phantom.to_json(),
            "stage1": self.stage1.to_json(),
            "stage2": self.stage2.to_json(),
            "train1": asdict(self.train1),
            "train2": asdict(self.train2),
            "froc": asdict(self.froc),
            "seed": self.seed,
            "n_cases": self.n_cases,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        errors = []
        kwargs = {}
        known = set(cls._SECTIONS) | {"seed", "n_cases"}
        for key in doc:
            if key not in known:
                errors.append(f"unknown config section {key!r}")
        for name, typ in cls._SECTIONS.items():
            sub = doc.get(name, {})
            try:
                if hasattr(typ, "from_json"):
                    kwargs[name] = typ.from_json(sub)
                else:
                    kwargs[name] = typ(**sub)
            except Exception as e:  # collect every section's failure
                errors.append(f"{name}: {e}")
        for key in ("seed", "n_cases"):
            if key in doc:
                v = doc[key]
                if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                    errors.append(f"{key} must be a non-negative integer, got {v!r}")
                else:
                    kwargs[key] = v
        if errors:
            raise ConfigError("; ".join(errors))
        return cls(**kwargs)

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _apply_overrides(doc: dict, pairs) -> dict:
    errors = []
    for pair in pairs:
        if "=" not in pair:
            errors.append(f"--set expects key=value, got {pair!r}")
            continue
        key, _, raw = pair.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                errors.append(f"--set {key}: {p} is not a section")
                break
        else:
            node[parts[-1]] = value
    if errors:
        raise ConfigError("; ".join(errors))
    return doc


def load_run_config(config_path, seed, overrides) -> RunConfig:
    doc = {}
    if config_path is not None:
        p = Path(config_path)
        if not p.exists():
            raise MissingArtifact(f"config file not found: {p}")
        doc = json.loads(p.read_text())
    doc = _apply_overrides(doc, overrides or ())
    if seed is not None:
        doc["seed"] = seed
        doc.setdefault("phantom", {})["seed"] = seed
        doc.setdefault("train1", {})["seed"] = seed
        doc.setdefault("train2", {})["seed"] = seed
        doc.setdefault("froc", {})["seed"] = seed
    return RunConfig.from_json(doc)


# --- run plumbing ----------------------------------------------------------------


class WorkdirLock:
    def __init__(self, directory: Path):
        self.path = Path(directory) / ".lacunecad.lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        for attempt in range(2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                break
            except FileExistsError:
                if attempt == 0 and self._is_stale():
                    self.path.unlink(missing_ok=True)
                    continue
                raise RuntimeError(
                    f"output directory is locked by another run: {self.path}"
                ) from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def _is_stale(self) -> bool:
        """True when the lock's owning process is no longer alive."""
        try:
            pid = int(self.path.read_text().strip())
        except (OSError, ValueError):
            return True
        try:
            os.kill(pid, 0)
        except ProcessLookupError:
            return True
        except PermissionError:
            return False
        return False

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def write_manifest(out_dir: Path, command: str, cfg: RunConfig, inputs: dict,
                   outputs: list, started: float) -> None:
    doc = {
        "command": command,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": [str(o) for o in outputs],
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "timing": {
            "started_unix": started,
            "wall_time_s": time.time() - started,
        },
    }
    path = Path(out_dir) / f"run_{command}.json"
    path.write_text(json.dumps(doc, sort_keys=True, indent=2))


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists() and not (p.suffix == "" and p.with_suffix(".json").exists()):
        raise MissingArtifact(f"missing {what}: {p}")
    return p


def run_command(fn):
    """Shared error-to-exit-code mapping for all commands."""

    def wrapper(*args, **kwargs):
        try:
            fn(*args, **kwargs)
        except ConfigError as e:
            click.echo(f"config error: {e}", err=True)
            sys.exit(EXIT_CONFIG)
        except MissingArtifact as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(EXIT_MISSING)
        except Exception as e:
            click.echo(f"runtime failure: {e}", err=True)
            sys.exit(EXIT_RUNTIME)
        sys.exit(EXIT_OK)

    return wrapper


def _common(fn):
    fn = click.option("--config", "config_path", default=None,
                      help="JSON run configuration")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="global seed override")(fn)
    fn = click.option("--set", "overrides", multiple=True,
                      help="dotted-key config override, e.g. --set froc.seed=3")(fn)
    return fn


# --- pipeline helpers ---------------------------------------------------------------


def _load_split_cases(cohort, split):
    manifest = phantom_mod.load_manifest(_need(Path(cohort) / "manifest.json",
                                               "cohort manifest").parent)
    entries = phantom_mod.cases_for_split(manifest, split)
    return manifest, [phantom_mod.load_case(cohort, e) for e in entries]


def _detect_case(case, fcn_bundle, s1cfg):
    lmap = stage1_mod.dense_predict(fcn_bundle, case)
    return stage1_mod.extract_candidates(lmap, case, s1cfg)


def detect_cases(cases, stage1_bundle, stage2_bundle, s1cfg, out_dir=None,
                 log=lambda msg: None):
    """Dense predict + candidate extraction + stage-2 scoring, resumable per
    case via per-case cache files under out_dir/cases/."""
    fcn = stage1_mod.convert_to_fcn(stage1_bundle)
    scored_all = []
    details_all = []
    cache_dir = Path(out_dir) / "cases" if out_dir is not None else None
    if cache_dir is not None:
        cache_dir.mkdir(parents=True, exist_ok=True)
    for case in cases:
        cache = cache_dir / f"{case.case_id}.json" if cache_dir is not None else None
        if cache is not None and cache.exists():
            data = json.loads(cache.read_text())
            scored_all += [stage1_mod.Candidate.from_json(d) for d in data["candidates"]]
            details_all += [stage2_mod.CandidateScores(**s) for s in data["scores"]]
            log(f"{case.case_id}: cached")
            continue
        cands = _detect_case(case, fcn, s1cfg)
        scored, details = stage2_mod.score_all(stage2_bundle, [case], cands)
        if cache is not None:
            cache.write_text(json.dumps({
                "candidates": [c.to_json() for c in scored],
                "scores": [dataclasses.asdict(s) for s in details],
            }, sort_keys=True))
        scored_all += scored
        details_all += details
        log(f"{case.case_id}: {len(cands)} candidates")
    return scored_all, details_all


def candidates_to_markset(cands, source="cad", score_field="p2") -> MarkSet:
    marks = [
        Mark(c.case_id, c.xyz_mm, getattr(c, score_field))
        for c in cands
    ]
    return MarkSet(source, marks)


def slice_counts_of(manifest, split) -> dict[str, int]:
    return {
        e["id"]: e["n_slices"] for e in phantom_mod.cases_for_split(manifest, split)
    }


# --- commands -----------------------------------------------------------------------


@click.group()
def main():
    """Lacune computer-aided detection pipeline."""


@main.command("phantom")
@_common
@click.option("--out", required=True, help="cohort output directory")
@click.option("-n", "n_cases", type=int, default=None, help="number of cases")
@click.option("--ratios", default="0.6,0.2,0.2", show_default=True,
              help="train,val,test split fractions")
@run_command
def cmd_phantom(config_path, seed, overrides, out, n_cases, ratios):
    cfg = load_run_config(config_path, seed, overrides)
    n = n_cases if n_cases is not None else cfg.n_cases
    try:
        parts = tuple(float(r) for r in ratios.split(","))
        if len(parts) != 3 or any(r < 0 for r in parts) or sum(parts) > 1.0 + 1e-9:
            raise ValueError
    except ValueError:
        raise ConfigError(f"--ratios expects three fractions summing to <= 1, got {ratios!r}")
    started = time.time()
    with WorkdirLock(Path(out)):
        phantom_mod.generate_cohort(cfg.phantom, n, out, ratios=parts)
        write_manifest(Path(out), "phantom", cfg, {"config": config_path or "<default>"},
                       [Path(out) / "manifest.json"], started)
    click.echo(f"wrote {n} cases to {out}")


@main.command("train1")
@_common
@click.option("--cohort", required=True)
@click.option("--out", required=True, help="model bundle base path")
@run_command
def cmd_train1(config_path, seed, overrides, cohort, out):
    cfg = load_run_config(config_path, seed, overrides)
    started = time.time()
    manifest, train_cases = _load_split_cases(cohort, "train")
    _, val_cases = _load_split_cases(cohort, "val")
    out_base = Path(out)
    with WorkdirLock(out_base.parent):
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(10,)))
        X, y, stats, info = stage1_mod.sample_stage1(train_cases, cfg.stage1, rng)
        val = None
        if val_cases and any((c.lacune_mask.values > 0.5).any() for c in val_cases):
            Xv, yv, _, _ = stage1_mod.sample_stage1(
                val_cases, cfg.stage1, rng, stats=stats)
            val = (Xv, yv)
        bundle, history = stage1_mod.train_stage1(
            X, y, stats, cfg.stage1, cfg.train1, val=val)
        bundle.meta["sampling"] = info
        bundle.save(out_base)
        write_manifest(out_base.parent, "train1", cfg, {"cohort": cohort},
                       [out_base.with_suffix(".json")], started)
    click.echo(f"stage-1 model -> {out_base}.json ({len(history)} epochs)")


@main.command("train2")
@_common
@click.option("--cohort", required=True)
@click.option("--stage1", "stage1_path", required=True, help="stage-1 model base path")
@click.option("--out", required=True, help="model bundle base path")
@click.option("--mining-cases", type=int, default=None,
              help="mine training candidates from only the first N train cases")
@run_command
def cmd_train2(config_path, seed, overrides, cohort, stage1_path, out, mining_cases):
    cfg = load_run_config(config_path, seed, overrides)
    started = time.time()
    s1 = ModelBundle.load(_need(Path(stage1_path).with_suffix(".json"),
                                "stage-1 model").with_suffix(""))
    fcn = stage1_mod.convert_to_fcn(s1)
    out_base = Path(out)
    with WorkdirLock(out_base.parent):
        datasets = {}
        for split in ("train", "val"):
            _, cases = _load_split_cases(cohort, split)
            if split == "train" and mining_cases is not None:
                cases = cases[:mining_cases]
            cands = []
            for case in cases:
                cands += _detect_case(case, fcn, cfg.stage1)
                click.echo(f"{case.case_id}: candidates extracted")
            if not cases:
                datasets[split] = None
                continue
            rng = np.random.default_rng(
                np.random.SeedSequence(cfg.seed, spawn_key=(20, 0 if split == "train" else 1)))
            try:
                datasets[split] = stage2_mod.sample_stage2(cases, cands, cfg.stage2, rng)
            except ValueError:
                if split == "train":
                    raise
                datasets[split] = None
        bundle, history = stage2_mod.train_stage2(
            datasets["train"], cfg.stage2, cfg.train2, val_ds=datasets.get("val"))
        bundle.save(out_base)
        write_manifest(out_base.parent, "train2", cfg,
                       {"cohort": cohort, "stage1": stage1_path,
                        "mining_cases": mining_cases},
                       [out_base.with_suffix(".json")], started)
    click.echo(f"stage-2 model -> {out_base}.json ({len(history)} epochs)")


@main.command("detect")
@_common
@click.option("--cohort", required=True)
@click.option("--split", default="test", type=click.Choice(["train", "val", "test"]))
@click.option("--stage1", "stage1_path", required=True)
@click.option("--stage2", "stage2_path", required=True)
@click.option("--out", required=True, help="output directory")
@run_command
def cmd_detect(config_path, seed, overrides, cohort, split, stage1_path,
               stage2_path, out):
    cfg = load_run_config(config_path, seed, overrides)
    started = time.time()
    s1 = ModelBundle.load(_need(Path(stage1_path).with_suffix(".json"),
                                "stage-1 model").with_suffix(""))
    s2 = ModelBundle.load(_need(Path(stage2_path).with_suffix(".json"),
                                "stage-2 model").with_suffix(""))
    manifest, cases = _load_split_cases(cohort, split)
    out_dir = Path(out)
    with WorkdirLock(out_dir):
        scored, details = detect_cases(cases, s1, s2, cfg.stage1, out_dir=out_dir,
                                       log=lambda m: click.echo(m))
        stage1_mod.save_candidates(scored, out_dir / "candidates.json")
        candidates_to_markset(scored).save(out_dir / "detections.json")
        rows = [
            dict(c.to_json(), **dataclasses.asdict(s))
            for c, s in zip(scored, details)
        ]
        (out_dir / "scores.json").write_text(json.dumps(rows, sort_keys=True))
        write_manifest(out_dir, "detect", cfg,
                       {"cohort": cohort, "stage1": stage1_path,
                        "stage2": stage2_path, "split": split},
                       [out_dir / "candidates.json", out_dir / "detections.json",
                        out_dir / "scores.json"],
                       started)
    click.echo(f"{len(scored)} scored candidates -> {out_dir}")


@main.command("eval")
@_common
@click.option("--detections", "detections_path", required=True,
              help="scored detection MarkSet JSON")
@click.option("--cohort", required=True)
@click.option("--split", default="test", type=click.Choice(["train", "val", "test"]))
@click.option("--quorum", type=int, default=1)
@click.option("--out", required=True, help="output directory")
@run_command
def cmd_eval(config_path, seed, overrides, detections_path, cohort, split,
             quorum, out):
    cfg = load_run_config(config_path, seed, overrides)
    started = time.time()
    dets = MarkSet.load(_need(detections_path, "detections file"))
    reference = MarkSet.load(
        _need(Path(cohort) / "reference_marks.json", "reference marks"))
    manifest = phantom_mod.load_manifest(cohort)
    counts = slice_counts_of(manifest, split)
    reference = fused_reference([reference], quorum, cfg.froc.hit_radius_mm, counts)
    out_dir = Path(out)
    with WorkdirLock(out_dir):
        curve = froc_mod.bootstrap_band(dets, reference, counts, cfg.froc)
        curve.save_csv(out_dir / "froc.csv")
        op = froc_mod.operating_point(curve)
        summary = {
            "score": froc_mod.score(curve, cfg.froc),
            "n_marks": curve.n_marks,
            "n_slices": curve.n_slices,
            "operating_point": None if op is None else
                {"threshold": op[0], "sensitivity": op[1], "fp_per_slice": op[2]},
        }
        (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True,
                                                         indent=2))
        write_manifest(out_dir, "eval", cfg,
                       {"detections": detections_path, "cohort": cohort,
                        "split": split, "quorum": quorum},
                       [out_dir / "froc.csv", out_dir / "summary.json"], started)
    click.echo(f"score {summary['score']:.4f} -> {out_dir}/froc.csv")


def fused_reference(mark_sets, quorum, hit_radius_mm, counts):
    fused = froc_mod.fuse_majority(mark_sets, quorum, hit_radius_mm)
    fused.marks = [m for m in fused.marks if m.case_id in counts]
    return fused


@main.command("compare")
@_common
@click.option("--a", "a_path", required=True, help="detections A (MarkSet JSON)")
@click.option("--b", "b_path", required=True, help="detections B (MarkSet JSON)")
@click.option("--cohort", required=True)
@click.option("--split", default="test", type=click.Choice(["train", "val", "test"]))
@click.option("--out", required=True, help="report JSON path")
@run_command
def cmd_compare(config_path, seed, overrides, a_path, b_path, cohort, split, out):
    cfg = load_run_config(config_path, seed, overrides)
    started = time.time()
    a = MarkSet.load(_need(a_path, "detections A"))
    b = MarkSet.load(_need(b_path, "detections B"))
    reference = MarkSet.load(
        _need(Path(cohort) / "reference_marks.json", "reference marks"))
    manifest = phantom_mod.load_manifest(cohort)
    counts = slice_counts_of(manifest, split)
    reference.marks = [m for m in reference.marks if m.case_id in counts]
    a.marks = [m for m in a.marks if m.case_id in counts]
    b.marks = [m for m in b.marks if m.case_id in counts]
    out_path = Path(out)
    with WorkdirLock(out_path.parent):
        report = froc_mod.comparison_report(a, b, reference, counts, cfg.froc)
        froc_mod.save_report(report, out_path)
        write_manifest(out_path.parent, "compare", cfg,
                       {"a": a_path, "b": b_path, "cohort": cohort},
                       [out_path], started)
    click.echo(
        f"A={report['scores']['A']:.4f} B={report['scores']['B']:.4f} "
        f"p={report['p_value']:.4f}"
    )


@main.command("serve")
@_common
@click.option("--cohort", required=True)
@click.option("--detections", "detections_path", required=True,
              help="scored candidates JSON from detect")
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
@run_command
def cmd_serve(config_path, seed, overrides, cohort, detections_path, host, port):
    import uvicorn

    from .server import create_app

    cfg = load_run_config(config_path, seed, overrides)
    app = create_app(cohort, _need(detections_path, "detections file"), cfg)
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
