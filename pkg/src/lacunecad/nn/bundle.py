"""Model serialization: JSON architecture descriptor + raw weight blob."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_TAG = "lacunecad-model/1"


@dataclass
class ModelBundle:
    arch: dict
    state: dict[str, np.ndarray]
    stats: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def save(self, path) -> None:
        base = Path(path)
        if base.suffix in (".json", ".bin"):
            base = base.with_suffix("")
        manifest = []
        offset = 0
        blobs = []
        for name in sorted(self.state):
            arr = np.ascontiguousarray(self.state[name], dtype="<f4")
            manifest.append(
                {"name": name, "shape": list(arr.shape), "offset": offset}
            )
            blobs.append(arr.tobytes())
            offset += arr.nbytes
        doc = {
            "format": FORMAT_TAG,
            "arch": self.arch,
            "stats": self.stats,
            "meta": self.meta,
            "manifest": manifest,
        }
        base.with_suffix(".json").write_text(json.dumps(doc, sort_keys=True))
        base.with_suffix(".bin").write_bytes(b"".join(blobs))

    @classmethod
    def load(cls, path) -> "ModelBundle":
        base = Path(path)
        if base.suffix in (".json", ".bin"):
            base = base.with_suffix("")
        jpath = base.with_suffix(".json")
        if not jpath.exists():
            raise FileNotFoundError(f"missing model file {jpath}")
        doc = json.loads(jpath.read_text())
        if doc.get("format") != FORMAT_TAG:
            raise ValueError(f"unsupported model format {doc.get('format')!r}")
        blob = base.with_suffix(".bin").read_bytes()
        state = {}
        for entry in doc["manifest"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            start = entry["offset"]
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=start)
            state[entry["name"]] = arr.reshape(shape).copy()
        return cls(arch=doc["arch"], state=state, stats=doc["stats"], meta=doc["meta"])
