"""Run manifests: config echo, seeds, versions, artifact digests, timings."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from hashlib import sha256
from pathlib import Path

import numpy as np
import scipy
import sklearn

from . import __version__

__all__ = ["sha256_file", "RunManifest", "StageTimer"]


def sha256_file(path) -> str:
    h = sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict = field(default_factory=dict)  # name -> {path, sha256}
    outputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)  # stage -> seconds
    notes: dict = field(default_factory=dict)

    def add_input(self, name: str, path):
        self.inputs[name] = {"path": str(path), "sha256": sha256_file(path)}

    def add_output(self, name: str, path):
        self.outputs[name] = {"path": str(path), "sha256": sha256_file(path)}

    def write(self, path) -> None:
        doc = {
            "command": self.command,
            "versions": {
                "geowarp": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "scikit-learn": sklearn.__version__,
            },
            "seed": self.seed,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "timings_seconds": self.timings,
            "notes": self.notes,
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")


class StageTimer:
    """Records wall-clock per named stage into a manifest."""

    def __init__(self, manifest: RunManifest):
        self.manifest = manifest
        self._stage = None
        self._start = 0.0

    def __call__(self, stage: str):
        self._stage = stage
        return self

    def __enter__(self):
        self._start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.manifest.timings[self._stage] = round(time.perf_counter() - self._start, 3)
        return False
