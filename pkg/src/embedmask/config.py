"""Run configuration: JSON round-trip, override merging, stable hashing.

A RunConfig bundles everything a run needs (training settings, scene
spec, dataset/output paths, seeds). It is resolved once, persisted
verbatim next to the outputs, and hashed so checkpoints can refuse to
load under a different configuration.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

from .scenes import SceneSpec
from .training import TrainConfig


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    scenes: SceneSpec = field(default_factory=SceneSpec)
    seed: int = 0
    data_dir: str = ""
    out_dir: str = ""
    train_count: int = 200
    val_count: int = 50

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        train = TrainConfig.from_dict(d.pop("train", {}))
        scenes = SceneSpec.from_dict(d.pop("scenes", {}))
        unknown = set(d) - {"seed", "data_dir", "out_dir", "train_count", "val_count"}
        if unknown:
            raise ValueError(f"unknown RunConfig fields: {sorted(unknown)}")
        return cls(train=train, scenes=scenes, **d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}: invalid JSON: {e}") from e
        try:
            return cls.from_dict(doc)
        except TypeError as e:
            raise ValueError(f"{path}: {e}") from e

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    def apply_overrides(self, overrides: dict) -> "RunConfig":
        """Dotted-path overrides, e.g. {"train.lr": 0.02, "seed": 3}."""
        doc = self.to_dict()
        for key, value in overrides.items():
            parts = key.split(".")
            node = doc
            for p in parts[:-1]:
                if p not in node:
                    raise ValueError(f"unknown config field {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ValueError(f"unknown config field {key!r}")
            node[parts[-1]] = value
        return RunConfig.from_dict(doc)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def parse_override(text: str):
    """Parse one "key=value" override; values go through JSON first."""
    if "=" not in text:
        raise ValueError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value
