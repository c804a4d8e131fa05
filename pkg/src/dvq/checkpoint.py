"""Canonical JSON checkpoints.

Arrays are stored as ``{"shape": [...], "data": [...]}`` with shortest
round-trip float formatting and sorted keys, so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import FORMAT_VERSION, config_from_dict


class CheckpointVersionError(ValueError):
    pass


def _encode(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}


def _decode(obj: dict) -> np.ndarray:
    return np.array(obj["data"], dtype=np.float64).reshape(obj["shape"])


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    seed: int
    format_version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model, config, seed: int) -> "Checkpoint":
        params = {k: v.data.copy() for k, v in model.named_parameters().items()}
        return cls(config.to_dict(), params, int(seed))

    def to_dict(self) -> dict:
        entropy = int(np.random.SeedSequence(self.seed).entropy)
        return {
            "format_version": self.format_version,
            "config": self.config,
            "params": {k: _encode(v) for k, v in self.params.items()},
            "rng": {"seed": self.seed, "entropy": str(entropy), "streams": 5},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        version = d.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(
                f"checkpoint format_version {version} does not match supported version {FORMAT_VERSION}")
        params = {k: _decode(v) for k, v in d["params"].items()}
        return cls(d["config"], params, int(d["rng"]["seed"]), version)

    def save(self, path):
        Path(path).write_text(dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def run_config(self):
        return config_from_dict(self.config)

    def to_model(self):
        from .tasks.train import build_model

        cfg = self.run_config()
        model = build_model(cfg.task, cfg.model, self.seed)
        named = model.named_parameters()
        if set(named) != set(self.params):
            missing = sorted(set(named) ^ set(self.params))
            raise ValueError(f"checkpoint parameters do not match the model: {missing}")
        for k, v in named.items():
            if v.data.shape != self.params[k].shape:
                raise ValueError(f"parameter {k}: shape {self.params[k].shape} != {v.data.shape}")
            v.data[...] = self.params[k]
        return model
