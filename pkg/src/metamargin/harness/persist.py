"""Checkpoint and trace files.

Floats go through ``json`` with shortest round-trip repr, so a save/load
cycle reproduces every parameter bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from ..encoders import EncoderParams
from ..metaopt import TrainConfig
from ..weighting import WeightNetParams


@dataclass
class Checkpoint:
    encoder_params: EncoderParams
    weightnet_params: WeightNetParams
    step: int
    config: TrainConfig

    def to_dict(self) -> dict:
        return {
            "encoder_params": self.encoder_params.to_dict(),
            "weightnet_params": self.weightnet_params.to_dict(),
            "step": self.step,
            "config": self.config.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        missing = {"encoder_params", "weightnet_params", "step", "config"} - set(d)
        if missing:
            raise ValueError(f"checkpoint lacks {sorted(missing)}")
        return cls(
            EncoderParams.from_dict(d["encoder_params"]),
            WeightNetParams.from_dict(d["weightnet_params"]),
            int(d["step"]),
            TrainConfig.from_dict(d["config"]),
        )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "w") as fh:
        json.dump(ckpt.to_dict(), fh, sort_keys=True)


def load_checkpoint(path) -> Checkpoint:
    with open(path) as fh:
        return Checkpoint.from_dict(json.load(fh))


def write_traces(path, traces) -> None:
    """One JSON object per line, in step order."""
    with open(path, "w") as fh:
        for t in traces:
            fh.write(t.to_json())
            fh.write("\n")


def read_traces(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
