"""Run configuration stored as flat ``key = value`` text."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .losses import LossWeights
from .sr_branch import SrConfig


class ConfigFileError(ValueError):
    pass


@dataclass
class RunConfig:
    # architecture
    channels: int = 64
    heads: int = 4
    n_srb: int = 2
    scale: int = 2
    reduction: int = 4
    semantic_depth: int = 1
    align_depth: int = 1
    frames: int = 16
    recognizer_preset: str = "tiny"
    alphabet: str = "-abcdefghijklmnopqrstuvwxyz0123456789"
    # objective
    lambda_pos: float = 1.0
    lambda_con: float = 1.0
    alpha1: float = 0.001  # L_con is ~100x L_rc, so unit weight drowns reconstruction
    alpha2: float = 1.0
    char_weights: str = "uniform"  # or "inverse_frequency"
    finetune_recognizer: bool = False
    # optimisation
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 30
    max_steps: int = 0  # 0 = run all epochs
    seed: int = 0
    checkpoint_every: int = 500
    # paths (empty = unset)
    data: str = ""
    guidance_ckpt: str = ""
    lossrec_ckpt: str = ""
    out: str = ""
    log: str = ""

    def sr_config(self) -> SrConfig:
        return SrConfig(
            channels=self.channels,
            n_srb=self.n_srb,
            scale=self.scale,
            reduction=self.reduction,
            heads=self.heads,
            semantic_depth=self.semantic_depth,
            align_depth=self.align_depth,
            frames=self.frames,
            n_classes=len(self.alphabet),
            recognizer_preset=self.recognizer_preset,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_pos, self.lambda_con, self.alpha1, self.alpha2)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {_format(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigFileError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigFileError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigFileError(f"line {lineno}: duplicate key {key!r}")
            values[key] = _parse(types[key], value, key)
        return cls(**values)

    def save(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(type_name, value, key):
    try:
        if type_name in ("bool", bool):
            if value not in ("true", "false"):
                raise ValueError(value)
            return value == "true"
        if type_name in ("int", int):
            return int(value)
        if type_name in ("float", float):
            return float(value)
        return value
    except ValueError:
        raise ConfigFileError(f"bad value {value!r} for {key} ({type_name})") from None
