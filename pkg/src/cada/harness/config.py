"""Run configuration: one flat record with a serialized default for every field.

Config files are flat YAML mappings of ``field: value``.  Unknown keys are
rejected so typos surface immediately.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from ..segnet import SegNetConfig


@dataclass
class RunConfig:
    # network
    base_channels: int = 8
    input_size: int = 64
    # loss weights
    lambda_seg: float = 1.0
    lambda_adv_E: float = 0.002
    lambda_adv_D: float = 0.018
    lambda_mse_E: float = 0.057
    lambda_mse_D: float = 0.79
    deep_supervision: float = 0.25
    ema_alpha: float = 0.99
    # optimisation
    seg_lr: float = 1e-4
    seg_momentum: float = 0.9
    disc_lr: float = 2.5e-5
    disc_beta1: float = 0.9
    disc_beta2: float = 0.999
    lr_power: float = 0.9
    batch_size: int = 4
    epochs: int = 30
    # adaptation switches
    enc_enabled: bool = True
    se_enabled: bool = True
    num_dec_discs: int = 4
    use_target: bool = True
    # data
    n_source: int = 100
    n_target: int = 100
    n_test: int = 60
    shift: float = 1.0
    data_seed: int = 0
    data_dir: str = ""
    # run control
    seed: int = 0
    out: str = "runs/default"
    checkpoint_every: int = 5
    eval_every: int = 1
    save_masks: bool = True
    figures: bool = True
    init_from: str = ""

    def validate(self) -> None:
        self.segnet_config().validate()
        for name in ("lambda_seg", "lambda_adv_E", "lambda_adv_D", "lambda_mse_E", "lambda_mse_D"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ValueError("ema_alpha must lie in [0, 1]")
        if not 0 <= self.num_dec_discs <= 4:
            raise ValueError("num_dec_discs must lie in [0, 4]")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.n_source < self.batch_size:
            raise ValueError("n_source must be at least one batch")
        if self.checkpoint_every < 1 or self.eval_every < 1:
            raise ValueError("checkpoint_every and eval_every must be >= 1")

    def segnet_config(self) -> SegNetConfig:
        return SegNetConfig(base_channels=self.base_channels, input_size=self.input_size)

    @property
    def lambdas(self) -> dict:
        return {"seg": self.lambda_seg, "adv_E": self.lambda_adv_E, "adv_D": self.lambda_adv_D,
                "mse_E": self.lambda_mse_E, "mse_D": self.lambda_mse_D}

    @property
    def steps_per_epoch(self) -> int:
        return self.n_source // self.batch_size

    @property
    def max_iter(self) -> int:
        return self.epochs * self.steps_per_epoch

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: coerce(known[k], v) for k, v in data.items()})

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ValueError(f"config file {path} must hold a flat mapping")
        return cls.from_dict(data)


def coerce(f: dataclasses.Field, value):
    kind = f.type if isinstance(f.type, type) else {"int": int, "float": float, "bool": bool, "str": str}[f.type]
    if kind is bool:
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"{f.name}: cannot read {value!r} as a boolean")
        return bool(value)
    if kind is int and isinstance(value, float) and not value.is_integer():
        raise ValueError(f"{f.name}: expected an integer, got {value}")
    return kind(value)
