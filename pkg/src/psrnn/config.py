"""Run configuration with validation and defaults."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, IoError

__all__ = ["RunConfig", "load_config"]


@dataclass(frozen=True)
class RunConfig:
    """Every hyperparameter of an init/train/factorize run.

    ``None`` for ``future_len``, ``past_len`` and ``bptt_horizon`` means
    "pick by data kind": horizon 1 and BPTT window 35 for symbol data,
    horizon 10 and full-sequence BPTT for continuous data. The past window
    defaults to the future horizon. ``bptt_horizon = 0`` means unbounded.
    """

    rff_count: int = 2000
    states: int = 20
    ridge: float = 1e-2  # ridge parameter is ridge * n_training_examples
    ridge_mode: str = "ridge"  # "ridge" or "pinv"
    decoder_ridge: float = 1e-4
    future_len: int | None = None
    past_len: int | None = None
    state_const: float | None = 1.0
    bandwidth: float | None = None
    discrete_rff: bool = False
    projection_rows: int = 4000
    layers: int = 1
    rank: int | None = None
    eps_bias: float = 0.1
    lr: float = 1.0
    bptt_horizon: int | None = None
    epochs: int = 5
    batch_size: int = 10
    grad_clip: float = 0.0
    train_q1: bool = True
    random_init: bool = False
    init_scale: float = 0.5
    split: float = 0.8
    seed: int = 0

    def __post_init__(self):
        checks = [
            (self.rff_count >= 1, "rff_count must be >= 1"),
            (self.states >= 1, "states must be >= 1"),
            (self.ridge >= 0 and self.decoder_ridge >= 0, "ridge parameters must be >= 0"),
            (self.ridge_mode in ("ridge", "pinv"), "ridge_mode must be 'ridge' or 'pinv'"),
            (self.future_len is None or self.future_len >= 1, "future_len must be >= 1"),
            (self.past_len is None or self.past_len >= 1, "past_len must be >= 1"),
            (self.bandwidth is None or self.bandwidth > 0, "bandwidth must be positive"),
            (self.layers >= 1, "layers must be >= 1"),
            (self.rank is None or self.rank >= 1, "rank must be >= 1"),
            (self.lr > 0, "lr must be > 0"),
            (self.bptt_horizon is None or self.bptt_horizon >= 0, "bptt_horizon must be >= 0"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.grad_clip >= 0, "grad_clip must be >= 0"),
            (0 < self.split < 1 or (self.split >= 1 and float(self.split).is_integer()),
             "split is a train fraction in (0, 1) or a whole number of training files"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.state_const is not None and not math.isfinite(self.state_const):
            raise ConfigError("state_const must be finite")

    def resolved(self, kind: str) -> "RunConfig":
        """Fill the kind-dependent defaults."""
        discrete = kind == "discrete"
        k = self.future_len or (1 if discrete else 10)
        return dataclasses.replace(
            self,
            future_len=k,
            past_len=self.past_len or k,
            bptt_horizon=self.bptt_horizon if self.bptt_horizon is not None else (35 if discrete else 0),
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path=None, **overrides) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        except OSError as exc:
            raise IoError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(data)
