"""Run configuration shared by the selector, simulator and CLI."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import InvalidInputError

SELECTION_MODES = ("greedy", "static", "random")
MSO_EVAL_MODES = ("initial", "current", "heldout")


@dataclass(frozen=True)
class RunConfig:
    gamma: float = 0.01
    beta: float = 0.5
    alpha: float = 0.9
    rounds: int = 2
    budget: int = 0
    rare_quantile: float = 1 / 3
    selection: str = "greedy"
    mso_eval: str = "initial"
    inter_aggregate: str = "mean"
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.gamma > 0:
            raise InvalidInputError(f"gamma must be > 0, got {self.gamma}")
        if not self.beta >= 0:
            raise InvalidInputError(f"beta must be >= 0, got {self.beta}")
        if not 0 <= self.alpha < 1:
            raise InvalidInputError(f"alpha must be in [0, 1), got {self.alpha}")
        if self.budget < 0 or self.rounds < 0:
            raise InvalidInputError("budget and rounds must be >= 0")
        if not 0 <= self.rare_quantile <= 1:
            raise InvalidInputError(f"rare_quantile must be in [0, 1], got {self.rare_quantile}")
        if self.selection not in SELECTION_MODES:
            raise InvalidInputError(f"selection must be one of {SELECTION_MODES}, got {self.selection!r}")
        if self.mso_eval not in MSO_EVAL_MODES:
            raise InvalidInputError(f"mso_eval must be one of {MSO_EVAL_MODES}, got {self.mso_eval!r}")
        if self.inter_aggregate not in ("mean", "sum"):
            raise InvalidInputError(f"inter_aggregate must be 'mean' or 'sum', got {self.inter_aggregate!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        known = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            default = getattr(cls, key)
            if isinstance(default, str):
                ok = isinstance(value, str)
            elif isinstance(default, int):
                ok = isinstance(value, int) and not isinstance(value, bool)
            else:
                ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            if not ok:
                raise InvalidInputError(f"config key {key!r}: invalid value {value!r}")
            kwargs[key] = type(default)(value)
        return cls(**kwargs)

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)
