"""Run configuration shared by the command-line tools."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .attention import Variant
from .head import HeadKind, PenaltyConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    head_kind: str = "exemplar"
    variant: str = "att_ffn"
    E: int = 4
    S: int = 1
    Z: int = 3
    D: int = 128
    D_QK: int = 64
    value_groups: int = 0  # 0 = depthwise (one group per channel)
    tcond: bool = False
    ffn_residual: bool = False
    scale_after_softmax: bool = False
    penalty: dict = field(default_factory=lambda: asdict(PenaltyConfig()))
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def groups(self):
        return self.D if self.value_groups == 0 else self.value_groups

    @property
    def penalty_config(self):
        return PenaltyConfig(**self.penalty)

    def validate(self):
        try:
            HeadKind(self.head_kind)
            Variant(self.variant)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        for name in ("E", "S", "Z", "D", "D_QK"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.Z % 2 == 0:
            raise ConfigError(f"Z must be odd for 'same' padding, got {self.Z}")
        if self.value_groups < 0 or (self.value_groups and self.D % self.value_groups):
            raise ConfigError(f"value_groups={self.value_groups} must divide D={self.D}")
        unknown = set(self.penalty) - {f.name for f in fields(PenaltyConfig)}
        if unknown:
            raise ConfigError(f"unknown penalty fields {sorted(unknown)}")
        p = self.penalty_config
        if p.k < 0 or not 0 <= p.window_influence <= 1 or not 0 < p.lr <= 1:
            raise ConfigError(f"invalid penalty config {self.penalty}")

    def head_kwargs(self):
        return dict(kind=self.head_kind, D=self.D, E=self.E, S=self.S, Z=self.Z, D_QK=self.D_QK,
                    variant=self.variant, value_groups=self.groups, use_tcond=self.tcond,
                    ffn_residual=self.ffn_residual, scale_after_softmax=self.scale_after_softmax, rng=self.seed)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            try:
                d = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: {e}") from None
        return cls.from_dict(d)

    def to_dict(self):
        return asdict(self)
