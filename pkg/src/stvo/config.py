"""Run configuration with JSON round-trip and STVO_* environment overrides."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .spatial import DEFAULT_BUDGET

ENV_PREFIX = "STVO_"

CHOICES = {
    "depth_source": ("ba", "external"),
    "flow_source": ("network", "oracle"),
    "sam_normalization": ("standardized", "raw"),
    "edge_mode": ("temporal", "flow"),
}


@dataclass
class Config:
    # camera (full-resolution fx fy cx cy); None -> calib.txt next to the sequence
    intrinsics: Optional[list] = None
    # frame graph
    r: int = 3
    window: int = 10
    kf_threshold: float = 2.4       # mean flow, pixels at 1/8 resolution
    edge_mode: str = "temporal"
    stride: int = 1
    # update loop
    iterations: int = 15
    inner_iters: int = 2
    # network widths
    d_m: int = 64
    d_M: int = 128
    d_in: int = 64
    d_h: int = 128
    d_f: int = 128
    d_c: int = 128
    levels: int = 4
    radius: int = 3
    motion_std: float = 0.1
    seed: int = 0
    weights: Optional[str] = None   # STVW file; None -> seeded initialisation
    # modes
    depth_source: str = "ba"
    flow_source: str = "network"
    sam_normalization: str = "standardized"
    memory_budget: int = DEFAULT_BUDGET
    extra: dict = field(default_factory=dict)

    def validate(self) -> "Config":
        for name, allowed in CHOICES.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        for name in ("r", "window", "iterations", "inner_iters", "levels", "stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.radius < 0:
            raise ValueError("radius must be >= 0")
        if self.intrinsics is not None and len(self.intrinsics) != 4:
            raise ValueError("intrinsics are fx fy cx cy")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_dict(cls, d) -> "Config":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def load(cls, path) -> "Config":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def updated(self, **overrides) -> "Config":
        vals = {k: v for k, v in overrides.items() if v is not None}
        return dataclasses.replace(self, **vals).validate()

    def with_env(self, environ=None) -> "Config":
        """Apply STVO_<FIELD> variables, parsed by the field's current type."""
        environ = os.environ if environ is None else environ
        out = {}
        lowered = {f.name.lower(): f.name for f in dataclasses.fields(self)}
        for key, raw in environ.items():
            if not key.startswith(ENV_PREFIX):
                continue
            name = lowered.get(key[len(ENV_PREFIX):].lower())
            if name is None or name == "extra":
                continue
            out[name] = _parse(raw, getattr(self, name), name)
        return self.updated(**out) if out else self


def _parse(raw: str, current, name):
    if name == "intrinsics":
        return [float(v) for v in raw.replace(",", " ").split()]
    if isinstance(current, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def resolve(config_path=None, environ=None, **cli) -> Config:
    """Defaults < config file < environment < explicit command-line values."""
    cfg = Config.load(config_path) if config_path else Config()
    return cfg.with_env(environ).updated(**cli)
