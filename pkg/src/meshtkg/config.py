"""Run configuration: profiles, config files, environment, flags.

Precedence, lowest to highest: profile preset, config file (flat
`key = value` lines), environment variables (`MESH_<KEY>`), command-line
flags. Every run writes the fully resolved configuration to
`config.echo`, and a run started from that echo reproduces the original
bit for bit (same seed, same streams).
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields

PROFILES = {
    # full-scale settings
    "full": dict(
        dim=100, llm_dim=4096, adapter_hidden=256, channels=50, kernel_width=3,
        layers=2, window=3, num_historical=1, num_nonhistorical=1,
        omega=1.0, learning_rate=0.001, dropout=0.2,
        epochs_stage0=500, epochs_stage1=30,
    ),
    # CPU-friendly settings for desk runs and tests
    "desk": dict(
        dim=32, llm_dim=64, adapter_hidden=64, channels=8, kernel_width=3,
        layers=2, window=3, num_historical=1, num_nonhistorical=1,
        omega=1.0, learning_rate=0.001, dropout=0.2,
        epochs_stage0=30, epochs_stage1=20,
    ),
}

LOSS_MODES = ("cross_entropy", "literal")


@dataclass
class RunConfig:
    dataset: str = ""
    out: str = "out"
    profile: str = "desk"
    seed: int = 1
    dim: int = 32
    llm_dim: int = 64
    adapter_hidden: int = 64
    channels: int = 8
    kernel_width: int = 3
    layers: int = 2
    window: int = 3
    num_historical: int = 1
    num_nonhistorical: int = 1
    omega: float = 1.0
    learning_rate: float = 0.001
    dropout: float = 0.2
    epochs_stage0: int = 30
    epochs_stage1: int = 20
    loss_mode: str = "cross_entropy"
    embeddings: str = ""          # path to an embedding file; empty = synthetic
    synthetic_seed: int = 0       # 0 = derive from the run seed
    max_timestamps: int = 0       # 0 = no truncation
    drop_history: float = 0.0
    dtype: str = "float32"
    disable_semantic: bool = False
    disable_structural: bool = False
    disable_event_aware: bool = False
    disable_prediction_expert: bool = False
    gate_input: str = "structural"

    def validate(self) -> None:
        positive = (
            "dim", "llm_dim", "adapter_hidden", "channels", "kernel_width",
            "layers", "num_historical", "num_nonhistorical", "learning_rate",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"config field {name} must be positive")
        for name in ("window", "epochs_stage0", "epochs_stage1", "max_timestamps"):
            if getattr(self, name) < 0:
                raise ValueError(f"config field {name} must be >= 0")
        if self.omega < 0:
            raise ValueError("omega must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if not 0.0 <= self.drop_history <= 1.0:
            raise ValueError("drop_history must be in [0, 1]")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {tuple(PROFILES)}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.gate_input not in ("structural", "semantic", "concatenated"):
            raise ValueError("gate_input must be structural, semantic, or concatenated")
        if self.disable_semantic and self.disable_structural:
            raise ValueError("cannot disable both the semantic and the structural path")

    def echo(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(name: str, raw: str):
    kind = RunConfig.__dataclass_fields__[name].type
    if kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean config value {raw!r} for {name}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw.strip()


def parse_config_file(path: str) -> dict:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected `key = value`, got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in RunConfig.__dataclass_fields__:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _coerce(key, raw)
    return values


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    values = {}
    for name in RunConfig.__dataclass_fields__:
        raw = environ.get(f"MESH_{name.upper()}")
        if raw is not None:
            values[name] = _coerce(name, raw)
    return values


def resolve(flag_values: dict, config_file: str | None = None, environ=None) -> RunConfig:
    """Layer profile preset, config file, environment, then flags."""
    file_values = parse_config_file(config_file) if config_file else {}
    env_values = env_overrides(environ)
    profile = (
        flag_values.get("profile")
        or env_values.get("profile")
        or file_values.get("profile")
        or "desk"
    )
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}")
    merged: dict = {"profile": profile}
    merged.update(PROFILES[profile])
    for layer in (file_values, env_values, flag_values):
        merged.update({k: v for k, v in layer.items() if v is not None})
    merged["profile"] = profile
    cfg = RunConfig(**merged)
    if cfg.synthetic_seed == 0:
        cfg.synthetic_seed = cfg.seed
    cfg.validate()
    return cfg
