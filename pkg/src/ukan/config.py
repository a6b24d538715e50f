"""Run configuration: defaults, the `key = value` config file, and validation.

The file format is flat UTF-8 `key = value` lines under `[section]` headers;
every key belongs to a fixed schema and unknown keys (or keys in the wrong
section) are errors, so experiment typos fail fast. CLI flags mirror the keys
one-to-one and win over file values.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .kan import SplineSpec
from .model import PROFILES, UkanConfig


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_ints(text: str) -> tuple:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(v) for v in text.split(","))


def _parse_str_tuple(text: str) -> tuple:
    text = text.strip()
    if not text:
        return ()
    return tuple(v.strip() for v in text.split(","))


@dataclass(frozen=True)
class TrainConfig:
    # [run]
    task: str = "segment"                 # segment | diffuse
    seed: int = 0
    out_dir: str = "runs/default"
    precision: str = "float32"            # float32 | float64
    epochs: int = 0                       # 0 -> task default (400 seg / 1000 diff)
    batch_size: int = 8
    eval_every: int = 1
    # [model]
    profile: str = "base"                 # small | base | large | custom
    in_channels: int = 3
    out_channels: int = 1
    conv_channels: tuple = ()             # custom profile only
    kan_dims: tuple = ()
    n_kan_layers: int = 3
    block_kind: tuple = ("kan",)          # one entry, or one per tok block
    patch_stride: int = 2
    grid_size: int = 5
    spline_order: int = 3
    grid_low: float = -1.0
    grid_high: float = 1.0
    time_embed_dim: int = 128
    # [data]
    data_dir: str = ""
    image_size: int = 256
    split_ratio: float = 0.8
    augment: bool = True
    rotate: str = "auto"                  # auto: on for segment, off for diffuse
    rotation_mode: str = "right_angle"    # right_angle | any
    # [optim]
    lr: float = 1e-4
    lr_min: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # [loss]
    loss_mode: str = "bce_dice"           # bce_dice | ce
    bce_weight: float = 0.5
    dice_weight: float = 1.0
    # [diffusion]
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def validate(self) -> "TrainConfig":
        if self.task not in ("segment", "diffuse"):
            raise ValueError(f"task must be segment or diffuse, got {self.task!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32/float64, got {self.precision!r}")
        if self.profile not in (*PROFILES, "custom"):
            raise ValueError(f"profile must be one of {(*PROFILES, 'custom')}, "
                             f"got {self.profile!r}")
        if self.profile == "custom" and not (self.conv_channels and self.kan_dims):
            raise ValueError("custom profile needs conv_channels and kan_dims")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 < self.split_ratio <= 1.0:
            raise ValueError("split_ratio must lie in (0, 1]")
        if self.rotate not in ("auto", "on", "off"):
            raise ValueError(f"rotate must be auto/on/off, got {self.rotate!r}")
        if self.lr <= 0 or self.lr_min < 0:
            raise ValueError("learning rates must be positive")
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        self.model_config()  # architecture-level validation
        return self

    # -- derived values ------------------------------------------------------

    def resolved_epochs(self) -> int:
        if self.epochs:
            return self.epochs
        return 400 if self.task == "segment" else 1000

    def rotation_enabled(self) -> bool:
        if self.rotate == "auto":
            return self.task == "segment"
        return self.rotate == "on"

    def model_config(self) -> UkanConfig:
        if self.profile == "custom":
            conv, dims = tuple(self.conv_channels), tuple(self.kan_dims)
        else:
            conv, dims = PROFILES[self.profile]
        kinds = self.block_kind[0] if len(self.block_kind) == 1 else self.block_kind
        spline = SplineSpec(grid_size=self.grid_size, order=self.spline_order,
                            low=self.grid_low, high=self.grid_high)
        return UkanConfig(
            in_channels=self.in_channels, out_channels=self.out_channels,
            conv_channels=conv, kan_dims=dims, n_kan_layers=self.n_kan_layers,
            block_kinds=kinds, patch_stride=self.patch_stride, spline=spline,
            time_embed_dim=self.time_embed_dim,
        ).validate()


# schema: key -> (section, parser); sections order the config echo
_SECTIONS = ("run", "model", "data", "optim", "loss", "diffusion")
SCHEMA = {
    "task": ("run", str), "seed": ("run", int), "out_dir": ("run", str),
    "precision": ("run", str), "epochs": ("run", int),
    "batch_size": ("run", int), "eval_every": ("run", int),
    "profile": ("model", str), "in_channels": ("model", int),
    "out_channels": ("model", int), "conv_channels": ("model", _parse_ints),
    "kan_dims": ("model", _parse_ints), "n_kan_layers": ("model", int),
    "block_kind": ("model", _parse_str_tuple), "patch_stride": ("model", int),
    "grid_size": ("model", int), "spline_order": ("model", int),
    "grid_low": ("model", float), "grid_high": ("model", float),
    "time_embed_dim": ("model", int),
    "data_dir": ("data", str), "image_size": ("data", int),
    "split_ratio": ("data", float), "augment": ("data", _parse_bool),
    "rotate": ("data", str), "rotation_mode": ("data", str),
    "lr": ("optim", float), "lr_min": ("optim", float),
    "beta1": ("optim", float), "beta2": ("optim", float),
    "adam_eps": ("optim", float),
    "loss_mode": ("loss", str), "bce_weight": ("loss", float),
    "dice_weight": ("loss", float),
    "timesteps": ("diffusion", int), "beta_start": ("diffusion", float),
    "beta_end": ("diffusion", float),
}

assert set(SCHEMA) == {f.name for f in fields(TrainConfig)}


def parse_config_file(path) -> dict:
    """Parse `[section]` / `key = value` lines into typed overrides; unknown
    sections or keys are errors."""
    overrides = {}
    section = None
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8")
                                 .splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ValueError(f"{path}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        want_section, parser = SCHEMA[key]
        if section is not None and section != want_section:
            raise ValueError(f"{path}:{lineno}: key {key!r} belongs to "
                             f"[{want_section}], found it under [{section}]")
        try:
            overrides[key] = parser(value.strip())
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad value for {key!r}: {exc}")
    return overrides


def make_config(file_path=None, **flag_overrides) -> TrainConfig:
    """File values first, CLI flag overrides on top, then validation."""
    values = parse_config_file(file_path) if file_path else {}
    for key, val in flag_overrides.items():
        if val is None:
            continue
        if key not in SCHEMA:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = val
    return TrainConfig(**values).validate()


def render_config(cfg: TrainConfig) -> str:
    """Fully-resolved config in the file format (the per-run echo)."""
    by_section = {s: [] for s in _SECTIONS}
    for f in fields(cfg):
        section, _ = SCHEMA[f.name]
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        by_section[section].append(f"{f.name} = {value}")
    parts = []
    for s in _SECTIONS:
        parts.append(f"[{s}]")
        parts.extend(by_section[s])
        parts.append("")
    return "\n".join(parts)


def config_to_meta(cfg: TrainConfig) -> dict:
    """JSON-safe snapshot for checkpoints."""
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def config_from_meta(meta: dict) -> TrainConfig:
    kwargs = {}
    for f in fields(TrainConfig):
        if f.name in meta:
            v = meta[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    return TrainConfig(**kwargs).validate()
