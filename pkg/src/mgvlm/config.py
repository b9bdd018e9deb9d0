"""Flat training configuration with key=value file parsing.

Every field is addressable from a config file and overridable from CLI
flags; the trainer snapshots the full config into each checkpoint.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


@dataclass
class TrainConfig:
    # model dimensions
    dim: int = 64
    proj_dim: int = 0          # 0 -> dim // 2
    vision_layers: int = 2
    text_layers: int = 2
    fusion_layers: int = 1
    attn_heads: int = 4
    ffn_ratio: int = 4
    patch_size: int = 8
    image_size: int = 32
    max_text_len: int = 16
    vocab_size: int = 0        # 0 -> inferred from the dataset vocab
    max_frames: int = 8
    dtype: str = "float32"
    # schedule / optimizer
    batch_size: int = 32
    total_steps: int = 2000
    warmup_steps: int = 100
    peak_lr: float = 1e-4
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    seed: int = 0
    # objectives
    mask_prob: float = 0.4
    max_annotations_per_sample: int = 2
    frames_per_step: int = 3
    eval_frames: int = 5
    enable_contrastive: bool = True
    enable_match: bool = True
    enable_mlm: bool = True
    enable_bbox: bool = True
    enable_concept_align: bool = True
    # data / io
    data: str = ""
    mix: str = ""              # "path:weight,path:weight"; overrides data
    out_dir: str = "run"
    log_every: int = 1
    eval_every: int = 0
    eval_k: int = 8
    save_every: int = 0
    resume: str = ""           # continue an interrupted run (config must match)
    init_from: str = ""        # warm-start weights only; fresh schedule/optimizer

    def validate(self) -> None:
        if self.warmup_steps >= self.total_steps and self.total_steps > 0:
            raise ValueError("warmup_steps must be below total_steps")
        for name in ("dim", "attn_heads", "ffn_ratio", "patch_size", "image_size",
                     "max_text_len", "max_frames", "batch_size", "frames_per_step"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.dim % self.attn_heads != 0:
            raise ValueError("dim must be divisible by attn_heads")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError("mask_prob must lie in [0, 1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def parse_value(name: str, raw: str):
    kind = _FIELDS[name]
    raw = raw.strip()
    if kind == "bool" or kind is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"bad boolean for {name}: {raw!r}")
    if kind == "int" or kind is int:
        return int(raw)
    if kind == "float" or kind is float:
        return float(raw)
    return raw


def config_from_dict(values: dict) -> TrainConfig:
    known = {k: v for k, v in values.items() if k in _FIELDS}
    unknown = set(values) - set(known)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return TrainConfig(**known)


def load_config(path) -> TrainConfig:
    """Parse a flat `key = value` file (# starts a comment)."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = parse_value(key, raw)
    return config_from_dict(values)


def save_config(cfg: TrainConfig, path) -> None:
    lines = [f"{k} = {v}" for k, v in cfg.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
