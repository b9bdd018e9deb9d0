"""The assembled model: vision, text, and fusion transformers plus heads.

Parameter names partition by attribute into the four module prefixes
(`vision.*`, `text.*`, `fusion.*`, `heads.*`), which is what makes the
text module independently replaceable in a trained checkpoint.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .fusion import FusionEncoder, Heads
from .text import TextEncoder
from .vision import VisionEncoder

MODULE_PREFIXES = ("vision", "text", "fusion", "heads")

INIT_STREAM = 101  # spawn key for parameter initialization


def init_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(INIT_STREAM,)))


class Model(nn.Module):
    def __init__(self, cfg, vocab_size: int, rng: np.random.Generator):
        dtype = np.float64 if cfg.dtype == "float64" else np.float32
        proj_dim = cfg.proj_dim if cfg.proj_dim > 0 else cfg.dim // 2
        self.vision = VisionEncoder(cfg.image_size, cfg.patch_size, cfg.dim,
                                    cfg.vision_layers, cfg.attn_heads, cfg.ffn_ratio,
                                    cfg.max_frames, rng, dtype)
        self.text = TextEncoder(vocab_size, cfg.max_text_len, cfg.dim,
                                cfg.text_layers, cfg.attn_heads, cfg.ffn_ratio,
                                rng, dtype)
        self.fusion = FusionEncoder(cfg.dim, cfg.fusion_layers, cfg.attn_heads,
                                    cfg.ffn_ratio, rng, dtype)
        self.heads = Heads(cfg.dim, proj_dim, vocab_size, rng, dtype)
        self.dim = cfg.dim
        self.vocab_size = vocab_size
        self.dtype = dtype
        self.assign_names()

    def param_dict(self) -> dict[str, "nn.Tensor"]:
        return dict(self.named_parameters())

    def module_names(self, prefix: str) -> list[str]:
        return [n for n in self.param_dict() if n.startswith(prefix + ".")]


def build_model(cfg, vocab_size: int, seed: int | None = None) -> Model:
    """Construct a model with seeded truncated-normal initialization."""
    rng = init_rng(cfg.seed if seed is None else seed)
    return Model(cfg, vocab_size, rng)
