"""Cross-modal fusion transformer and its prediction heads.

Text features act as queries at every layer; vision features supply keys
and values and are never modified. The heads predict pair matching,
masked tokens, and normalized bounding boxes from the fused output.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

# Learnable contrastive temperature: initialized so that the projected
# similarity spread at truncated-normal init (~0.1-0.14) maps to
# well-calibrated logits, clamped to a sane range during training.
TAU_INIT = 0.2
TAU_MIN, TAU_MAX = 0.001, 0.5


class FusionEncoder(nn.Module):
    def __init__(self, dim: int, layers: int, heads: int, ffn_ratio: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.layers = [nn.CrossEncoderLayer(dim, heads, ffn_ratio, rng, dtype)
                       for _ in range(layers)]
        self.ln_out = nn.LayerNorm(dim, dtype)
        self.dim = dim

    def fuse(self, text_feats: Tensor, vision_feats: Tensor,
             text_mask: np.ndarray | None = None,
             vision_mask: np.ndarray | None = None) -> Tensor:
        """(B, L, D) text queries x (B, K, D) vision keys/values -> (B, L, D)."""
        if text_feats.shape[-1] != vision_feats.shape[-1]:
            raise ValueError(f"dimension mismatch: text {text_feats.shape[-1]} "
                             f"vs vision {vision_feats.shape[-1]}")
        x = text_feats
        for layer in self.layers:
            x = layer(x, vision_feats, self_mask=text_mask, cross_mask=vision_mask)
        if self.layers:
            x = self.ln_out(x)
        return x


def cls_of(feats: Tensor) -> Tensor:
    """(B, L, D) -> (B, D) output at position 0."""
    picked = ad.take(feats, [0], axis=1)
    return ad.reshape(picked, (feats.shape[0], feats.shape[2]))


class Heads(nn.Module):
    """Projection, matching, MLM, and box heads plus the contrastive
    temperature (stored as log-temperature, clamped on use)."""

    def __init__(self, dim: int, proj_dim: int, vocab_size: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.proj_vision = nn.Linear(dim, proj_dim, rng, dtype)
        self.proj_text = nn.Linear(dim, proj_dim, rng, dtype)
        self.log_tau = Tensor(np.full((), math.log(TAU_INIT), dtype=dtype),
                              requires_grad=True)
        self.match = nn.Linear(dim, 2, rng, dtype)
        self.mlm = nn.Linear(dim, vocab_size, rng, dtype)
        self.box_hidden = nn.Linear(dim, dim, rng, dtype)
        self.box_out = nn.Linear(dim, 4, rng, dtype)

    def temperature(self) -> Tensor:
        return ad.minimum(ad.maximum(ad.exp(self.log_tau), TAU_MIN), TAU_MAX)

    def project_vision(self, cls: Tensor) -> Tensor:
        return ad.l2_normalize(self.proj_vision(cls), axis=-1)

    def project_text(self, cls: Tensor) -> Tensor:
        return ad.l2_normalize(self.proj_text(cls), axis=-1)

    def predict_match(self, x_cls: Tensor) -> Tensor:
        """(B, D) fused summary -> (B, 2) logits over {mismatch, match}."""
        return self.match(x_cls)

    def predict_mlm(self, fused: Tensor) -> Tensor:
        """(B, L, D) fused sequence -> (B, L, |V|) token logits."""
        return self.mlm(fused)

    def predict_box(self, x_cls: Tensor) -> Tensor:
        """(B, D) fused summary of whole-image features and a concept's
        text -> (B, 4) box (cx, cy, w, h), each in (0, 1) via sigmoid."""
        return ad.sigmoid(self.box_out(ad.gelu(self.box_hidden(x_cls))))
