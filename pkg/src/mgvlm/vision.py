"""Vision encoder: patch transformer, multi-grained concept selection,
and video encoding by per-frame encoding plus temporal mean pooling.

One encoder pass per image serves every concept in it: objects, regions,
and the whole image are all represented as a subset of the encoded patch
features prefixed by their average as the concept summary vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor


@dataclass(frozen=True)
class BoundingBox:
    """Normalized (cx, cy, w, h); (0.5, 0.5, 1, 1) is the whole image."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for v in (self.cx, self.cy, self.w, self.h):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"box field out of range: {self}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box must have positive extent: {self}")

    def corners(self) -> tuple[float, float, float, float]:
        """(x1, y1, x2, y2), clamped into the unit square."""
        return (max(self.cx - self.w / 2, 0.0), max(self.cy - self.h / 2, 0.0),
                min(self.cx + self.w / 2, 1.0), min(self.cy + self.h / 2, 1.0))

    def area(self) -> float:
        x1, y1, x2, y2 = self.corners()
        return max(x2 - x1, 0.0) * max(y2 - y1, 0.0)


WHOLE_IMAGE = BoundingBox(0.5, 0.5, 1.0, 1.0)


@dataclass
class VisionFeatures:
    """Encoded patch sequence for one image."""

    features: Tensor              # (P, D)
    positions: np.ndarray         # (P,) row-major grid ids
    grid: int

    def __post_init__(self):
        if self.features.shape[0] != self.grid * self.grid:
            raise ValueError("patch count must equal grid**2")


@dataclass
class ConceptFeatures:
    """Selected patch subsequence with its mean prepended as position 0."""

    features: Tensor              # (1 + K, D)
    positions: np.ndarray         # (K,) original patch ids, ascending
    box: BoundingBox

    @property
    def cls(self) -> Tensor:
        return ad.take(self.features, [0], axis=0)


@dataclass
class VideoClip:
    frames: list                  # list of (H, W, C) arrays
    timestamps: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.frames) == 0:
            raise ValueError("empty clip")
        shapes = {f.shape for f in self.frames}
        if len(shapes) != 1:
            raise ValueError("all frames must share dimensions")
        if not self.timestamps:
            self.timestamps = list(range(len(self.frames)))


def _validate_image_batch(images: np.ndarray, patch_size: int) -> None:
    if images.ndim != 4:
        raise ValueError("expected a batch of (H, W, C) images")
    _, h, w, _ = images.shape
    if h != w:
        raise ValueError(f"images must be square, got {h}x{w}")
    if h % patch_size != 0:
        raise ValueError(f"image size {h} not divisible by patch size {patch_size}")


def patch_grid(image_size: int, patch_size: int) -> int:
    if image_size % patch_size != 0:
        raise ValueError(f"image size {image_size} not divisible by patch size {patch_size}")
    return image_size // patch_size


def concept_patch_ids(box: BoundingBox, grid: int) -> np.ndarray:
    """Row-major ids of patches whose center lies inside the box.

    Membership is half-open ([x1, x2) x [y1, y2)) so boxes that tile the
    image partition the patches exactly. A box containing no patch
    center falls back to the single patch containing the box center.
    """
    x1, y1, x2, y2 = box.corners()
    centers = (np.arange(grid) + 0.5) / grid
    cols = np.nonzero((centers >= x1) & (centers < x2))[0]
    rows = np.nonzero((centers >= y1) & (centers < y2))[0]
    if len(cols) == 0 or len(rows) == 0:
        col = min(int(box.cx * grid), grid - 1)
        row = min(int(box.cy * grid), grid - 1)
        return np.array([row * grid + col], dtype=np.int64)
    return (rows[:, None] * grid + cols[None, :]).reshape(-1).astype(np.int64)


class VisionEncoder(nn.Module):
    """Patch-embedding transformer shared by images and video frames."""

    def __init__(self, image_size: int, patch_size: int, dim: int, layers: int,
                 heads: int, ffn_ratio: int, max_frames: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.grid = patch_grid(image_size, patch_size)
        self.patch_size = patch_size
        self.image_size = image_size
        self.dim = dim
        n_patches = self.grid * self.grid
        self.patch_proj = nn.Linear(patch_size * patch_size * 3, dim, rng, dtype)
        self.pos_embed = Tensor(nn.trunc_normal(rng, (n_patches, dim), dtype=dtype),
                                requires_grad=True)
        self.temporal_embed = Tensor(nn.trunc_normal(rng, (max_frames, dim), dtype=dtype),
                                     requires_grad=True)
        self.layers = [nn.EncoderLayer(dim, heads, ffn_ratio, rng, dtype)
                       for _ in range(layers)]
        self.ln_out = nn.LayerNorm(dim, dtype)
        self.dtype = dtype

    def patchify(self, images: np.ndarray) -> Tensor:
        """(B, H, W, C) pixels -> (B, P, D) patch embeddings with learned
        positional embeddings, patches in row-major order."""
        _validate_image_batch(images, self.patch_size)
        b, h, _, c = images.shape
        g, p = self.grid, self.patch_size
        flat = (images.reshape(b, g, p, g, p, c)
                      .transpose(0, 1, 3, 2, 4, 5)
                      .reshape(b, g * g, p * p * c)
                      .astype(self.dtype))
        return ad.add(self.patch_proj(Tensor(flat, op="pixels")), self.pos_embed)

    def encode_batch(self, images: np.ndarray) -> Tensor:
        """Full encoder pass: (B, H, W, C) -> (B, P, D)."""
        x = self.patchify(images)
        for layer in self.layers:
            x = layer(x)
        if self.layers:
            x = self.ln_out(x)
        return x

    def encode_image(self, image: np.ndarray) -> VisionFeatures:
        feats = self.encode_batch(image[None])
        return VisionFeatures(ad.reshape(feats, feats.shape[1:]),
                              np.arange(self.grid * self.grid, dtype=np.int64),
                              self.grid)

    def encode_frames(self, frames_feats: Tensor, n_frames: int) -> Tensor:
        """(F, P, D) per-frame features -> (P, D) video features: add one
        learned temporal embedding per frame slot, mean over frames."""
        if n_frames > self.temporal_embed.shape[0]:
            raise ValueError(f"{n_frames} frames exceeds temporal embedding "
                             f"capacity {self.temporal_embed.shape[0]}")
        slots = ad.take(self.temporal_embed, np.arange(n_frames), axis=0)
        x = ad.add(frames_feats, ad.reshape(slots, (n_frames, 1, self.temporal_embed.shape[1])))
        return ad.mean_exact(x, axis=0)

    def encode_video(self, clip: VideoClip, frames_per_step: int,
                     rng: np.random.Generator | None = None) -> VisionFeatures:
        """Sample frames (all if the clip is short), encode each, pool.

        With an rng, frames are sampled uniformly without replacement and
        kept in temporal order; without one, evenly spaced frames are
        taken (deterministic evaluation path).
        """
        total = len(clip.frames)
        if total <= frames_per_step:
            idx = np.arange(total)
        elif rng is not None:
            idx = np.sort(rng.choice(total, size=frames_per_step, replace=False))
        else:
            idx = np.unique(np.linspace(0, total - 1, frames_per_step).round().astype(np.int64))
        stack = np.stack([clip.frames[i] for i in idx])
        feats = self.encode_batch(stack)
        pooled = self.encode_frames(feats, len(idx))
        return VisionFeatures(pooled, np.arange(self.grid * self.grid, dtype=np.int64),
                              self.grid)


def select_concept(feats: VisionFeatures, box: BoundingBox) -> ConceptFeatures:
    """Extract the box's patches from already-encoded features and prepend
    their mean as the concept summary. Selection happens after the
    encoder pass, so one pass serves all concepts of an image."""
    ids = concept_patch_ids(box, feats.grid)
    picked = ad.take(feats.features, ids, axis=0)
    cls = ad.mean(picked, axis=0, keepdims=True)
    return ConceptFeatures(ad.concat([cls, picked], axis=0),
                           feats.positions[ids], box)
