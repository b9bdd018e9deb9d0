"""End-to-end gradient verification of the combined objective.

Builds a tiny 64-bit model over a synthetic mixed batch (captioned,
caption-only, annotation-only, and video samples) and compares
reverse-mode gradients of the total loss against central finite
differences at seeded random coordinates.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

from .autodiff import GradCheckResult, grad_check
from .config import TrainConfig
from .data import Dataset, generate_shapes_world, generate_shapes_video
from .model import build_model
from .objectives import BatchRngs, total_loss
from .text import Vocab

import numpy as np


def tiny_config(vocab_size: int = 32) -> TrainConfig:
    return TrainConfig(dim=32, proj_dim=16, vision_layers=1, text_layers=1,
                       fusion_layers=1, attn_heads=4, patch_size=8, image_size=32,
                       max_text_len=12, vocab_size=vocab_size, dtype="float64",
                       batch_size=4, total_steps=10, warmup_steps=1, seed=11,
                       max_annotations_per_sample=2, frames_per_step=2, max_frames=4)


def padded_vocab(vocab: Vocab, size: int) -> Vocab:
    """Extend a vocab with filler words so model width hits a target."""
    if len(vocab) > size:
        raise ValueError(f"vocab already exceeds {size} tokens")
    extra = [f"filler{i}" for i in range(size - len(vocab))]
    return Vocab(list(vocab.tokens) + extra)


def build_tiny_fixture(seed: int = 11):
    """(model, mixed 4-sample batch, vocab, config) for gradient checks."""
    cfg = tiny_config()
    with tempfile.TemporaryDirectory() as tmp:
        img_dir = generate_shapes_world(seed, 8, Path(tmp) / "img", image_size=32,
                                        grid=2, patch_size=8)
        vid_dir = generate_shapes_video(seed + 1, 2, Path(tmp) / "vid", image_size=32,
                                        grid=4, patch_size=8, frames=3)
        images = Dataset.load(img_dir)
        videos = Dataset.load(vid_dir)
    vocab = padded_vocab(images.vocab, cfg.vocab_size)

    full = next(s for s in images.samples if s.caption and s.annotations)
    caption_only = next(s for s in images.samples if s.caption)
    # Derive an annotation-only sample (caption withheld) from another record.
    donor = next(s for s in images.samples if s.annotations and s is not full)
    annotation_only = type(donor)(donor.source_id + "_ann", donor.frames, None,
                                  donor.annotations)
    batch = [full, caption_only, annotation_only, videos.samples[0]]

    model = build_model(cfg, len(vocab))
    return model, batch, vocab, cfg


def full_loss_grad_check(max_coords: int = 500, epsilon: float = 1e-4,
                         seed: int = 11) -> GradCheckResult:
    """Gradient-check the total mixed-batch objective on the tiny model.

    The default epsilon balances central-difference truncation against
    float64 evaluation noise for this loss's gradient range.
    """
    model, batch, vocab, cfg = build_tiny_fixture(seed)

    def loss():
        # Fresh generators per call keep the stochastic choices (frame
        # sampling, masking, hard negatives) frozen across evaluations.
        return total_loss(model, batch, vocab, cfg, BatchRngs(cfg.seed, 0))[0]

    rng = np.random.default_rng(seed)
    return grad_check(loss, model.parameters(), epsilon=epsilon,
                      max_coords=max_coords, rng=rng)
