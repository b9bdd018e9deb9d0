"""The four pre-training losses and their sum over a mixed batch.

Aligning pulls concept and text summaries together three ways: in-batch
contrastive with a learnable temperature, pair matching against sampled
hard negatives, and masked-token prediction conditioned on the concept.
Localization regresses each concept's box from the fused summary of the
whole image and the concept's text, with an l1 + (1 - GIoU) loss.

Each term is averaged over the sub-batch that supports it; terms with no
support contribute zero and a zero count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import text as text_mod
from .autodiff import NonFiniteError, Tensor
from .fusion import cls_of
from .vision import BoundingBox, concept_patch_ids

GEOM_EPS = 1e-7


class _TermScope:
    """Names the loss term (or shared stage) inside non-finite errors."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None and issubclass(exc_type, NonFiniteError):
            raise NonFiniteError(f"[{self.name}] {exc}") from exc
        return False


# --------------------------------------------------------------------------
# Box geometry (float path, used by evaluation and as the loss oracle)
# --------------------------------------------------------------------------

def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(min(ax2, bx2) - max(ax1, bx1), 0.0)
    ih = max(min(ay2, by2) - max(ay1, by1), 0.0)
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def giou(a: BoundingBox, b: BoundingBox) -> float:
    """Generalized IoU in (-1, 1]: IoU minus the dead fraction of the
    smallest enclosing box."""
    if a.area() <= 0 or b.area() <= 0:
        raise ValueError("giou: degenerate zero-area box")
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(min(ax2, bx2) - max(ax1, bx1), 0.0)
    ih = max(min(ay2, by2) - max(ay1, by1), 0.0)
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    enclosing = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter / union - (enclosing - union) / enclosing


# --------------------------------------------------------------------------
# Box regression (differentiable path)
# --------------------------------------------------------------------------

def _corners_tensor(boxes: Tensor):
    """(M, 4) center-form boxes -> four (M, 1) corner columns, unclamped
    so the gradient survives predictions that spill past the image."""
    cx = ad.take(boxes, [0], axis=1)
    cy = ad.take(boxes, [1], axis=1)
    w = ad.take(boxes, [2], axis=1)
    h = ad.take(boxes, [3], axis=1)
    return (ad.sub(cx, ad.mul(w, 0.5)), ad.sub(cy, ad.mul(h, 0.5)),
            ad.add(cx, ad.mul(w, 0.5)), ad.add(cy, ad.mul(h, 0.5)))


def giou_tensor(pred: Tensor, target: Tensor) -> Tensor:
    """(M, 4) x (M, 4) -> (M, 1) generalized IoU values."""
    ax1, ay1, ax2, ay2 = _corners_tensor(pred)
    bx1, by1, bx2, by2 = _corners_tensor(target)
    iw = ad.maximum(ad.sub(ad.minimum(ax2, bx2), ad.maximum(ax1, bx1)), 0.0)
    ih = ad.maximum(ad.sub(ad.minimum(ay2, by2), ad.maximum(ay1, by1)), 0.0)
    inter = ad.mul(iw, ih)
    area_a = ad.mul(ad.sub(ax2, ax1), ad.sub(ay2, ay1))
    area_b = ad.mul(ad.sub(bx2, bx1), ad.sub(by2, by1))
    union = ad.sub(ad.add(area_a, area_b), inter)
    enc = ad.mul(ad.sub(ad.maximum(ax2, bx2), ad.minimum(ax1, bx1)),
                 ad.sub(ad.maximum(ay2, by2), ad.minimum(ay1, by1)))
    return ad.sub(ad.div(inter, ad.add(union, GEOM_EPS)),
                  ad.div(ad.sub(enc, union), ad.add(enc, GEOM_EPS)))


def box_loss(pred: Tensor, target) -> Tensor:
    """Per-box (1 - GIoU) + l1 distance, averaged over the batch."""
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.data.dtype))
    giou_term = ad.sub(1.0, giou_tensor(pred, t))
    l1_term = ad.sum_(ad.abs_(ad.sub(pred, t)), axis=1, keepdims=True)
    return ad.mean(ad.add(giou_term, l1_term))


# --------------------------------------------------------------------------
# Contrastive / matching / MLM
# --------------------------------------------------------------------------

def info_nce(logits: Tensor) -> Tensor:
    """Mean row-wise cross-entropy against the identity target."""
    n = logits.shape[0]
    return ad.cross_entropy(logits, np.eye(n, dtype=logits.data.dtype))


def similarity_logits(v_cls: Tensor, w_cls: Tensor, heads) -> Tensor:
    """Temperature-scaled similarity matrix of projected summaries."""
    v = heads.project_vision(v_cls)
    w = heads.project_text(w_cls)
    return ad.div(ad.matmul(v, ad.swap_last_axes(w)), heads.temperature())


def contrastive_loss(v_cls: Tensor, w_cls: Tensor, heads) -> Tensor:
    """Symmetric in-batch contrastive loss; row i pairs with column i."""
    if v_cls.shape[0] == 0:
        raise ValueError("contrastive loss over an empty batch")
    logits = similarity_logits(v_cls, w_cls, heads)
    return ad.mul(ad.add(info_nce(logits), info_nce(ad.swap_last_axes(logits))), 0.5)


def sample_hard_negatives(similarities: np.ndarray, tau: float,
                          rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """For each concept, sample a text index j != i with probability
    proportional to exp(S[i, j] / tau), and symmetrically a concept per
    text. Near-misses are over-sampled by construction."""
    n = similarities.shape[0]
    if n < 2:
        raise ValueError("hard negatives need at least two in-batch pairs")

    def sample_rows(mat: np.ndarray) -> np.ndarray:
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            row = mat[i] / tau
            row[i] = -np.inf
            row -= row.max()
            p = np.exp(row)
            p /= p.sum()
            out[i] = rng.choice(n, p=p)
        return out

    neg_text = sample_rows(similarities.copy())
    neg_concept = sample_rows(similarities.T.copy())
    return neg_text, neg_concept


def matching_loss(match_logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean two-way cross-entropy; labels are 1 for matched pairs."""
    n = match_logits.shape[0]
    target = np.zeros((n, 2), dtype=match_logits.data.dtype)
    target[np.arange(n), labels] = 1.0
    return ad.cross_entropy(match_logits, target)


def masked_token_loss(token_logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over masked positions only; zero when empty.

    token_logits: (B, L, |V|); labels: (B, L) original ids at masked
    positions and -1 elsewhere.
    """
    rows = np.nonzero(labels.reshape(-1) >= 0)[0]
    if len(rows) == 0:
        return Tensor(np.zeros((), dtype=token_logits.data.dtype))
    vocab = token_logits.shape[-1]
    flat = ad.reshape(token_logits, (token_logits.data.size // vocab, vocab))
    picked = ad.take(flat, rows, axis=0)
    target = np.zeros((len(rows), vocab), dtype=token_logits.data.dtype)
    target[np.arange(len(rows)), labels.reshape(-1)[rows]] = 1.0
    return ad.cross_entropy(picked, target)


# --------------------------------------------------------------------------
# Mixed-batch orchestration
# --------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    cl: float = 0.0
    match: float = 0.0
    mlm: float = 0.0
    bbox: float = 0.0
    total: float = 0.0
    counts: dict = field(default_factory=dict)


@dataclass
class _Pair:
    sample_idx: int
    tokens: "text_mod.TokenSequence"
    patch_ids: np.ndarray
    box: BoundingBox | None
    in_align: bool
    in_bbox: bool


class BatchRngs:
    """Seeded per-step generators, one stream per stochastic purpose."""

    FRAMES, ANNOTATIONS, MASKING, NEGATIVES = 1, 2, 3, 4

    def __init__(self, seed: int, step: int):
        self.seed, self.step = seed, step

    def get(self, purpose: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence(self.seed, spawn_key=(self.step, purpose)))


def total_loss(model, samples, vocab, cfg, rngs: BatchRngs):
    """Compute the combined objective for a mixed batch.

    Returns (total tensor, LossBreakdown). Raises if the batch supports
    no loss term at all.
    """
    if not samples:
        raise ValueError("empty batch")
    grid = model.vision.grid
    n_patches = grid * grid
    dtype = model.dtype

    # --- encode all media (images and sampled video frames) in one pass
    frames_rng = rngs.get(BatchRngs.FRAMES)
    stack: list[np.ndarray] = []
    frame_rows: list[np.ndarray] = []
    for s in samples:
        total_frames = len(s.frames)
        if total_frames == 1:
            idx = np.array([0])
        elif total_frames <= cfg.frames_per_step:
            idx = np.arange(total_frames)
        else:
            idx = np.sort(frames_rng.choice(total_frames, size=cfg.frames_per_step,
                                            replace=False))
        frame_rows.append(np.arange(len(stack), len(stack) + len(idx)))
        stack.extend(s.frames[i] for i in idx)
    feats_all = model.vision.encode_batch(np.stack(stack))

    # --- per-sample base features (videos pooled over frames)
    per_sample: list[Tensor] = []
    for s, rows in zip(samples, frame_rows):
        if len(rows) == 1 and not s.is_video:
            per_sample.append(ad.take(feats_all, [int(rows[0])], axis=0))
        else:
            frames_feats = ad.take(feats_all, rows, axis=0)
            pooled = model.vision.encode_frames(frames_feats, len(rows))
            per_sample.append(ad.reshape(pooled, (1, n_patches, model.dim)))
    sample_feats = per_sample[0] if len(per_sample) == 1 else ad.concat(per_sample, axis=0)

    # whole-media concept sequence per sample: mean summary + all patches
    whole_cls = ad.mean(sample_feats, axis=1, keepdims=True)
    whole_seq = ad.concat([whole_cls, sample_feats], axis=1)

    # --- assemble aligning/localization pairs
    ann_rng = rngs.get(BatchRngs.ANNOTATIONS)
    pairs: list[_Pair] = []
    whole_ids = np.arange(n_patches, dtype=np.int64)
    for i, s in enumerate(samples):
        if s.caption:
            pairs.append(_Pair(i, text_mod.tokenize(s.caption, vocab, cfg.max_text_len),
                               whole_ids, None, True, False))
        anns = s.annotations
        if len(anns) > cfg.max_annotations_per_sample > 0:
            keep = np.sort(ann_rng.choice(len(anns), size=cfg.max_annotations_per_sample,
                                          replace=False))
            anns = [anns[int(k)] for k in keep]
        for ann in anns:
            pairs.append(_Pair(i, text_mod.tokenize(ann.text, vocab, cfg.max_text_len),
                               concept_patch_ids(ann.box, grid), ann.box,
                               cfg.enable_concept_align, not s.is_video))
    if not pairs:
        raise ValueError("batch supports no loss terms")

    # --- batched concept features: gather padded patch subsets, prepend mean
    k_max = max(len(p.patch_ids) for p in pairs)
    gather_idx = np.zeros((len(pairs), k_max), dtype=np.int64)
    patch_mask = np.zeros((len(pairs), k_max), dtype=np.float32)
    for r, p in enumerate(pairs):
        k = len(p.patch_ids)
        gather_idx[r, :k] = p.sample_idx * n_patches + p.patch_ids
        patch_mask[r, :k] = 1.0
    flat_feats = ad.reshape(sample_feats, (len(samples) * n_patches, model.dim))
    picked = ad.take(flat_feats, gather_idx, axis=0)         # (Np, Kmax, D)
    mask3 = patch_mask[:, :, None]
    counts = patch_mask.sum(axis=1)[:, None, None]
    concept_cls = ad.div(ad.sum_(ad.mul(picked, Tensor(mask3.astype(dtype))), axis=1, keepdims=True),
                         Tensor(counts.astype(dtype)))
    concept_seq = ad.concat([concept_cls, ad.mul(picked, Tensor(mask3.astype(dtype)))], axis=1)
    concept_mask = np.concatenate([np.ones((len(pairs), 1), dtype=np.float32), patch_mask], axis=1)
    v_cls = ad.reshape(concept_cls, (len(pairs), model.dim))

    # --- encode pair texts (unmasked)
    text_feats, text_ids, text_mask = model.text.encode_batch([p.tokens for p in pairs])
    w_cls = cls_of(text_feats)

    align_idx = np.array([r for r, p in enumerate(pairs) if p.in_align], dtype=np.int64)
    bbox_idx = np.array([r for r, p in enumerate(pairs) if p.in_bbox], dtype=np.int64)

    terms: dict[str, Tensor] = {}
    breakdown = LossBreakdown(counts={"cl": 0, "match": 0, "mlm": 0, "bbox": 0})

    def _sub3(t: Tensor, idx: np.ndarray) -> Tensor:
        return ad.take(t, idx, axis=0)

    n_align = len(align_idx)
    sim_logits = None
    if n_align >= 1 and (cfg.enable_contrastive or cfg.enable_match):
        sim_logits = similarity_logits(_sub3(v_cls, align_idx), _sub3(w_cls, align_idx),
                                       model.heads)

    if cfg.enable_contrastive and n_align >= 1:
        with _TermScope("contrastive"):
            cl = ad.mul(ad.add(info_nce(sim_logits),
                               info_nce(ad.swap_last_axes(sim_logits))), 0.5)
        terms["cl"] = cl
        breakdown.counts["cl"] = n_align

    if cfg.enable_match and n_align >= 2:
        with _TermScope("matching"):
            neg_rng = rngs.get(BatchRngs.NEGATIVES)
            neg_text, neg_concept = sample_hard_negatives(sim_logits.data.copy(), 1.0, neg_rng)
            order = np.arange(n_align)
            text_rows = align_idx[np.concatenate([order, neg_text, order])]
            vis_rows = align_idx[np.concatenate([order, order, neg_concept])]
            fused = model.fusion.fuse(_sub3(text_feats, text_rows), _sub3(concept_seq, vis_rows),
                                      text_mask[text_rows], concept_mask[vis_rows])
            labels = np.concatenate([np.ones(n_align, dtype=np.int64),
                                     np.zeros(2 * n_align, dtype=np.int64)])
            terms["match"] = matching_loss(model.heads.predict_match(cls_of(fused)), labels)
        breakdown.counts["match"] = 3 * n_align

    if cfg.enable_mlm and n_align >= 1:
        with _TermScope("mlm"):
            mask_rng = rngs.get(BatchRngs.MASKING)
            corrupted = text_ids.copy()
            labels = np.full_like(text_ids, text_mod.LABEL_IGNORE)
            for r in align_idx:
                masked = text_mod.mask_tokens(pairs[r].tokens, cfg.mask_prob,
                                              len(vocab), mask_rng)
                corrupted[r, :len(masked.ids)] = masked.ids
                labels[r, :len(masked.labels)] = masked.labels
            n_masked = int((labels >= 0).sum())
            if n_masked > 0:
                masked_feats = model.text.encode_ids(corrupted[align_idx], text_mask[align_idx])
                fused = model.fusion.fuse(masked_feats, _sub3(concept_seq, align_idx),
                                          text_mask[align_idx], concept_mask[align_idx])
                terms["mlm"] = masked_token_loss(model.heads.predict_mlm(fused),
                                                 labels[align_idx])
                breakdown.counts["mlm"] = n_masked

    if cfg.enable_bbox and len(bbox_idx) > 0:
        with _TermScope("bbox"):
            owners = np.array([pairs[r].sample_idx for r in bbox_idx], dtype=np.int64)
            whole_mask = np.ones((len(bbox_idx), n_patches + 1), dtype=np.float32)
            fused = model.fusion.fuse(_sub3(text_feats, bbox_idx), _sub3(whole_seq, owners),
                                      text_mask[bbox_idx], whole_mask)
            pred = model.heads.predict_box(cls_of(fused))
            targets = np.array([[pairs[r].box.cx, pairs[r].box.cy, pairs[r].box.w, pairs[r].box.h]
                                for r in bbox_idx], dtype=dtype)
            terms["bbox"] = box_loss(pred, targets)
        breakdown.counts["bbox"] = len(bbox_idx)

    if not terms:
        raise ValueError("batch supports no loss terms")

    total = None
    for name, t in terms.items():
        setattr(breakdown, name, float(t.data))
        total = t if total is None else ad.add(total, t)
    breakdown.total = float(total.data)
    return total, breakdown
