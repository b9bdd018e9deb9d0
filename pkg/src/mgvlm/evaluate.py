"""Evaluation: two-stage retrieval, box grounding, and masked-word
accuracy against shapes-world ground truth.

Stage 1 of retrieval ranks every candidate by projected-summary
similarity; stage 2 re-ranks the top-k with the fusion matching head.
All rankings break ties by candidate id, so results are deterministic
regardless of encoding order. Evaluation never mutates parameters.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset, Sample
from .fusion import cls_of
from .objectives import box_iou
from .text import tokenize
from .vision import BoundingBox, VideoClip

_CHUNK = 512


def _encode_media(model, samples: list[Sample], eval_frames: int):
    """Whole-media features for each sample: (N, P, D) values plus the
    (N, D) mean summaries, as plain arrays."""
    feats = []
    for chunk_start in range(0, len(samples), _CHUNK):
        chunk = samples[chunk_start:chunk_start + _CHUNK]
        images = [s.frames[0] for s in chunk if not s.is_video]
        image_rows = [i for i, s in enumerate(chunk) if not s.is_video]
        out = [None] * len(chunk)
        if images:
            enc = model.vision.encode_batch(np.stack(images)).data
            for row, arr in zip(image_rows, enc):
                out[row] = arr
        for i, s in enumerate(chunk):
            if s.is_video:
                clip = VideoClip(s.frames, list(s.timestamps))
                out[i] = model.vision.encode_video(clip, eval_frames, rng=None).features.data
        feats.extend(out)
    feats = np.stack(feats)
    return feats, feats.mean(axis=1)


def _encode_texts(model, texts: list[str], vocab, max_len: int):
    """(N, L, D) features, summaries, padded ids, and masks."""
    seqs = [tokenize(t, vocab, max_len) for t in texts]
    all_feats, all_cls, all_ids, all_masks = [], [], [], []
    ids_full, mask_full = model.text.pad_batch(seqs)
    for start in range(0, len(seqs), _CHUNK):
        ids = ids_full[start:start + _CHUNK]
        mask = mask_full[start:start + _CHUNK]
        feats = model.text.encode_ids(ids, mask).data
        all_feats.append(feats)
        all_cls.append(feats[:, 0])
        all_ids.append(ids)
        all_masks.append(mask)
    return (np.concatenate(all_feats), np.concatenate(all_cls),
            np.concatenate(all_ids), np.concatenate(all_masks))


def _whole_seq(media_feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cls = media_feats.mean(axis=1, keepdims=True)
    seq = np.concatenate([cls, media_feats], axis=1)
    mask = np.ones(seq.shape[:2], dtype=np.float32)
    return seq, mask


def _match_probs(model, text_feats, text_mask, vision_seq, vision_mask) -> np.ndarray:
    """Matching probability for row-aligned (text, vision) pairs."""
    probs = []
    for start in range(0, len(text_feats), _CHUNK):
        sl = slice(start, start + _CHUNK)
        fused = model.fusion.fuse(Tensor(text_feats[sl]), Tensor(vision_seq[sl]),
                                  text_mask[sl], vision_mask[sl])
        logits = model.heads.predict_match(cls_of(fused))
        probs.append(ad.softmax(logits, axis=-1).data[:, 1])
    return np.concatenate(probs)


def _rank_desc(scores: np.ndarray) -> np.ndarray:
    """Indices sorted by descending score, ties broken by ascending id."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    return order


@dataclass
class RetrievalResult:
    stage1_t2v: np.ndarray        # (N, N) candidate ids per text query
    stage1_v2t: np.ndarray
    stage2_t2v: np.ndarray        # (N, k) re-ranked top-k
    stage2_v2t: np.ndarray
    recalls: dict = field(default_factory=dict)
    k: int = 0

    def recall(self, direction: str, m: int) -> float:
        return self.recalls[direction][m]


def eval_retrieval(model, dataset: Dataset, k: int = 8,
                   eval_frames: int = 5, recall_at=(1, 5, 10)) -> RetrievalResult:
    """Two-stage retrieval over the dataset's (media, caption) pairs.

    Gold for query i is candidate i, so pairings must be unique; stage 2
    only permutes each query's stage-1 top-k.
    """
    paired = [s for s in dataset.samples if s.caption]
    if len(paired) < 2:
        raise ValueError("retrieval needs at least two captioned samples")
    captions = [s.caption for s in paired]
    if len(set(captions)) != len(captions):
        raise ValueError("retrieval dataset must have unique (media, caption) pairing")
    n = len(paired)
    if k > n:
        warnings.warn(f"retrieval k={k} exceeds {n} candidates; clamping")
        k = n

    media_feats, media_cls = _encode_media(model, paired, eval_frames)
    text_feats, text_cls, _, text_mask = _encode_texts(
        model, captions, dataset.vocab, model.text.max_len)
    v = model.heads.project_vision(Tensor(media_cls)).data
    w = model.heads.project_text(Tensor(text_cls)).data
    sims = v @ w.T  # rows: media, cols: texts

    stage1_t2v = np.stack([_rank_desc(sims[:, j]) for j in range(n)])
    stage1_v2t = np.stack([_rank_desc(sims[i, :]) for i in range(n)])

    vision_seq, vision_mask = _whole_seq(media_feats)

    def rerank(stage1: np.ndarray, query_is_text: bool) -> np.ndarray:
        top = stage1[:, :k]                              # (n, k)
        q_idx = np.repeat(np.arange(n), k)
        c_idx = top.reshape(-1)
        t_rows = q_idx if query_is_text else c_idx
        v_rows = c_idx if query_is_text else q_idx
        probs = _match_probs(model, text_feats[t_rows], text_mask[t_rows],
                             vision_seq[v_rows], vision_mask[v_rows]).reshape(n, k)
        out = np.empty_like(top)
        for q in range(n):
            order = np.lexsort((top[q], -probs[q]))
            out[q] = top[q][order]
        return out

    stage2_t2v = rerank(stage1_t2v, query_is_text=True)
    stage2_v2t = rerank(stage1_v2t, query_is_text=False)

    def recall_table(stage1: np.ndarray, stage2: np.ndarray) -> dict:
        ranked = np.concatenate([stage2, stage1[:, k:]], axis=1)
        gold_rank = np.array([int(np.nonzero(ranked[q] == q)[0][0]) for q in range(n)])
        return {m: float(np.mean(gold_rank < m)) for m in recall_at}

    recalls = {"t2v": recall_table(stage1_t2v, stage2_t2v),
               "v2t": recall_table(stage1_v2t, stage2_v2t)}
    return RetrievalResult(stage1_t2v, stage1_v2t, stage2_t2v, stage2_v2t, recalls, k)


@dataclass
class GroundingInstance:
    source_id: str
    predicted: BoundingBox
    gold: BoundingBox
    iou: float


@dataclass
class GroundingResult:
    instances: list[GroundingInstance]
    mean_iou: float
    accuracy_at_half: float
    skipped: int


def eval_grounding(model, dataset: Dataset, eval_frames: int = 5) -> GroundingResult:
    """Predict each annotation's box from the whole image plus the
    annotation text; report mean IoU and accuracy at IoU >= 0.5."""
    samples, texts, golds, owner_ids = [], [], [], []
    skipped = 0
    for s in dataset.samples:
        if not s.annotations or s.is_video:
            skipped += 1
            continue
        for ann in s.annotations:
            samples.append(s)
            texts.append(ann.text)
            golds.append(ann.box)
            owner_ids.append(s.source_id)
    if not texts:
        raise ValueError("grounding needs at least one annotated image sample")

    unique: dict[str, int] = {}
    rows = []
    uniq_samples = []
    for s in samples:
        if s.source_id not in unique:
            unique[s.source_id] = len(uniq_samples)
            uniq_samples.append(s)
        rows.append(unique[s.source_id])
    media_feats, _ = _encode_media(model, uniq_samples, eval_frames)
    vision_seq, vision_mask = _whole_seq(media_feats)
    text_feats, _, _, text_mask = _encode_texts(model, texts, dataset.vocab,
                                                model.text.max_len)
    rows = np.array(rows)

    preds = []
    for start in range(0, len(texts), _CHUNK):
        sl = slice(start, start + _CHUNK)
        fused = model.fusion.fuse(Tensor(text_feats[sl]), Tensor(vision_seq[rows[sl]]),
                                  text_mask[sl], vision_mask[rows[sl]])
        preds.append(model.heads.predict_box(cls_of(fused)).data)
    preds = np.concatenate(preds)

    instances = []
    for (cx, cy, w, h), gold, sid in zip(preds, golds, owner_ids):
        pred_box = BoundingBox(float(cx), float(cy), float(w), float(h))
        instances.append(GroundingInstance(sid, pred_box, gold, box_iou(pred_box, gold)))
    ious = np.array([inst.iou for inst in instances])
    return GroundingResult(instances, float(ious.mean()),
                           float((ious >= 0.5).mean()), skipped)


def eval_masked_words(model, dataset: Dataset, focus_words: set[str] | None = None,
                      eval_frames: int = 5) -> dict:
    """Leave-one-out masked-word accuracy over captions: each word
    position is masked alone and predicted from the fused features.
    Reports overall accuracy plus accuracy restricted to focus_words."""
    from .text import MASK

    paired = [s for s in dataset.samples if s.caption]
    if not paired:
        raise ValueError("masked-word evaluation needs captioned samples")
    media_feats, _ = _encode_media(model, paired, eval_frames)
    vision_seq, vision_mask = _whole_seq(media_feats)

    seqs = [tokenize(s.caption, dataset.vocab, model.text.max_len) for s in paired]
    ids_full, mask_full = model.text.pad_batch(seqs)
    probe_ids, probe_mask, probe_vision, positions, originals = [], [], [], [], []
    for i, seq in enumerate(seqs):
        for pos in range(1, len(seq.ids)):
            corrupted = ids_full[i].copy()
            originals.append(int(corrupted[pos]))
            corrupted[pos] = MASK
            probe_ids.append(corrupted)
            probe_mask.append(mask_full[i])
            probe_vision.append(i)
            positions.append(pos)
    probe_ids = np.stack(probe_ids)
    probe_mask = np.stack(probe_mask)
    probe_vision = np.array(probe_vision)
    positions = np.array(positions)
    originals = np.array(originals)

    predictions = np.empty(len(positions), dtype=np.int64)
    for start in range(0, len(positions), _CHUNK):
        sl = slice(start, start + _CHUNK)
        feats = model.text.encode_ids(probe_ids[sl], probe_mask[sl])
        fused = model.fusion.fuse(feats, Tensor(vision_seq[probe_vision[sl]]),
                                  probe_mask[sl], vision_mask[probe_vision[sl]])
        logits = model.heads.predict_mlm(fused).data
        predictions[sl] = logits[np.arange(logits.shape[0]), positions[sl]].argmax(axis=1)

    correct = predictions == originals
    result = {"accuracy": float(correct.mean()), "count": int(len(correct))}
    if focus_words:
        focus_ids = {dataset.vocab.id(wd) for wd in focus_words}
        sel = np.array([int(o) in focus_ids for o in originals])
        if sel.any():
            result["focus_accuracy"] = float(correct[sel].mean())
            result["focus_count"] = int(sel.sum())
    return result
