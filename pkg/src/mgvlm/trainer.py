"""Mixed-objective training loop with warmup + linear-decay schedule,
module-partitioned binary checkpoints, and text-module replacement.

Determinism contract: every stochastic draw at step t comes from a
generator keyed by (config seed, t, purpose), so an interrupted run
resumed from a checkpoint at step k reproduces the uninterrupted run's
parameters at every later step bit-exactly.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError, Tensor
from .config import TrainConfig, config_from_dict
from .data import Dataset, assemble_batch
from .model import Model, build_model
from .objectives import BatchRngs, LossBreakdown, total_loss
from .text import TextEncoder, Vocab

MAGIC = b"MGVLMCKP"
CKPT_VERSION = 1
BATCH_STREAM = 301   # spawn key for batch assembly
SWAP_STREAM = 303    # spawn key for replacement text-module init

# Run-location fields normalized out of checkpoint snapshots so identical
# training runs produce bit-identical files regardless of where they live.
_LOCATION_FIELDS = ("out_dir", "resume", "init_from")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> peak over the warmup steps, then linear decay to
    0 at the final step."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    if step >= cfg.total_steps:
        return 0.0
    return cfg.peak_lr * (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)


class AdamW:
    """Adaptive moments with decoupled weight decay; decay is applied to
    matrices only (embeddings and projections), not to biases, norm
    parameters, or the temperature."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.98, eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data -= (lr * update).astype(p.data.dtype)


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global l2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


# --------------------------------------------------------------------------
# Checkpoints: little-endian binary with a structured-text manifest
# --------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    step: int
    vocab_tokens: list[str]
    tensors: dict[str, np.ndarray]
    opt_state: dict | None = None  # {"t": int, "m": {...}, "v": {...}}


_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _tensor_section(tensors: dict[str, np.ndarray], offset: int):
    entries, blobs = [], []
    for name in sorted(tensors):
        arr = tensors[name]
        dtype = "float64" if arr.dtype == np.float64 else "float32"
        blob = np.ascontiguousarray(arr).astype(_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    return entries, blobs, offset


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    snapshot = ckpt.config.to_dict()
    for key in _LOCATION_FIELDS:
        snapshot[key] = ""
    entries, blobs, offset = _tensor_section(ckpt.tensors, 0)
    manifest = {"config": snapshot, "step": ckpt.step, "vocab": ckpt.vocab_tokens,
                "tensors": entries, "optimizer": None}
    if ckpt.opt_state is not None:
        slot_tensors = {f"m.{n}": a for n, a in ckpt.opt_state["m"].items()}
        slot_tensors.update({f"v.{n}": a for n, a in ckpt.opt_state["v"].items()})
        slot_entries, slot_blobs, offset = _tensor_section(slot_tensors, offset)
        manifest["optimizer"] = {"t": ckpt.opt_state["t"], "slots": slot_entries}
        blobs.extend(slot_blobs)
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header = MAGIC + struct.pack("<IQ", CKPT_VERSION, len(manifest_bytes))
    return header + manifest_bytes + b"".join(blobs)


def checkpoint_from_bytes(raw: bytes) -> Checkpoint:
    if raw[:8] != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, manifest_len = struct.unpack("<IQ", raw[8:20])
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    manifest = json.loads(raw[20:20 + manifest_len].decode("utf-8"))
    payload = raw[20 + manifest_len:]

    def read_entries(entries):
        out = {}
        for e in entries:
            buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
            arr = np.frombuffer(buf, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
            out[e["name"]] = arr.astype(e["dtype"], copy=True)
        return out

    tensors = read_entries(manifest["tensors"])
    opt_state = None
    if manifest["optimizer"] is not None:
        slots = read_entries(manifest["optimizer"]["slots"])
        opt_state = {"t": manifest["optimizer"]["t"],
                     "m": {n[2:]: a for n, a in slots.items() if n.startswith("m.")},
                     "v": {n[2:]: a for n, a in slots.items() if n.startswith("v.")}}
    return Checkpoint(config_from_dict(manifest["config"]), manifest["step"],
                      manifest["vocab"], tensors, opt_state)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Atomic write: serialize to a sibling temp file, then rename."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_to_bytes(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


def checkpoint_from_model(model: Model, cfg: TrainConfig, step: int,
                          vocab: Vocab, optimizer: AdamW | None = None) -> Checkpoint:
    tensors = {n: p.data.copy() for n, p in model.named_parameters()}
    opt_state = None
    if optimizer is not None:
        opt_state = {"t": optimizer.t,
                     "m": {n: a.copy() for n, a in optimizer.m.items()},
                     "v": {n: a.copy() for n, a in optimizer.v.items()}}
    return Checkpoint(cfg, step, list(vocab.tokens), tensors, opt_state)


def load_into_model(ckpt: Checkpoint, model: Model) -> None:
    """Copy checkpoint tensors into a built model, validating shapes."""
    params = model.param_dict()
    missing = set(params) - set(ckpt.tensors)
    extra = set(ckpt.tensors) - set(params)
    if missing or extra:
        raise ValueError(f"checkpoint/model parameter mismatch: missing={sorted(missing)} "
                         f"extra={sorted(extra)}")
    for name, p in params.items():
        src = ckpt.tensors[name]
        if tuple(src.shape) != tuple(p.data.shape):
            raise ValueError(f"shape mismatch for {name}: checkpoint {tuple(src.shape)} "
                             f"vs model {tuple(p.data.shape)}")
        p.data = src.astype(p.data.dtype, copy=True)


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[Model, Vocab]:
    vocab = Vocab(list(ckpt.vocab_tokens))
    model = build_model(ckpt.config, len(vocab))
    load_into_model(ckpt, model)
    return model, vocab


# --------------------------------------------------------------------------
# Text-module replacement
# --------------------------------------------------------------------------

def fresh_text_parameters(cfg: TrainConfig, vocab_size: int, seed: int) -> dict[str, np.ndarray]:
    """Randomly initialized text-module tensors for a replacement vocab."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(SWAP_STREAM,)))
    dtype = np.float64 if cfg.dtype == "float64" else np.float32
    enc = TextEncoder(vocab_size, cfg.max_text_len, cfg.dim, cfg.text_layers,
                      cfg.attn_heads, cfg.ffn_ratio, rng, dtype)
    return {f"text.{n}": p.data.copy() for n, p in enc.named_parameters()}


def swap_text_module(ckpt: Checkpoint, text_tensors: dict[str, np.ndarray],
                     vocab_tokens: list[str]) -> Checkpoint:
    """Replace `text.*` tensors and the vocab; everything else, including
    the step counter, is carried over bit-identically. Optimizer state is
    dropped (its moments describe the old text module)."""
    reference = fresh_text_parameters(ckpt.config, len(vocab_tokens), seed=0)
    if set(text_tensors) != set(reference):
        raise ValueError(f"replacement text parameters do not match the text module: "
                         f"expected {sorted(reference)}")
    for name, arr in text_tensors.items():
        if tuple(arr.shape) != tuple(reference[name].shape):
            raise ValueError(f"dimension mismatch for {name}: got {tuple(arr.shape)}, "
                             f"expected {tuple(reference[name].shape)}")
    tensors = {n: a.copy() for n, a in ckpt.tensors.items() if not n.startswith("text.")}
    tensors.update({n: a.copy() for n, a in text_tensors.items()})
    new_cfg = config_from_dict({**ckpt.config.to_dict(), "vocab_size": len(vocab_tokens)})
    return Checkpoint(new_cfg, ckpt.step, list(vocab_tokens), tensors, None)


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------

def batch_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(step, BATCH_STREAM)))


def train_step(model: Model, optimizer: AdamW, samples, vocab: Vocab,
               cfg: TrainConfig, step: int) -> LossBreakdown:
    """One forward over all supported sub-objectives, one backward, one
    clipped optimizer update at the scheduled learning rate."""
    model.zero_grad()
    total, breakdown = total_loss(model, samples, vocab, cfg, BatchRngs(cfg.seed, step))
    try:
        total.backward()
    except NonFiniteError as err:
        raise NonFiniteError(f"step {step}: non-finite gradient "
                             f"(losses: {breakdown})") from err
    clip_gradients(model.param_dict(), cfg.grad_clip)
    optimizer.step(lr_at(step, cfg))
    return breakdown


def load_mix(cfg: TrainConfig) -> list[tuple[Dataset, float]]:
    """Resolve the config's data/mix fields into loaded datasets."""
    entries = []
    if cfg.mix:
        for part in cfg.mix.split(","):
            part = part.strip()
            if not part:
                continue
            if ":" in part:
                path, weight = part.rsplit(":", 1)
                entries.append((path, float(weight)))
            else:
                entries.append((part, 1.0))
    elif cfg.data:
        entries.append((cfg.data, 1.0))
    else:
        raise ValueError("config must set data or mix")
    return [(Dataset.load(path), weight) for path, weight in entries]


def _append_eval_record(path, model, dataset, cfg: TrainConfig, step: int) -> None:
    from .evaluate import eval_grounding, eval_retrieval

    record = {"step": step}
    try:
        retr = eval_retrieval(model, dataset, k=cfg.eval_k,
                              eval_frames=cfg.eval_frames)
        record["t2v_r1"] = retr.recall("t2v", 1)
        record["v2t_r1"] = retr.recall("v2t", 1)
    except ValueError:
        pass
    try:
        grounding = eval_grounding(model, dataset, eval_frames=cfg.eval_frames)
        record["mean_iou"] = grounding.mean_iou
        record["acc_at_half"] = grounding.accuracy_at_half
    except ValueError:
        pass
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def train(cfg: TrainConfig, log_hook=None) -> Path:
    """Run the configured training job; returns the final checkpoint path.

    Writes a line-delimited training log (step, lr, and the loss
    breakdown), evaluation metrics every eval_every steps, and periodic
    plus final checkpoints under cfg.out_dir.
    """
    cfg.validate()
    mix = load_mix(cfg)
    vocab = mix[0][0].vocab
    for ds, _ in mix[1:]:
        if ds.vocab.tokens != vocab.tokens:
            raise ValueError("mixed datasets must share one vocab")
    if cfg.vocab_size and cfg.vocab_size != len(vocab):
        raise ValueError(f"config vocab_size {cfg.vocab_size} != dataset vocab {len(vocab)}")
    cfg.vocab_size = len(vocab)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if cfg.resume:
        ckpt = load_checkpoint(cfg.resume)
        resumed_cfg = {k: v for k, v in ckpt.config.to_dict().items()
                       if k not in _LOCATION_FIELDS}
        current_cfg = {k: v for k, v in cfg.to_dict().items() if k not in _LOCATION_FIELDS}
        if resumed_cfg != current_cfg:
            diff = {k for k in current_cfg if resumed_cfg[k] != current_cfg[k]}
            raise ValueError(f"resume config mismatch on: {sorted(diff)}")
        model, vocab = model_from_checkpoint(ckpt)
        optimizer = AdamW(model.param_dict(), cfg.beta1, cfg.beta2, cfg.adam_eps,
                          cfg.weight_decay)
        if ckpt.opt_state is not None:
            optimizer.t = ckpt.opt_state["t"]
            for n in optimizer.m:
                optimizer.m[n] = ckpt.opt_state["m"][n].astype(optimizer.m[n].dtype, copy=True)
                optimizer.v[n] = ckpt.opt_state["v"][n].astype(optimizer.v[n].dtype, copy=True)
        start_step = ckpt.step
    else:
        model = build_model(cfg, len(vocab))
        if cfg.init_from:
            warm = load_checkpoint(cfg.init_from)
            if warm.vocab_tokens != list(vocab.tokens):
                raise ValueError("init_from checkpoint vocab does not match the data vocab")
            load_into_model(warm, model)
        optimizer = AdamW(model.param_dict(), cfg.beta1, cfg.beta2, cfg.adam_eps,
                          cfg.weight_decay)
        start_step = 0

    log_path = out / "train_log.jsonl"
    eval_log_path = out / "eval_log.jsonl"
    with open(log_path, "a", encoding="utf-8") as log:
        for step in range(start_step, cfg.total_steps):
            samples = assemble_batch(mix, cfg.batch_size, batch_rng(cfg.seed, step))
            breakdown = train_step(model, optimizer, samples, vocab, cfg, step)
            if cfg.log_every and step % cfg.log_every == 0:
                record = {"step": step, "lr": lr_at(step, cfg), "cl": breakdown.cl,
                          "match": breakdown.match, "mlm": breakdown.mlm,
                          "bbox": breakdown.bbox, "total": breakdown.total}
                log.write(json.dumps(record, sort_keys=True) + "\n")
                log.flush()
            if log_hook is not None:
                log_hook(step, breakdown, model)
            if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
                _append_eval_record(eval_log_path, model, mix[0][0], cfg, step + 1)
            if cfg.save_every and (step + 1) % cfg.save_every == 0:
                save_checkpoint(out / f"ckpt_step{step + 1:06d}.ckpt",
                                checkpoint_from_model(model, cfg, step + 1, vocab, optimizer))

    final = out / "ckpt_final.ckpt"
    save_checkpoint(final, checkpoint_from_model(model, cfg, cfg.total_steps, vocab, optimizer))
    return final
