"""Text pipeline: closed-vocabulary tokenizer, MLM-style corruption, and
a bidirectional transformer encoder with a summary vector at position 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
RESERVED = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
N_RESERVED = len(RESERVED)
LABEL_IGNORE = -1


@dataclass
class Vocab:
    """Dense token-id map; ids 0..4 are reserved control tokens."""

    tokens: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        if self.tokens[:N_RESERVED] != RESERVED:
            raise ValueError("vocab must start with the reserved tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocab")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    @classmethod
    def from_words(cls, words: list[str]) -> "Vocab":
        return cls(RESERVED + list(words))

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


@dataclass
class TokenSequence:
    ids: np.ndarray               # (L,) int64, position 0 is [CLS]
    mask: np.ndarray              # (L,) 1.0 for real tokens

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class MaskedText:
    ids: np.ndarray               # corrupted token ids
    labels: np.ndarray            # original id at masked positions, -1 elsewhere
    positions: np.ndarray         # indices of masked positions


def tokenize(text: str, vocab: Vocab, max_len: int) -> TokenSequence:
    """Lowercased whitespace tokenization with [UNK] fallback; [CLS] is
    prepended and the result truncated to max_len."""
    words = text.lower().split()
    if not words:
        raise ValueError("cannot tokenize an empty string")
    ids = [CLS] + [vocab.id(w) for w in words]
    ids = np.array(ids[:max_len], dtype=np.int64)
    return TokenSequence(ids, np.ones(len(ids), dtype=np.float32))


def mask_tokens(seq: TokenSequence, p: float, vocab_size: int,
                rng: np.random.Generator) -> MaskedText:
    """Select each non-reserved token with probability p; replace the
    selection with [MASK] 80% of the time, a uniform random word token
    10%, and leave it unchanged 10%. Labels record the originals."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"mask probability {p} outside [0, 1]")
    if vocab_size <= N_RESERVED:
        raise ValueError("vocab has no word tokens to sample replacements from")
    n = len(seq.ids)
    eligible = seq.ids >= N_RESERVED
    # Fixed-shape draws keep the rng stream independent of content.
    selected = (rng.random(n) < p) & eligible
    branch = rng.random(n)
    random_ids = rng.integers(N_RESERVED, vocab_size, size=n)
    ids = seq.ids.copy()
    labels = np.full(n, LABEL_IGNORE, dtype=np.int64)
    labels[selected] = seq.ids[selected]
    to_mask = selected & (branch < 0.8)
    to_random = selected & (branch >= 0.8) & (branch < 0.9)
    ids[to_mask] = MASK
    ids[to_random] = random_ids[to_random]
    return MaskedText(ids, labels, np.nonzero(selected)[0])


class TextEncoder(nn.Module):
    """Bidirectional transformer over token + position embeddings."""

    def __init__(self, vocab_size: int, max_len: int, dim: int, layers: int,
                 heads: int, ffn_ratio: int, rng: np.random.Generator, dtype=np.float32):
        self.token_embed = nn.Embedding(vocab_size, dim, rng, dtype)
        self.pos_embed = Tensor(nn.trunc_normal(rng, (max_len, dim), dtype=dtype),
                                requires_grad=True)
        self.layers = [nn.EncoderLayer(dim, heads, ffn_ratio, rng, dtype)
                       for _ in range(layers)]
        self.ln_out = nn.LayerNorm(dim, dtype)
        self.max_len = max_len
        self.dim = dim

    def pad_batch(self, seqs: list[TokenSequence] | list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        """Right-pad a batch of sequences to the longest length."""
        rows = [s.ids if isinstance(s, TokenSequence) else s for s in seqs]
        if not rows:
            raise ValueError("empty batch")
        width = max(len(r) for r in rows)
        ids = np.full((len(rows), width), PAD, dtype=np.int64)
        mask = np.zeros((len(rows), width), dtype=np.float32)
        for i, r in enumerate(rows):
            ids[i, :len(r)] = r
            mask[i, :len(r)] = 1.0
        return ids, mask

    def encode_ids(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        """(B, L) padded ids -> (B, L, D) features. Padded keys are masked
        out of attention, so pad content never touches real positions."""
        if not mask.any(axis=1).all():
            raise ValueError("all-pad sequence in batch")
        x = ad.add(self.token_embed(ids), ad.take(self.pos_embed, np.arange(ids.shape[1]), axis=0))
        for layer in self.layers:
            x = layer(x, key_mask=mask)
        if self.layers:
            x = self.ln_out(x)
        return x

    def encode_batch(self, seqs: list[TokenSequence]) -> tuple[Tensor, np.ndarray, np.ndarray]:
        ids, mask = self.pad_batch(seqs)
        return self.encode_ids(ids, mask), ids, mask

    def encode_text(self, seq: TokenSequence) -> tuple[Tensor, Tensor]:
        """Single sequence -> ((L, D) features, (D,) summary vector)."""
        feats = self.encode_ids(seq.ids[None], seq.mask[None])
        flat = ad.reshape(feats, feats.shape[1:])
        return flat, ad.reshape(ad.take(flat, [0], axis=0), (self.dim,))
