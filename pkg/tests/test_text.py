import numpy as np
import pytest

from mgvlm.data import build_vocab
from mgvlm.text import (CLS, MASK, N_RESERVED, PAD, TextEncoder, TokenSequence,
                        UNK, Vocab, mask_tokens, tokenize)


@pytest.fixture(scope="module")
def vocab():
    return build_vocab("en")


def make_encoder(vocab_size, max_len=12, dim=16, layers=1, seed=0):
    rng = np.random.default_rng(seed)
    return TextEncoder(vocab_size, max_len, dim, layers, heads=4, ffn_ratio=2,
                       rng=rng, dtype=np.float32)


# ---------------------------------------------------------------------------
# vocab
# ---------------------------------------------------------------------------

def test_vocab_roundtrip(tmp_path, vocab):
    vocab.save(tmp_path / "v.txt")
    again = Vocab.load(tmp_path / "v.txt")
    assert again.tokens == vocab.tokens
    assert again.id("red") == vocab.id("red")


def test_vocab_reserved_layout(vocab):
    assert vocab.tokens[PAD] == "[PAD]"
    assert vocab.tokens[MASK] == "[MASK]"
    assert len(set(vocab.tokens[:N_RESERVED])) == N_RESERVED


def test_vocab_rejects_duplicates():
    with pytest.raises(ValueError):
        Vocab.from_words(["red", "red"])


# ---------------------------------------------------------------------------
# tokenize
# ---------------------------------------------------------------------------

def test_tokenize_basic(vocab):
    seq = tokenize("red circle", vocab, 8)
    assert seq.ids.tolist() == [CLS, vocab.id("red"), vocab.id("circle")]
    assert seq.mask.tolist() == [1.0, 1.0, 1.0]


def test_tokenize_unknown_word(vocab):
    seq = tokenize("red wombat", vocab, 8)
    assert seq.ids.tolist() == [CLS, vocab.id("red"), UNK]


def test_tokenize_truncates(vocab):
    seq = tokenize(" ".join(["red"] * 40), vocab, 16)
    assert len(seq.ids) == 16
    assert seq.ids[0] == CLS


def test_tokenize_lowercases(vocab):
    assert tokenize("RED Circle", vocab, 8).ids.tolist() == \
        tokenize("red circle", vocab, 8).ids.tolist()


def test_tokenize_empty_rejected(vocab):
    with pytest.raises(ValueError):
        tokenize("   ", vocab, 8)


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------

def long_sequence(vocab, n):
    rng = np.random.default_rng(123)
    ids = np.concatenate([[CLS], rng.integers(N_RESERVED, len(vocab), size=n)])
    return TokenSequence(ids.astype(np.int64), np.ones(n + 1, dtype=np.float32))


def test_mask_p_zero_is_noop(vocab):
    seq = long_sequence(vocab, 50)
    masked = mask_tokens(seq, 0.0, len(vocab), np.random.default_rng(0))
    assert (masked.ids == seq.ids).all()
    assert len(masked.positions) == 0
    assert (masked.labels == -1).all()


def test_mask_statistics_p1(vocab):
    # p=1 over 1e5 tokens: corruption split 0.8/0.1/0.1 within +-0.01
    seq = long_sequence(vocab, 100_000)
    masked = mask_tokens(seq, 1.0, len(vocab), np.random.default_rng(1))
    sel = masked.labels >= 0
    assert sel.sum() == 100_000
    orig = seq.ids[sel]
    got = masked.ids[sel]
    frac_mask = float((got == MASK).mean())
    frac_unchanged = float((got == orig).mean())
    frac_random = float(((got != MASK) & (got != orig)).mean())
    assert abs(frac_mask - 0.8) < 0.01
    assert abs(frac_random - 0.1) < 0.01
    assert abs(frac_unchanged - 0.1) < 0.01


def test_mask_rate_p04(vocab):
    seq = long_sequence(vocab, 100_000)
    masked = mask_tokens(seq, 0.4, len(vocab), np.random.default_rng(2))
    rate = float((masked.labels >= 0).mean() * (100_001 / 100_000))
    assert abs(rate - 0.4) < 0.01


def test_mask_never_corrupts_reserved(vocab):
    ids = np.array([CLS, vocab.id("red"), PAD, PAD], dtype=np.int64)
    seq = TokenSequence(ids, np.array([1, 1, 0, 0], dtype=np.float32))
    for s in range(50):
        masked = mask_tokens(seq, 1.0, len(vocab), np.random.default_rng(s))
        assert masked.ids[0] == CLS
        assert (masked.ids[2:] == PAD).all()
        assert masked.positions.tolist() == [1]


def test_mask_labels_only_on_masked_positions(vocab):
    seq = long_sequence(vocab, 200)
    masked = mask_tokens(seq, 0.5, len(vocab), np.random.default_rng(3))
    on = masked.labels >= 0
    assert (np.nonzero(on)[0] == masked.positions).all()
    assert (masked.labels[on] == seq.ids[on]).all()


def test_mask_rate_binomial_consistency(vocab):
    # within 3 sigma of binomial for n = 1e5
    n = 100_000
    seq = long_sequence(vocab, n)
    for p in (0.15, 0.4, 0.7):
        masked = mask_tokens(seq, p, len(vocab), np.random.default_rng(int(p * 100)))
        k = int((masked.labels >= 0).sum())
        sigma = (n * p * (1 - p)) ** 0.5
        assert abs(k - n * p) < 3 * sigma


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

def test_encode_shape(vocab):
    enc = make_encoder(len(vocab))
    seq = tokenize("red circle and blue square", vocab, 12)
    feats, cls = enc.encode_text(seq)
    assert feats.shape == (6, 16)
    assert cls.shape == (16,)


def test_padding_does_not_affect_real_positions(vocab):
    enc = make_encoder(len(vocab), max_len=10)
    seq = tokenize("red circle", vocab, 10)
    bare = enc.encode_ids(seq.ids[None], seq.mask[None]).data
    padded_ids = np.concatenate([seq.ids, [PAD] * 4])[None]
    padded_mask = np.concatenate([seq.mask, [0, 0, 0, 0]]).astype(np.float32)[None]
    padded = enc.encode_ids(padded_ids, padded_mask).data
    # Masked keys carry exactly zero attention weight; remaining
    # differences are GEMM-kernel rounding at the last ulp.
    np.testing.assert_allclose(padded[0, :3], bare[0], atol=1e-5, rtol=1e-5)


def test_padding_property_random_sentences(vocab):
    rng = np.random.default_rng(5)
    enc = make_encoder(len(vocab), max_len=12)
    words = [t for t in vocab.tokens[N_RESERVED:]]
    for _ in range(10):
        n_words = int(rng.integers(1, 8))
        sentence = " ".join(rng.choice(words, size=n_words))
        pad_amount = int(rng.integers(1, 12 - n_words))
        seq = tokenize(sentence, vocab, 12)
        bare = enc.encode_ids(seq.ids[None], seq.mask[None]).data
        ids = np.concatenate([seq.ids, [PAD] * pad_amount])[None]
        mask = np.concatenate([seq.mask, np.zeros(pad_amount)]).astype(np.float32)[None]
        padded = enc.encode_ids(ids, mask).data
        np.testing.assert_allclose(padded[0, :len(seq.ids)], bare[0],
                                   atol=1e-5, rtol=1e-5)


def test_encode_deterministic(vocab):
    enc = make_encoder(len(vocab), seed=9)
    seq = tokenize("yellow triangle", vocab, 12)
    a = enc.encode_text(seq)[0].data
    b = enc.encode_text(seq)[0].data
    assert (a == b).all()


def test_all_pad_sequence_rejected(vocab):
    enc = make_encoder(len(vocab))
    with pytest.raises(ValueError):
        enc.encode_ids(np.full((1, 4), PAD, dtype=np.int64),
                       np.zeros((1, 4), dtype=np.float32))
