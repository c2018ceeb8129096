import numpy as np
import pytest

from dialtask.corpus import Speaker, Utterance
from dialtask.encoder import (EncoderConfig, EncoderError, ReferenceEncoder,
                              load_arrays, load_checkpoint, marker_representations,
                              save_arrays, save_checkpoint, tokenize_history,
                              tokenize_text)
from dialtask.vocab import Vocabulary


@pytest.fixture(scope="module")
def tiny_vocab():
    return Vocabulary("alpha beta gamma delta epsilon zeta eta theta".split())


def _turns(*texts):
    return [
        Utterance(Speaker.USER if i % 2 == 0 else Speaker.SYSTEM, t)
        for i, t in enumerate(texts)
    ]


# --- tokenization -----------------------------------------------------------

def test_tokenize_text_structure(tiny_vocab):
    seq = tokenize_text("alpha beta", tiny_vocab)
    assert seq.ids[0] == tiny_vocab.cls_id and seq.ids[-1] == tiny_vocab.sep_id
    assert seq.ids[1:-1] == [tiny_vocab.id("alpha"), tiny_vocab.id("beta")]
    assert seq.marker_positions == {}


def test_tokenize_text_truncates(tiny_vocab):
    seq = tokenize_text("alpha " * 50, tiny_vocab, max_len=10)
    assert len(seq) == 10
    assert seq.ids[0] == tiny_vocab.cls_id and seq.ids[-1] == tiny_vocab.sep_id


def test_tokenize_history_markers(tiny_vocab):
    seq = tokenize_history(_turns("alpha beta", "gamma", "delta"), tiny_vocab)
    # [CLS] [USR] alpha beta [SYS] gamma [USR] delta [SEP]
    assert seq.ids[1] == tiny_vocab.usr_id
    assert seq.marker_positions[Speaker.USER] == [1, 6]
    assert seq.marker_positions[Speaker.SYSTEM] == [4]
    assert seq.ordered_markers() == [1, 4, 6]
    assert seq.ids[-1] == tiny_vocab.sep_id


def test_tokenize_history_drops_oldest(tiny_vocab):
    turns = _turns("alpha beta gamma", "delta", "epsilon zeta")
    # capacity 8: newest two turns need (1+1)+(1+2)=5, adding oldest needs 4 more
    seq = tokenize_history(turns, tiny_vocab, max_len=10)
    texts = [tiny_vocab.token(i) for i in seq.ids]
    assert "epsilon" in texts and "delta" in texts and "alpha" not in texts
    assert seq.marker_positions[Speaker.SYSTEM] == [1]  # newest surviving turn first


def test_tokenize_history_single_overflow_keeps_head(tiny_vocab):
    seq = tokenize_history(_turns("alpha beta gamma delta epsilon"), tiny_vocab, max_len=6)
    assert len(seq) == 6
    texts = [tiny_vocab.token(i) for i in seq.ids]
    assert texts == ["[CLS]", "[USR]", "alpha", "beta", "gamma", "[SEP]"]


def test_tokenize_history_errors(tiny_vocab):
    with pytest.raises(EncoderError):
        tokenize_history(_turns("alpha"), tiny_vocab, max_len=3)
    with pytest.raises(EncoderError):
        tokenize_history([], tiny_vocab)


# --- config and forward pass ------------------------------------------------

def test_config_validation():
    with pytest.raises(EncoderError):
        EncoderConfig(d_model=30, n_heads=4)
    cfg = EncoderConfig(d_model=32, n_heads=4)
    assert cfg.d_ff == 128


def test_forward_shapes(small_encoder, sample_corpus):
    seqs = [small_encoder.tokenize_dialogue(d) for d in sample_corpus.dialogues[:3]]
    out = small_encoder.encode_batch(seqs)
    max_len = max(len(s) for s in seqs)
    assert out.token_vectors.shape == (3, max_len, 32)
    assert out.cls_vector.shape == (3, 32)
    np.testing.assert_array_equal(out.cls_vector, out.token_vectors[:, 0, :])
    assert out.lengths == [len(s) for s in seqs]


def test_seed_determinism(vocab):
    cfg = EncoderConfig(d_model=32, n_layers=1, n_heads=2)
    a = ReferenceEncoder(cfg, vocab, seed=5)
    b = ReferenceEncoder(cfg, vocab, seed=5)
    c = ReferenceEncoder(cfg, vocab, seed=6)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params)


def test_padding_does_not_leak(small_encoder, tiny_vocab, sample_corpus):
    """Each sequence's vectors must be identical whether encoded alone or
    padded inside a longer batch — the attention mask must hide pad tokens."""
    seqs = [small_encoder.tokenize_dialogue(d) for d in sample_corpus.dialogues[:4]]
    assert len({len(s) for s in seqs}) > 1  # lengths differ, so padding happens
    batch = small_encoder.encode_batch(seqs)
    for i, s in enumerate(seqs):
        solo = small_encoder.encode(s)
        np.testing.assert_allclose(
            batch.token_vectors[i, : len(s)], solo.token_vectors[0], atol=1e-10
        )


def test_rejects_short_sequence(small_encoder):
    from dialtask.encoder import TokenSequence

    with pytest.raises(EncoderError):
        small_encoder.encode_batch([TokenSequence(ids=[1])])


def test_rejects_nonfinite_params(vocab):
    enc = ReferenceEncoder(EncoderConfig(d_model=16, n_layers=1, n_heads=2), vocab, seed=0)
    enc.params["emb/tok"][0, 0] = np.nan
    with pytest.raises(EncoderError, match="emb/tok"):
        enc.encode(enc.tokenize_text("hello"))


# --- backward pass ----------------------------------------------------------

def test_backward_matches_fd(vocab, sample_corpus):
    enc = ReferenceEncoder(EncoderConfig(d_model=16, n_layers=2, n_heads=2, max_len=64),
                           vocab, seed=1)
    seqs = [enc.tokenize_dialogue(d) for d in sample_corpus.dialogues[:2]]
    rng = np.random.default_rng(0)
    # probe loss: softmax CE against random targets keeps values at O(1)
    W = rng.standard_normal((16, 5)) * 0.5
    targets = rng.integers(0, 5, size=2)

    def loss_fn():
        out = enc.encode_batch(seqs, with_cache=True)
        logits = out.cls_vector @ W
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return -logp[np.arange(2), targets].mean(), out, logp

    loss, out, logp = loss_fn()
    p = np.exp(logp)
    onehot = np.zeros_like(p)
    onehot[np.arange(2), targets] = 1.0
    dcls = ((p - onehot) / 2) @ W.T
    d_tokens = np.zeros_like(out.token_vectors)
    d_tokens[:, 0, :] = dcls
    grads = enc.backward(out, d_tokens)

    assert set(grads) == set(enc.params)
    rng_probe = np.random.default_rng(7)
    h, checked = 1e-4, 0
    for name in ("emb/tok", "emb/pos", "layer0/attn/Wq", "layer1/ffn/W1", "layer1/ln2_g"):
        arr = enc.params[name]
        for _ in range(4):
            idx = tuple(rng_probe.integers(0, s) for s in arr.shape)
            orig = arr[idx]
            arr[idx] = orig + h
            lp = loss_fn()[0]
            arr[idx] = orig - h
            lm = loss_fn()[0]
            arr[idx] = orig
            fd = (lp - lm) / (2 * h)
            an = grads[name][idx]
            assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-2), (name, idx, fd, an)
            checked += 1
    assert checked == 20


def test_backward_requires_cache(small_encoder, sample_corpus):
    seq = small_encoder.tokenize_dialogue(sample_corpus.dialogues[0])
    out = small_encoder.encode_batch([seq])
    with pytest.raises(EncoderError):
        small_encoder.backward(out, np.zeros_like(out.token_vectors))


# --- marker extraction ------------------------------------------------------

def test_marker_representations(small_encoder, sample_corpus):
    seq = small_encoder.tokenize_dialogue(sample_corpus.dialogues[0])
    out = small_encoder.encode(seq)
    M = marker_representations(out.token_vectors[0], seq)
    markers = seq.ordered_markers()
    assert M.shape == (len(markers), 32)
    np.testing.assert_array_equal(M, out.token_vectors[0][markers])


def test_marker_representations_requires_markers(small_encoder):
    seq = small_encoder.tokenize_text("no markers here")
    out = small_encoder.encode(seq)
    with pytest.raises(EncoderError):
        marker_representations(out.token_vectors[0], seq)


# --- persistence ------------------------------------------------------------

def test_save_arrays_roundtrip(tmp_path, rng):
    arrays = {"a": rng.standard_normal((3, 4)), "b": np.arange(5, dtype=np.float64)}
    meta = {"kind": "test", "note": "x"}
    save_arrays(tmp_path / "x.npz", arrays, meta)
    back, meta2 = load_arrays(tmp_path / "x.npz")
    assert meta2 == meta
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])


def test_checkpoint_roundtrip(tmp_path, small_encoder, sample_corpus):
    path = tmp_path / "enc.npz"
    save_checkpoint(path, small_encoder, {"note": "test"})
    enc2, prov = load_checkpoint(path)
    assert prov["note"] == "test"
    for k in small_encoder.params:
        np.testing.assert_array_equal(enc2.params[k], small_encoder.params[k])
    seq = small_encoder.tokenize_dialogue(sample_corpus.dialogues[0])
    np.testing.assert_array_equal(
        enc2.encode(seq).token_vectors, small_encoder.encode(seq).token_vectors
    )


def test_checkpoint_rejects_wrong_kind(tmp_path, small_encoder):
    save_arrays(tmp_path / "x.npz", {"a": np.zeros(2)}, {"kind": "something-else"})
    with pytest.raises(EncoderError):
        load_checkpoint(tmp_path / "x.npz")
