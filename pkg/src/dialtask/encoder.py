"""Dialogue tokenization and the reference bidirectional encoder.

Dialogues are flattened as ``[CLS] [USR] tok.. [SYS] tok.. ... [SEP]`` with a
role marker in front of every utterance; the marker positions double as
per-utterance representation slots. The reference encoder is a small
post-layernorm transformer (learned positions, GELU feed-forward) written in
numpy with a hand-derived backward pass so that gradients can be checked
against finite differences. Externally pre-trained encoders can stand in for
it behind the same tokenize/encode/backward interface.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from dialtask import kernels as K
from dialtask.corpus import Dialogue, Speaker, Utterance
from dialtask.vocab import Vocabulary


class EncoderError(ValueError):
    pass


@dataclass
class TokenSequence:
    ids: list[int]
    # role -> positions of that role's marker tokens, in dialogue order
    marker_positions: dict[Speaker, list[int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    def ordered_markers(self) -> list[int]:
        """All marker positions in dialogue order (markers appear left to right)."""
        merged = [p for ps in self.marker_positions.values() for p in ps]
        return sorted(merged)


def tokenize_text(text: str, vocab: Vocabulary, max_len: int = 512) -> TokenSequence:
    """[CLS] tokens [SEP], truncated to max_len keeping both specials."""
    ids = vocab.encode(text)[: max_len - 2]
    return TokenSequence(ids=[vocab.cls_id] + ids + [vocab.sep_id])


def tokenize_utterance(u: Utterance, vocab: Vocabulary, max_len: int = 512) -> TokenSequence:
    return tokenize_text(u.text, vocab, max_len)


def tokenize_history(utterances: Sequence[Utterance], vocab: Vocabulary, max_len: int = 512) -> TokenSequence:
    """Flatten a turn sequence with role markers.

    Truncation drops the oldest turns first so the most recent context always
    survives; if even the newest turn alone overflows, its tail is cut. The
    result is ``[CLS] ([USR]|[SYS] tok..)+ [SEP]``.
    """
    if max_len < 4:
        raise EncoderError(f"max_len {max_len} cannot hold a single turn")
    if not utterances:
        raise EncoderError("empty utterance sequence")
    capacity = max_len - 2  # room for [CLS]/[SEP]

    chunks: list[tuple[Speaker, list[int]]] = []
    used = 0
    for u in reversed(utterances):
        toks = vocab.encode(u.text)
        need = 1 + len(toks)  # marker + tokens
        if used + need > capacity:
            if not chunks:  # newest turn alone overflows: keep its head
                chunks.append((u.speaker, toks[: capacity - 1]))
                used = capacity
            break
        chunks.append((u.speaker, toks))
        used += need
    chunks.reverse()

    ids = [vocab.cls_id]
    markers: dict[Speaker, list[int]] = {Speaker.USER: [], Speaker.SYSTEM: []}
    for speaker, toks in chunks:
        markers[speaker].append(len(ids))
        ids.append(vocab.usr_id if speaker == Speaker.USER else vocab.sys_id)
        ids.extend(toks)
    ids.append(vocab.sep_id)
    return TokenSequence(ids=ids, marker_positions=markers)


def tokenize_dialogue(d: Dialogue, vocab: Vocabulary, max_len: int = 512) -> TokenSequence:
    return tokenize_history(d.utterances, vocab, max_len)


@dataclass
class EncoderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int | None = None
    max_len: int = 512
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        if self.d_model % self.n_heads:
            raise EncoderError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")


@dataclass
class EncoderOutput:
    token_vectors: np.ndarray  # (B, L, d)
    cls_vector: np.ndarray  # (B, d)
    lengths: list[int]
    cache: dict | None = None


class DialogueEncoder(Protocol):
    """What the heads and trainer require from any encoder implementation."""

    config: EncoderConfig
    params: dict[str, np.ndarray]

    def tokenize_text(self, text: str) -> TokenSequence: ...

    def tokenize_utterance(self, u: Utterance) -> TokenSequence: ...

    def tokenize_history(self, utterances: Sequence[Utterance]) -> TokenSequence: ...

    def tokenize_dialogue(self, d: Dialogue) -> TokenSequence: ...

    def encode_batch(self, seqs: Sequence[TokenSequence], with_cache: bool = False) -> EncoderOutput: ...

    def backward(self, out: EncoderOutput, d_tokens: np.ndarray) -> dict[str, np.ndarray]: ...


_NEG = -1e30  # additive mask for padded keys; underflows to exactly 0 after softmax


class ReferenceEncoder:
    """Small bidirectional self-attention encoder with explicit backprop."""

    def __init__(self, config: EncoderConfig, vocab: Vocabulary, seed: int = 0):
        self.config = config
        self.vocab = vocab
        rng = np.random.default_rng(seed)
        d, ff, V = config.d_model, config.d_ff, len(vocab)
        std = config.init_std

        p: dict[str, np.ndarray] = {
            "emb/tok": rng.normal(0.0, std, (V, d)),
            "emb/pos": rng.normal(0.0, std, (config.max_len, d)),
            "emb/ln_g": np.ones(d),
            "emb/ln_b": np.zeros(d),
        }
        for i in range(config.n_layers):
            pre = f"layer{i}"
            for name in ("Wq", "Wk", "Wv", "Wo"):
                p[f"{pre}/attn/{name}"] = rng.normal(0.0, std, (d, d))
            for name in ("bq", "bk", "bv", "bo"):
                p[f"{pre}/attn/{name}"] = np.zeros(d)
            p[f"{pre}/ln1_g"] = np.ones(d)
            p[f"{pre}/ln1_b"] = np.zeros(d)
            p[f"{pre}/ffn/W1"] = rng.normal(0.0, std, (d, ff))
            p[f"{pre}/ffn/b1"] = np.zeros(ff)
            p[f"{pre}/ffn/W2"] = rng.normal(0.0, std, (ff, d))
            p[f"{pre}/ffn/b2"] = np.zeros(d)
            p[f"{pre}/ln2_g"] = np.ones(d)
            p[f"{pre}/ln2_b"] = np.zeros(d)
        self.params = p

    # tokenization façade so heads never touch the vocabulary directly
    def tokenize_text(self, text: str) -> TokenSequence:
        return tokenize_text(text, self.vocab, self.config.max_len)

    def tokenize_utterance(self, u: Utterance) -> TokenSequence:
        return tokenize_utterance(u, self.vocab, self.config.max_len)

    def tokenize_history(self, utterances: Sequence[Utterance]) -> TokenSequence:
        return tokenize_history(utterances, self.vocab, self.config.max_len)

    def tokenize_dialogue(self, d: Dialogue) -> TokenSequence:
        return tokenize_dialogue(d, self.vocab, self.config.max_len)

    def _check_finite(self):
        for name, arr in self.params.items():
            if not np.all(np.isfinite(arr)):
                raise EncoderError(f"non-finite values in parameter {name}")

    def pad_batch(self, seqs: Sequence[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
        L = max(len(s) for s in seqs)
        ids = np.full((len(seqs), L), self.vocab.pad_id, dtype=np.int64)
        mask = np.zeros((len(seqs), L))
        for b, s in enumerate(seqs):
            ids[b, : len(s)] = s.ids
            mask[b, : len(s)] = 1.0
        return ids, mask

    def encode_batch(self, seqs: Sequence[TokenSequence], with_cache: bool = False) -> EncoderOutput:
        if any(len(s) < 2 for s in seqs):
            raise EncoderError("sequences must have length >= 2")
        self._check_finite()
        ids, mask = self.pad_batch(seqs)
        B, L = ids.shape
        cfg, p = self.config, self.params
        d, h = cfg.d_model, cfg.n_heads
        dk = d // h
        scale = 1.0 / np.sqrt(dk)

        x = p["emb/tok"][ids] + p["emb/pos"][:L]  # (B, L, d)
        x2 = x.reshape(B * L, d)
        x2, emb_xhat, emb_rstd = K.layernorm_rows(x2, p["emb/ln_g"], p["emb/ln_b"])
        x = x2.reshape(B, L, d)

        key_add = (mask - 1.0)[:, None, None, :] * -_NEG  # 0 real, -1e30 pad
        cache = {
            "ids": ids,
            "mask": mask,
            "emb_xhat": emb_xhat,
            "emb_rstd": emb_rstd,
            "layers": [],
        }

        for i in range(cfg.n_layers):
            pre = f"layer{i}"
            x0 = x
            x0_2 = x0.reshape(B * L, d)
            q = (x0_2 @ p[f"{pre}/attn/Wq"] + p[f"{pre}/attn/bq"]).reshape(B, L, h, dk).transpose(0, 2, 1, 3)
            k = (x0_2 @ p[f"{pre}/attn/Wk"] + p[f"{pre}/attn/bk"]).reshape(B, L, h, dk).transpose(0, 2, 1, 3)
            v = (x0_2 @ p[f"{pre}/attn/Wv"] + p[f"{pre}/attn/bv"]).reshape(B, L, h, dk).transpose(0, 2, 1, 3)

            scores = q @ k.transpose(0, 1, 3, 2) * scale + key_add  # (B, h, L, L)
            A = K.softmax_rows(scores.reshape(B * h * L, L)).reshape(B, h, L, L)
            ctx = (A @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
            attn_out = ctx.reshape(B * L, d) @ p[f"{pre}/attn/Wo"] + p[f"{pre}/attn/bo"]

            r1 = x0_2 + attn_out
            x1_2, xhat1, rstd1 = K.layernorm_rows(r1, p[f"{pre}/ln1_g"], p[f"{pre}/ln1_b"])

            hpre = x1_2 @ p[f"{pre}/ffn/W1"] + p[f"{pre}/ffn/b1"]
            hact = K.gelu(hpre)
            fout = hact @ p[f"{pre}/ffn/W2"] + p[f"{pre}/ffn/b2"]

            r2 = x1_2 + fout
            x2_2, xhat2, rstd2 = K.layernorm_rows(r2, p[f"{pre}/ln2_g"], p[f"{pre}/ln2_b"])
            x = x2_2.reshape(B, L, d)

            if with_cache:
                cache["layers"].append(
                    {"x0": x0_2, "q": q, "k": k, "v": v, "A": A, "ctx": ctx,
                     "xhat1": xhat1, "rstd1": rstd1, "x1": x1_2,
                     "hpre": hpre, "hact": hact, "xhat2": xhat2, "rstd2": rstd2}
                )

        return EncoderOutput(
            token_vectors=x,
            cls_vector=x[:, 0, :].copy(),
            lengths=[len(s) for s in seqs],
            cache=cache if with_cache else None,
        )

    def backward(self, out: EncoderOutput, d_tokens: np.ndarray) -> dict[str, np.ndarray]:
        """Backprop d(loss)/d(token_vectors) into parameter gradients."""
        if out.cache is None:
            raise EncoderError("forward pass was run without with_cache=True")
        cfg, p, cache = self.config, self.params, out.cache
        ids = cache["ids"]
        B, L = ids.shape
        d, h = cfg.d_model, cfg.n_heads
        dk = d // h
        scale = 1.0 / np.sqrt(dk)
        g: dict[str, np.ndarray] = {}

        dx = d_tokens.reshape(B * L, d).copy()
        for i in reversed(range(cfg.n_layers)):
            pre = f"layer{i}"
            c = cache["layers"][i]

            dr2, g[f"{pre}/ln2_g"], g[f"{pre}/ln2_b"] = K.layernorm_rows_grad(
                dx, c["xhat2"], c["rstd2"], p[f"{pre}/ln2_g"]
            )
            dfout = dr2
            g[f"{pre}/ffn/W2"] = c["hact"].T @ dfout
            g[f"{pre}/ffn/b2"] = dfout.sum(axis=0)
            dhact = dfout @ p[f"{pre}/ffn/W2"].T
            dhpre = dhact * K.gelu_grad(c["hpre"])
            g[f"{pre}/ffn/W1"] = c["x1"].T @ dhpre
            g[f"{pre}/ffn/b1"] = dhpre.sum(axis=0)
            dx1 = dr2 + dhpre @ p[f"{pre}/ffn/W1"].T

            dr1, g[f"{pre}/ln1_g"], g[f"{pre}/ln1_b"] = K.layernorm_rows_grad(
                dx1, c["xhat1"], c["rstd1"], p[f"{pre}/ln1_g"]
            )
            dattn = dr1
            g[f"{pre}/attn/Wo"] = c["ctx"].reshape(B * L, d).T @ dattn
            g[f"{pre}/attn/bo"] = dattn.sum(axis=0)
            dctx = (dattn @ p[f"{pre}/attn/Wo"].T).reshape(B, L, h, dk).transpose(0, 2, 1, 3)

            dA = dctx @ c["v"].transpose(0, 1, 3, 2)  # (B, h, L, L)
            dv = c["A"].transpose(0, 1, 3, 2) @ dctx
            dscores = K.softmax_rows_grad(
                c["A"].reshape(B * h * L, L), dA.reshape(B * h * L, L)
            ).reshape(B, h, L, L) * scale
            dq = dscores @ c["k"]
            dkh = dscores.transpose(0, 1, 3, 2) @ c["q"]

            dx0 = dr1.copy()
            for name, dmat in (("q", dq), ("k", dkh), ("v", dv)):
                d2 = dmat.transpose(0, 2, 1, 3).reshape(B * L, d)
                g[f"{pre}/attn/W{name}"] = c["x0"].T @ d2
                g[f"{pre}/attn/b{name}"] = d2.sum(axis=0)
                dx0 += d2 @ p[f"{pre}/attn/W{name}"].T
            dx = dx0

        demb, g["emb/ln_g"], g["emb/ln_b"] = K.layernorm_rows_grad(
            dx, cache["emb_xhat"], cache["emb_rstd"], p["emb/ln_g"]
        )
        demb = demb.reshape(B, L, d)
        dtok = np.zeros_like(p["emb/tok"])
        np.add.at(dtok, ids.reshape(-1), demb.reshape(B * L, d))
        g["emb/tok"] = dtok
        dpos = np.zeros_like(p["emb/pos"])
        dpos[:L] = demb.sum(axis=0)
        g["emb/pos"] = dpos
        return g

    def encode(self, seq: TokenSequence) -> EncoderOutput:
        return self.encode_batch([seq])


def marker_representations(out_vectors: np.ndarray, seq: TokenSequence) -> np.ndarray:
    """Per-utterance vectors: the encoder outputs at the role-marker positions.

    ``out_vectors`` is one sequence's (L, d) slice; rows come back in dialogue
    order, one per surviving utterance.
    """
    positions = seq.ordered_markers()
    if not positions:
        raise EncoderError("sequence has no marker positions")
    if positions[-1] >= out_vectors.shape[0]:
        raise EncoderError(f"marker position {positions[-1]} out of range")
    return out_vectors[positions]


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Self-describing container: named float64 tensors + a JSON metadata blob.

    Round-trips bit-exactly (arrays are stored raw, never re-encoded).
    """
    payload = {f"arr:{k}": v for k, v in arrays.items()}
    payload["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    np.savez(str(path), **payload)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(str(path)) as z:
        meta = json.loads(bytes(z["meta"].tobytes()).decode("utf-8"))
        arrays = {k[4:]: z[k] for k in z.files if k.startswith("arr:")}
    return arrays, meta


def save_checkpoint(path: str | Path, enc: ReferenceEncoder, provenance: dict | None = None) -> None:
    """Write an encoder checkpoint with config, vocabulary and provenance
    (pretrain task list, seed, step count)."""
    meta = {
        "kind": "encoder-checkpoint",
        "config": asdict(enc.config),
        "vocab": enc.vocab.to_list(),
        "provenance": provenance or {},
    }
    save_arrays(path, enc.params, meta)


def load_checkpoint(path: str | Path) -> tuple[ReferenceEncoder, dict]:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "encoder-checkpoint":
        raise EncoderError(f"{path} is not an encoder checkpoint")
    enc = ReferenceEncoder(EncoderConfig(**meta["config"]), Vocabulary.from_list(meta["vocab"]))
    if set(arrays) != set(enc.params):
        raise EncoderError("checkpoint parameter names do not match the config")
    enc.params = {k: arrays[k].copy() for k in arrays}
    return enc, meta.get("provenance", {})
