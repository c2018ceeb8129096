"""Task heads and losses for the five further pre-training tasks (plus MLM)
and the four downstream tasks.

Every loss function takes a batch of examples, runs the shared encoder, and
returns a LossValue; with ``with_grad=True`` it also returns gradients for the
encoder and head parameters in one flat name->array dict (head keys are
prefixed with the head's name, so they never collide with encoder keys).
Gradients are derived by hand and checked against finite differences in the
test suite.

Notation follows the classification heads P = Softmax(W · F(U)) for DSP, DCV,
ENP and INT; the sigmoid multi-label head for DA; the siamese cosine losses
for CRM and RS (one shared similarity implementation); the FFN+softmax
reordering loss for DUR with eps inside the log; and the slot-projection
cosine classification for DST with frozen value vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from dialtask import kernels as K
from dialtask.corpus import Utterance
from dialtask.encoder import TokenSequence
from dialtask.taskgen import (
    CoherenceExample,
    EntityCountExample,
    MaskedExample,
    MatchExample,
    ReorderExample,
    SpeakerExample,
)

DUR_EPS = 1e-8


class HeadError(ValueError):
    pass


@dataclass
class LossValue:
    loss: float
    diagnostics: dict = field(default_factory=dict)
    grads: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        if not np.isfinite(self.loss):
            raise HeadError(f"non-finite loss {self.loss}")
        if self.loss < 0:
            raise HeadError(f"negative loss {self.loss}")


class LinearHead:
    """W: d x c logits map with bias; houses W_DSP / W_DCV / W_ENP / W_INT / W_DA."""

    def __init__(self, d: int, c: int, name: str, seed: int = 0):
        if c < 2:
            raise HeadError(f"head {name!r} needs c >= 2, got {c}")
        rng = np.random.default_rng(seed)
        self.name = name
        self.c = c
        self.params = {
            f"{name}/W": rng.normal(0.0, 0.02, (d, c)),
            f"{name}/b": np.zeros(c),
        }

    def logits(self, vectors: np.ndarray) -> np.ndarray:
        out = vectors @ self.params[f"{self.name}/W"] + self.params[f"{self.name}/b"]
        if not np.all(np.isfinite(out)):
            raise HeadError(f"non-finite logits in head {self.name!r}")
        return out


class LMHead(LinearHead):
    """d -> |vocab| logits for MLM."""

    def __init__(self, d: int, vocab_size: int, seed: int = 0):
        super().__init__(d, vocab_size, "lm", seed)


class DURScorer:
    """One-hidden-layer FFN mapping a marker vector to a reorder score."""

    def __init__(self, d: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.d = d
        self.params = {
            "dur/W1": rng.normal(0.0, 0.02, (d, d)),
            "dur/b1": np.zeros(d),
            "dur/w2": rng.normal(0.0, 0.02, d),
            "dur/b2": np.zeros(1),
        }

    def scores(self, M: np.ndarray) -> tuple[np.ndarray, dict]:
        """M: (W, d) marker vectors -> (W,) scores, plus cache for backward."""
        hpre = M @ self.params["dur/W1"] + self.params["dur/b1"]
        hact = K.gelu(hpre)
        s = hact @ self.params["dur/w2"] + self.params["dur/b2"][0]
        return s, {"M": M, "hpre": hpre, "hact": hact}

    def backward(self, cache: dict, ds: np.ndarray, grads: dict) -> np.ndarray:
        """Accumulate parameter grads, return dLoss/dM."""
        dhact = np.outer(ds, self.params["dur/w2"])
        dhpre = dhact * K.gelu_grad(cache["hpre"])
        grads["dur/w2"] += cache["hact"].T @ ds
        grads["dur/b2"] += ds.sum(keepdims=True)
        grads["dur/W1"] += cache["M"].T @ dhpre
        grads["dur/b1"] += dhpre.sum(axis=0)
        return dhpre @ self.params["dur/W1"].T


def _zero_grads(*param_dicts: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for p in param_dicts:
        for k, v in p.items():
            out[k] = np.zeros_like(v)
    return out


def _merge(into: dict[str, np.ndarray], other: dict[str, np.ndarray]) -> None:
    for k, v in other.items():
        if k in into:
            into[k] += v
        else:
            into[k] = v


def _cls_softmax_ce(
    seqs: Sequence[TokenSequence],
    labels: Sequence[int],
    enc,
    head: LinearHead,
    with_grad: bool,
) -> LossValue:
    """Shared core for the CLS-vector softmax classifiers (DSP/DCV/ENP/INT)."""
    if not seqs:
        raise HeadError("empty batch")
    if len(seqs) != len(labels):
        raise HeadError("batch size mismatch between inputs and labels")
    if any(not 0 <= y < head.c for y in labels):
        raise HeadError(f"label out of range for {head.c}-way head {head.name!r}")
    out = enc.encode_batch(seqs, with_cache=with_grad)
    B = len(seqs)
    logits = head.logits(out.cls_vector)  # (B, c)
    p = K.softmax_rows(logits)
    idx = np.arange(B)
    y = np.asarray(labels)
    loss = float(-np.log(p[idx, y]).mean())
    pred = p.argmax(axis=1)
    diag = {"pred": pred.tolist(), "correct": (pred == y).tolist(), "prob_gold": p[idx, y].tolist()}

    grads = None
    if with_grad:
        dlogits = p.copy()
        dlogits[idx, y] -= 1.0
        dlogits /= B
        grads = {
            f"{head.name}/W": out.cls_vector.T @ dlogits,
            f"{head.name}/b": dlogits.sum(axis=0),
        }
        dcls = dlogits @ head.params[f"{head.name}/W"].T
        d_tokens = np.zeros_like(out.token_vectors)
        d_tokens[:, 0, :] = dcls
        _merge(grads, enc.backward(out, d_tokens))
    return LossValue(loss, diag, grads)


def _as_batch(examples, kind):
    if isinstance(examples, kind):
        return [examples]
    batch = list(examples)
    if any(not isinstance(e, kind) for e in batch):
        raise HeadError(f"expected {kind.__name__} examples")
    return batch


def dsp_loss(examples, enc, head: LinearHead, with_grad: bool = False) -> LossValue:
    batch = _as_batch(examples, SpeakerExample)
    if head.c != 2:
        raise HeadError(f"DSP head must be binary, got c={head.c}")
    seqs = [enc.tokenize_utterance(ex.utterance) for ex in batch]
    return _cls_softmax_ce(seqs, [ex.label for ex in batch], enc, head, with_grad)


def dcv_loss(examples, enc, head: LinearHead, with_grad: bool = False) -> LossValue:
    batch = _as_batch(examples, CoherenceExample)
    if head.c != 2:
        raise HeadError(f"DCV head must be binary, got c={head.c}")
    seqs = [enc.tokenize_dialogue(ex.dialogue) for ex in batch]
    return _cls_softmax_ce(seqs, [ex.label for ex in batch], enc, head, with_grad)


def enp_loss(examples, enc, head: LinearHead, with_grad: bool = False) -> LossValue:
    batch = _as_batch(examples, EntityCountExample)
    seqs = [enc.tokenize_utterance(ex.utterance) for ex in batch]
    return _cls_softmax_ce(seqs, [ex.count_class for ex in batch], enc, head, with_grad)


def int_loss(texts: Sequence[str], labels: Sequence[int], enc, head: LinearHead,
             with_grad: bool = False) -> LossValue:
    seqs = [enc.tokenize_text(t) for t in texts]
    return _cls_softmax_ce(seqs, labels, enc, head, with_grad)


def int_predict(texts: Sequence[str], enc, head: LinearHead) -> list[int]:
    out = enc.encode_batch([enc.tokenize_text(t) for t in texts])
    return head.logits(out.cls_vector).argmax(axis=1).tolist()


def da_loss(histories: Sequence[Sequence[Utterance]], act_sets: Sequence[set[int]],
            enc, head: LinearHead, with_grad: bool = False) -> LossValue:
    """Multi-label sigmoid BCE, summed over acts, averaged over the batch."""
    if not histories:
        raise HeadError("empty batch")
    if len(histories) != len(act_sets):
        raise HeadError("batch size mismatch between inputs and labels")
    seqs = [enc.tokenize_history(h) for h in histories]
    out = enc.encode_batch(seqs, with_cache=with_grad)
    B = len(seqs)
    logits = head.logits(out.cls_vector)  # (B, n_acts)
    y = np.zeros_like(logits)
    for i, acts in enumerate(act_sets):
        for a in acts:
            if not 0 <= a < head.c:
                raise HeadError(f"act index {a} out of range for {head.c} acts")
            y[i, a] = 1.0
    # stable BCE with logits: max(z,0) - z*y + log(1+exp(-|z|))
    z = logits
    loss_mat = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = float(loss_mat.sum(axis=1).mean())
    sig = 1.0 / (1.0 + np.exp(-z))
    pred_sets = [set(np.flatnonzero(sig[i] > 0.5).tolist()) for i in range(B)]
    diag = {
        "pred_sets": [sorted(s) for s in pred_sets],
        "exact": [pred_sets[i] == set(act_sets[i]) for i in range(B)],
    }
    grads = None
    if with_grad:
        dlogits = (sig - y) / B
        grads = {
            f"{head.name}/W": out.cls_vector.T @ dlogits,
            f"{head.name}/b": dlogits.sum(axis=0),
        }
        d_tokens = np.zeros_like(out.token_vectors)
        d_tokens[:, 0, :] = dlogits @ head.params[f"{head.name}/W"].T
        _merge(grads, enc.backward(out, d_tokens))
    return LossValue(loss, diag, grads)


def da_predict(histories: Sequence[Sequence[Utterance]], enc, head: LinearHead,
               threshold: float = 0.5) -> list[set[int]]:
    out = enc.encode_batch([enc.tokenize_history(h) for h in histories])
    sig = 1.0 / (1.0 + np.exp(-head.logits(out.cls_vector)))
    return [set(np.flatnonzero(row > threshold).tolist()) for row in sig]


# --- shared cosine similarity (single implementation for CRM, RS and DST) ---

def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        raise HeadError("zero-norm vector: cosine similarity undefined")
    return float(a @ b / (na * nb))


def _cosine_with_grads(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        raise HeadError("zero-norm vector: cosine similarity undefined")
    cos = float(a @ b / (na * nb))
    da = b / (na * nb) - cos * a / (na * na)
    db = a / (na * nb) - cos * b / (nb * nb)
    return cos, da, db


def contrastive_loss(
    contexts: Sequence[Sequence[Utterance]],
    golds: Sequence[Utterance],
    negatives: Sequence[Sequence[Utterance]],
    enc,
    with_grad: bool = False,
    temperature: float = 1.0,
) -> LossValue:
    """Siamese cosine + (1+K)-way softmax cross-entropy with the gold at index 0."""
    if not contexts:
        raise HeadError("empty batch")
    if not len(contexts) == len(golds) == len(negatives):
        raise HeadError("batch size mismatch")
    if any(len(n) < 1 for n in negatives):
        raise HeadError("each example needs at least one negative")
    B = len(contexts)
    ctx_seqs = [enc.tokenize_history(c) for c in contexts]
    cand_seqs, cand_slices = [], []
    for g, negs in zip(golds, negatives):
        start = len(cand_seqs)
        cand_seqs.append(enc.tokenize_utterance(g))
        cand_seqs.extend(enc.tokenize_utterance(n) for n in negs)
        cand_slices.append((start, len(cand_seqs)))

    ctx_out = enc.encode_batch(ctx_seqs, with_cache=with_grad)
    cand_out = enc.encode_batch(cand_seqs, with_cache=with_grad)

    losses, ranks = [], []
    d_ctx = np.zeros_like(ctx_out.cls_vector)
    d_cand = np.zeros_like(cand_out.cls_vector)
    for i, (start, stop) in enumerate(cand_slices):
        c = ctx_out.cls_vector[i]
        n_cand = stop - start
        sims = np.empty(n_cand)
        dc_parts, dr_parts = [], []
        for k in range(n_cand):
            cos, dc, dr = _cosine_with_grads(c, cand_out.cls_vector[start + k])
            sims[k] = cos
            dc_parts.append(dc)
            dr_parts.append(dr)
        p = K.softmax_rows((sims / temperature)[None, :])[0]
        losses.append(-np.log(p[0]))
        ranks.append(int((sims > sims[0]).sum()))  # ties keep the gold ahead
        if with_grad:
            dsim = p.copy()
            dsim[0] -= 1.0
            dsim /= B * temperature
            for k in range(n_cand):
                d_ctx[i] += dsim[k] * dc_parts[k]
                d_cand[start + k] += dsim[k] * dr_parts[k]

    loss = float(np.mean(losses))
    diag = {"gold_rank": ranks, "correct": [r == 0 for r in ranks]}
    grads = None
    if with_grad:
        dt_ctx = np.zeros_like(ctx_out.token_vectors)
        dt_ctx[:, 0, :] = d_ctx
        grads = enc.backward(ctx_out, dt_ctx)
        dt_cand = np.zeros_like(cand_out.token_vectors)
        dt_cand[:, 0, :] = d_cand
        _merge(grads, enc.backward(cand_out, dt_cand))
    return LossValue(loss, diag, grads)


def crm_loss(examples, enc, with_grad: bool = False, temperature: float = 1.0) -> LossValue:
    batch = _as_batch(examples, MatchExample)
    return contrastive_loss(
        [ex.context for ex in batch],
        [ex.gold_response for ex in batch],
        [ex.negatives for ex in batch],
        enc,
        with_grad,
        temperature,
    )


def rs_score(history: Sequence[Utterance], candidate: Utterance | str, enc) -> float:
    """Siamese similarity between a dialogue history and one candidate response."""
    if isinstance(candidate, str):
        cand_seq = enc.tokenize_text(candidate)
    else:
        cand_seq = enc.tokenize_utterance(candidate)
    out = enc.encode_batch([enc.tokenize_history(history), cand_seq])
    return cosine(out.cls_vector[0], out.cls_vector[1])


def rs_rank(history: Sequence[Utterance], candidates: Sequence[str], enc) -> list[float]:
    seqs = [enc.tokenize_history(history)] + [enc.tokenize_text(c) for c in candidates]
    out = enc.encode_batch(seqs)
    c = out.cls_vector[0]
    return [cosine(c, out.cls_vector[1 + k]) for k in range(len(candidates))]


def dur_loss(examples, enc, scorer: DURScorer, with_grad: bool = False) -> LossValue:
    """Reordering loss: cross-entropy between the softmax over per-utterance
    reorder scores (scored from the shuffled window's marker vectors) and the
    target position distribution."""
    batch = _as_batch(examples, ReorderExample)
    seqs, usable, skipped = [], [], 0
    for ex in batch:
        seq = enc.tokenize_dialogue(ex.dialogue)
        markers = seq.ordered_markers()
        W = len(ex.permutation)
        n_total = len(ex.dialogue.utterances)
        n_kept = len(markers)
        # markers cover the newest n_kept turns; window offset in the kept list
        first_kept = n_total - n_kept
        if ex.window_start < first_kept:
            skipped += 1  # truncation ate (part of) the window
            continue
        seqs.append(seq)
        usable.append((ex, markers[ex.window_start - first_kept:][:W]))
    if not usable:
        raise HeadError(f"no usable reorder examples (skipped {skipped} truncated windows)")

    out = enc.encode_batch(seqs, with_cache=with_grad)
    B = len(usable)
    losses, excess, caches = [], [], []
    d_tokens = np.zeros_like(out.token_vectors) if with_grad else None
    grads = _zero_grads(scorer.params) if with_grad else None
    for i, (ex, positions) in enumerate(usable):
        M = out.token_vectors[i][positions]  # (W, d)
        s, cache = scorer.scores(M)
        y_p = K.softmax_rows(s[None, :])[0]
        y_t = np.asarray(ex.target_distribution)
        li = float(-(y_t * np.log(y_p + DUR_EPS)).sum())
        losses.append(li)
        excess.append(li + float((y_t * np.log(y_t)).sum()))  # KL(y_t || y_p) up to eps
        if with_grad:
            dy_p = -(y_t / (y_p + DUR_EPS)) / B
            ds = K.softmax_rows_grad(y_p[None, :], dy_p[None, :])[0]
            dM = scorer.backward(cache, ds, grads)
            for j, pos in enumerate(positions):
                d_tokens[i, pos, :] += dM[j]
    if with_grad:
        _merge(grads, enc.backward(out, d_tokens))
    diag = {"excess": excess, "skipped": skipped, "n": B}
    return LossValue(float(np.mean(losses)), diag, grads)


def mlm_loss(examples, enc, lm_head: LMHead, with_grad: bool = False) -> LossValue:
    """Mean cross-entropy over each example's masked positions, then batch mean."""
    batch = _as_batch(examples, MaskedExample)
    seqs = [TokenSequence(ids=list(ex.tokens)) for ex in batch]
    out = enc.encode_batch(seqs, with_cache=with_grad)
    B = len(batch)
    W = lm_head.params["lm/W"]
    losses, n_correct, n_pos = [], 0, 0
    grads = _zero_grads(lm_head.params) if with_grad else None
    d_tokens = np.zeros_like(out.token_vectors) if with_grad else None
    for i, ex in enumerate(batch):
        vecs = out.token_vectors[i][ex.masked_positions]  # (m, d)
        logits = lm_head.logits(vecs)
        p = K.softmax_rows(logits)
        y = np.asarray(ex.original_ids)
        m = len(y)
        losses.append(float(-np.log(p[np.arange(m), y]).mean()))
        n_correct += int((p.argmax(axis=1) == y).sum())
        n_pos += m
        if with_grad:
            dlogits = p.copy()
            dlogits[np.arange(m), y] -= 1.0
            dlogits /= B * m
            grads["lm/W"] += vecs.T @ dlogits
            grads["lm/b"] += dlogits.sum(axis=0)
            dvecs = dlogits @ W.T
            for j, pos in enumerate(ex.masked_positions):
                d_tokens[i, pos, :] += dvecs[j]
    if with_grad:
        _merge(grads, enc.backward(out, d_tokens))
    diag = {"masked_accuracy": n_correct / n_pos, "n_positions": n_pos}
    return LossValue(float(np.mean(losses)), diag, grads)


class SlotProjectionBank:
    """Per-(domain, slot) projections G_j with frozen ontology value vectors.

    ``logit_scale`` multiplies the cosine similarities before the softmax
    (fixed, not learned; default 1.0 keeps the plain cosine softmax).
    Argmax prediction is unaffected; a larger scale only sharpens the
    cross-entropy so small-data fits converge reliably.
    """

    def __init__(self, values: dict[str, list[str]], params: dict[str, np.ndarray],
                 value_vectors: dict[str, np.ndarray], logit_scale: float = 1.0):
        if not values:
            raise HeadError("empty ontology")
        if logit_scale <= 0:
            raise HeadError(f"logit_scale must be positive, got {logit_scale}")
        self.pairs = sorted(values)
        self.values = values
        self.params = params
        self.value_vectors = value_vectors
        self.logit_scale = float(logit_scale)
        for pair in self.pairs:
            vals = values[pair]
            if len(vals) < 2:
                raise HeadError(f"(domain, slot) pair {pair!r} has {len(vals)} value(s); need >= 2")
            if len(set(vals)) != len(vals):
                raise HeadError(f"duplicate values under pair {pair!r}")
            if value_vectors[pair].shape[0] != len(vals):
                raise HeadError(f"value vector count mismatch for pair {pair!r}")
            value_vectors[pair].flags.writeable = False  # frozen while fine-tuning

    @classmethod
    def build(cls, enc, ontology: dict[str, list[str]], seed: int = 0,
              logit_scale: float = 1.0) -> "SlotProjectionBank":
        """Encode each value once with the given (checkpoint) encoder and freeze."""
        d = enc.config.d_model
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        values: dict[str, list[str]] = {}
        value_vectors: dict[str, np.ndarray] = {}
        for pair in sorted(ontology):
            vals = list(ontology[pair])
            values[pair] = vals
            # identity-plus-noise start so projected vectors are never zero-norm
            params[f"dst/{pair}/G"] = np.eye(d) + rng.normal(0.0, 0.02, (d, d))
            params[f"dst/{pair}/b"] = np.zeros(d)
            if len(vals) >= 2:
                out = enc.encode_batch([enc.tokenize_text(v) for v in vals])
                value_vectors[pair] = out.cls_vector.copy()
            else:
                value_vectors[pair] = np.zeros((len(vals), d))
        return cls(values, params, value_vectors, logit_scale)

    def value_index(self, pair: str, value: str) -> int:
        try:
            return self.values[pair].index(value)
        except KeyError:
            raise HeadError(f"unknown (domain, slot) pair {pair!r}") from None
        except ValueError:
            raise HeadError(f"value {value!r} not in ontology for pair {pair!r}") from None


def _dst_pair_scores(x: np.ndarray, bank: SlotProjectionBank, pair: str):
    G = bank.params[f"dst/{pair}/G"]
    b = bank.params[f"dst/{pair}/b"]
    a = G @ x + b
    vv = bank.value_vectors[pair]
    sims = np.empty(len(vv))
    da_parts = []
    for i in range(len(vv)):
        cos, da, _ = _cosine_with_grads(a, vv[i])
        sims[i] = cos
        da_parts.append(da)
    return a, sims, da_parts


def dst_loss(histories: Sequence[Sequence[Utterance]], golds: Sequence[dict[str, str]],
             enc, bank: SlotProjectionBank, with_grad: bool = False) -> LossValue:
    """Cross-entropy over each pair's value softmax, summed over pairs."""
    if not histories:
        raise HeadError("empty batch")
    if len(histories) != len(golds):
        raise HeadError("batch size mismatch")
    for g in golds:
        if set(g) != set(bank.pairs):
            missing = sorted(set(bank.pairs) ^ set(g))
            raise HeadError(f"gold state keys do not match ontology pairs, mismatch: {missing}")
    out = enc.encode_batch([enc.tokenize_history(h) for h in histories], with_cache=with_grad)
    B = len(histories)
    losses = []
    pair_correct, joint = 0, []
    grads = _zero_grads(bank.params) if with_grad else None
    d_tokens = np.zeros_like(out.token_vectors) if with_grad else None
    for i in range(B):
        x = out.cls_vector[i]
        total = 0.0
        all_ok = True
        dx = np.zeros_like(x) if with_grad else None
        for pair in bank.pairs:
            gold_idx = bank.value_index(pair, golds[i][pair])
            a, sims, da_parts = _dst_pair_scores(x, bank, pair)
            p = K.softmax_rows(bank.logit_scale * sims[None, :])[0]
            total += float(-np.log(p[gold_idx]))
            ok = int(sims.argmax()) == gold_idx
            pair_correct += ok
            all_ok &= ok
            if with_grad:
                dsim = p.copy()
                dsim[gold_idx] -= 1.0
                dsim *= bank.logit_scale / B
                da = np.zeros_like(a)
                for k in range(len(dsim)):
                    da += dsim[k] * da_parts[k]
                grads[f"dst/{pair}/G"] += np.outer(da, x)
                grads[f"dst/{pair}/b"] += da
                dx += bank.params[f"dst/{pair}/G"].T @ da
        losses.append(total)
        joint.append(all_ok)
        if with_grad:
            d_tokens[i, 0, :] = dx
    if with_grad:
        _merge(grads, enc.backward(out, d_tokens))
    diag = {
        "slot_accuracy": pair_correct / (B * len(bank.pairs)),
        "joint": joint,
    }
    return LossValue(float(np.mean(losses)), diag, grads)


def dst_predict(histories: Sequence[Sequence[Utterance]], enc,
                bank: SlotProjectionBank) -> list[dict[str, str]]:
    out = enc.encode_batch([enc.tokenize_history(h) for h in histories])
    preds = []
    for i in range(len(histories)):
        state = {}
        for pair in bank.pairs:
            _, sims, _ = _dst_pair_scores(out.cls_vector[i], bank, pair)
            state[pair] = bank.values[pair][int(sims.argmax())]
        preds.append(state)
    return preds
