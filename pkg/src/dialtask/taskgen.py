"""Seeded generators turning a corpus into self-supervised training examples.

One generator per further pre-training task (DSP, CRM, DCV, ENP, DUR) plus
BERT-style masking for MLM. Every generator is a deterministic function of
(corpus, config, seed): randomness is drawn from a per-dialogue RNG keyed by
sha256(seed, dialogue id), so example streams replay byte-identically and are
independent of iteration order or parallel scheduling.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from dialtask.corpus import Corpus, CorpusError, Dialogue, Speaker, Utterance, _dialogue_from_record, _dialogue_to_record
from dialtask.encoder import tokenize_dialogue
from dialtask.vocab import Vocabulary


class TaskGenError(ValueError):
    pass


PRETRAIN_TASKS = ("mlm", "dsp", "crm", "dcv", "enp", "dur")


@dataclass
class GenConfig:
    mask_rate: float = 0.15
    k_neg: int = 9          # CRM negatives per example
    corrupt_fraction: float = 0.5
    replace_prob: float = 0.3
    window: int = 3         # DUR shuffled window size
    c_max: int = 10         # ENP count classes are 0..c_max
    max_len: int = 512


@dataclass
class GenStats:
    """Produced/skipped tallies a caller can pass in to observe skips."""

    produced: int = 0
    skipped: int = 0


@dataclass
class MaskedExample:
    tokens: list[int]
    masked_positions: list[int]
    original_ids: list[int]

    def __post_init__(self):
        if not self.masked_positions:
            raise TaskGenError("MaskedExample needs at least one masked position")
        if len(self.masked_positions) != len(self.original_ids):
            raise TaskGenError("masked_positions and original_ids lengths differ")
        if list(self.masked_positions) != sorted(set(self.masked_positions)):
            raise TaskGenError("masked_positions must be strictly increasing")
        if self.masked_positions[0] < 0 or self.masked_positions[-1] >= len(self.tokens):
            raise TaskGenError("masked position out of bounds")


@dataclass
class SpeakerExample:
    utterance: Utterance
    label: int  # USER=0, SYSTEM=1

    def __post_init__(self):
        want = 0 if self.utterance.speaker == Speaker.USER else 1
        if self.label != want:
            raise TaskGenError(f"label {self.label} inconsistent with speaker {self.utterance.speaker}")


@dataclass
class MatchExample:
    context: list[Utterance]
    gold_response: Utterance
    negatives: list[Utterance]

    def __post_init__(self):
        if not self.negatives:
            raise TaskGenError("MatchExample needs at least one negative")
        if any(n.text == self.gold_response.text for n in self.negatives):
            raise TaskGenError("gold response leaked into negatives")


@dataclass
class CoherenceExample:
    dialogue: Dialogue
    label: int  # coherent=1, incoherent=0
    replaced_indices: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.label not in (0, 1):
            raise TaskGenError(f"bad coherence label {self.label}")
        if self.label == 0 and not self.replaced_indices:
            raise TaskGenError("incoherent example must list replaced indices")
        if self.label == 1 and self.replaced_indices:
            raise TaskGenError("coherent example cannot list replaced indices")


@dataclass
class EntityCountExample:
    utterance: Utterance
    count_class: int

    def __post_init__(self):
        if self.count_class < 0:
            raise TaskGenError(f"negative count class {self.count_class}")


@dataclass
class ReorderExample:
    dialogue: Dialogue
    window_start: int
    permutation: list[int]  # slot j now holds the utterance originally at offset permutation[j]
    target_distribution: list[float]

    def __post_init__(self):
        W = len(self.permutation)
        if sorted(self.permutation) != list(range(W)):
            raise TaskGenError(f"invalid permutation {self.permutation}")
        if not 0 <= self.window_start <= len(self.dialogue.utterances) - W:
            raise TaskGenError(
                f"window [{self.window_start}, {self.window_start + W}) out of range "
                f"for {len(self.dialogue.utterances)} turns"
            )
        if len(self.target_distribution) != W:
            raise TaskGenError("target distribution length mismatch")
        if any(t <= 0 for t in self.target_distribution):
            raise TaskGenError("target distribution entries must be positive")
        if abs(sum(self.target_distribution) - 1.0) > 1e-6:
            raise TaskGenError("target distribution must sum to 1")


def dialogue_rng(seed: int, dialogue_id: str) -> np.random.Generator:
    """Stable per-dialogue stream: independent of corpus order and scheduling."""
    digest = hashlib.sha256(f"{seed}:{dialogue_id}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def mask_token_ids(
    ids: list[int],
    vocab: Vocabulary,
    rng: np.random.Generator,
    mask_rate: float,
) -> MaskedExample | None:
    """BERT-style masking over one token-id sequence.

    Masks ceil(mask_rate * n_eligible) positions among the non-special tokens,
    substituting 80% [MASK] / 10% random vocabulary token / 10% kept as-is.
    Returns None when fewer than two positions are eligible.
    """
    eligible = [i for i, t in enumerate(ids) if t not in vocab.special_ids]
    if len(eligible) < 2:
        return None
    n_mask = math.ceil(mask_rate * len(eligible))
    picked = sorted(int(i) for i in rng.choice(len(eligible), size=n_mask, replace=False))
    positions = [eligible[i] for i in picked]

    n_special = len(vocab.special_ids)
    out = list(ids)
    originals = []
    for pos in positions:
        originals.append(ids[pos])
        roll = rng.random()
        if roll < 0.8:
            out[pos] = vocab.mask_id
        elif roll < 0.9:
            out[pos] = int(rng.integers(n_special, len(vocab)))
        # else: keep the original token
    return MaskedExample(tokens=out, masked_positions=positions, original_ids=originals)


def gen_mlm(
    corpus: Corpus,
    vocab: Vocabulary,
    seed: int,
    mask_rate: float = 0.15,
    max_len: int = 512,
    stats: GenStats | None = None,
) -> Iterator[MaskedExample]:
    """Mask each dialogue's flattened token sequence (markers never masked)."""
    if not 0 < mask_rate < 1:
        raise TaskGenError(f"mask_rate must be in (0,1), got {mask_rate}")
    if len(vocab) <= len(vocab.special_ids):
        raise TaskGenError("vocabulary has no content tokens to substitute")
    for d in corpus.dialogues:
        seq = tokenize_dialogue(d, vocab, max_len)
        ex = mask_token_ids(seq.ids, vocab, dialogue_rng(seed, d.id), mask_rate)
        if ex is None:
            if stats:
                stats.skipped += 1
            continue
        if stats:
            stats.produced += 1
        yield ex


def gen_dsp(corpus: Corpus, stats: GenStats | None = None) -> Iterator[SpeakerExample]:
    for d in corpus.dialogues:
        for u in d.utterances:
            if stats:
                stats.produced += 1
            yield SpeakerExample(utterance=u, label=0 if u.speaker == Speaker.USER else 1)


def gen_crm(
    corpus: Corpus,
    k_neg: int = 9,
    seed: int = 0,
    stats: GenStats | None = None,
) -> Iterator[MatchExample]:
    """One example per SYSTEM turn with history; negatives from other dialogues."""
    if k_neg < 1:
        raise TaskGenError(f"k_neg must be >= 1, got {k_neg}")
    if len(corpus.dialogues) < 2:
        raise TaskGenError("CRM needs >= 2 dialogues for a negative pool")
    sys_pool = [
        (di, u)
        for di, d in enumerate(corpus.dialogues)
        for u in d.utterances
        if u.speaker == Speaker.SYSTEM
    ]
    for di, d in enumerate(corpus.dialogues):
        rng = dialogue_rng(seed, d.id)
        for i, u in enumerate(d.utterances):
            if u.speaker != Speaker.SYSTEM or i == 0:
                continue
            pool = [p for pj, p in sys_pool if pj != di and p.text != u.text]
            if not pool:
                raise TaskGenError(f"no negative candidates for dialogue {d.id!r} turn {i}")
            idx = rng.choice(len(pool), size=k_neg, replace=len(pool) < k_neg)
            if stats:
                stats.produced += 1
            yield MatchExample(
                context=list(d.utterances[:i]),
                gold_response=u,
                negatives=[pool[int(j)] for j in idx],
            )


def gen_dcv(
    corpus: Corpus,
    corrupt_fraction: float = 0.5,
    replace_prob: float = 0.3,
    seed: int = 0,
    stats: GenStats | None = None,
) -> Iterator[CoherenceExample]:
    """Corrupt a seeded fraction of dialogues by same-role utterance replacement."""
    if not 0 < corrupt_fraction < 1:
        raise TaskGenError(f"corrupt_fraction must be in (0,1), got {corrupt_fraction}")
    if not 0 < replace_prob <= 1:
        raise TaskGenError(f"replace_prob must be in (0,1], got {replace_prob}")
    if len(corpus.dialogues) < 2:
        raise TaskGenError("DCV needs >= 2 dialogues for a replacement pool")

    N = len(corpus.dialogues)
    n_corrupt = round(corrupt_fraction * N)
    chooser = np.random.default_rng(seed)
    corrupt_idx = set(int(i) for i in chooser.choice(N, size=n_corrupt, replace=False))

    by_role = {
        role: [
            (di, u)
            for di, d in enumerate(corpus.dialogues)
            for u in d.utterances
            if u.speaker == role
        ]
        for role in (Speaker.USER, Speaker.SYSTEM)
    }

    for di, d in enumerate(corpus.dialogues):
        if di not in corrupt_idx:
            if stats:
                stats.produced += 1
            yield CoherenceExample(dialogue=d, label=1)
            continue
        rng = dialogue_rng(seed, d.id)
        flags = rng.random(len(d.utterances)) < replace_prob
        if not flags.any():
            flags[int(rng.integers(len(d.utterances)))] = True
        turns = list(d.utterances)
        replaced = []
        for j, flag in enumerate(flags):
            if not flag:
                continue
            pool = [u for pj, u in by_role[turns[j].speaker] if pj != di and u.text != turns[j].text]
            if not pool:
                continue  # nothing distinct to swap in for this role
            sub = pool[int(rng.integers(len(pool)))]
            turns[j] = Utterance(sub.speaker, sub.text, sub.entity_count)
            replaced.append(j)
        if not replaced:
            raise TaskGenError(f"could not corrupt dialogue {d.id!r}: replacement pools empty")
        if stats:
            stats.produced += 1
        yield CoherenceExample(
            dialogue=Dialogue(id=d.id, utterances=turns, domain=d.domain),
            label=0,
            replaced_indices=replaced,
        )


def gen_enp(corpus: Corpus, c_max: int = 10, stats: GenStats | None = None) -> Iterator[EntityCountExample]:
    if c_max < 1:
        raise TaskGenError(f"c_max must be >= 1, got {c_max}")
    for d in corpus.dialogues:
        for i, u in enumerate(d.utterances):
            if u.entity_count is None:
                raise TaskGenError(
                    f"dialogue {d.id!r} turn {i} has no entity_count; run annotate_entities first"
                )
            if stats:
                stats.produced += 1
            yield EntityCountExample(utterance=u, count_class=min(u.entity_count, c_max))


def dur_target(permutation: list[int]) -> list[float]:
    """Softmax over the correct relative positions of the shuffled slots.

    Slot j holds the utterance originally at offset permutation[j], so its
    correct (1-based) relative position is permutation[j] + 1; the worked
    example [2,1,3] -> softmax(2,1,3).
    """
    pos = np.asarray(permutation, dtype=np.float64) + 1.0
    e = np.exp(pos - pos.max())
    return list(e / e.sum())


def gen_dur(
    corpus: Corpus,
    window: int = 3,
    seed: int = 0,
    stats: GenStats | None = None,
) -> Iterator[ReorderExample]:
    """Shuffle one contiguous window per dialogue with a non-identity permutation."""
    if window < 2:
        raise TaskGenError(f"window must be >= 2, got {window}")
    identity = list(range(window))
    for d in corpus.dialogues:
        n = len(d.utterances)
        if n < window:
            if stats:
                stats.skipped += 1
            continue
        rng = dialogue_rng(seed, d.id)
        start = int(rng.integers(0, n - window + 1))
        perm = identity
        while perm == identity:
            perm = [int(i) for i in rng.permutation(window)]
        turns = list(d.utterances)
        turns[start : start + window] = [d.utterances[start + p] for p in perm]
        if stats:
            stats.produced += 1
        yield ReorderExample(
            dialogue=Dialogue(id=d.id, utterances=turns, domain=d.domain),
            window_start=start,
            permutation=perm,
            target_distribution=dur_target(perm),
        )


# ---------------------------------------------------------------------------
# JSONL round-trip (one example per line, shape mirroring the dataclass fields)

def _utt_to_dict(u: Utterance) -> dict:
    rec = {"speaker": u.speaker.value, "text": u.text}
    if u.entity_count is not None:
        rec["entity_count"] = u.entity_count
    return rec


def _utt_from_dict(rec: dict) -> Utterance:
    return Utterance(Speaker(rec["speaker"]), rec["text"], rec.get("entity_count"))


def example_to_dict(ex) -> dict:
    if isinstance(ex, MaskedExample):
        return {"task": "mlm", "tokens": ex.tokens, "masked_positions": ex.masked_positions,
                "original_ids": ex.original_ids}
    if isinstance(ex, SpeakerExample):
        return {"task": "dsp", "utterance": _utt_to_dict(ex.utterance), "label": ex.label}
    if isinstance(ex, MatchExample):
        return {"task": "crm", "context": [_utt_to_dict(u) for u in ex.context],
                "gold_response": _utt_to_dict(ex.gold_response),
                "negatives": [_utt_to_dict(u) for u in ex.negatives]}
    if isinstance(ex, CoherenceExample):
        return {"task": "dcv", "dialogue": _dialogue_to_record(ex.dialogue), "label": ex.label,
                "replaced_indices": ex.replaced_indices}
    if isinstance(ex, EntityCountExample):
        return {"task": "enp", "utterance": _utt_to_dict(ex.utterance), "count_class": ex.count_class}
    if isinstance(ex, ReorderExample):
        return {"task": "dur", "dialogue": _dialogue_to_record(ex.dialogue),
                "window_start": ex.window_start, "permutation": ex.permutation,
                "target_distribution": ex.target_distribution}
    raise TaskGenError(f"unknown example type {type(ex).__name__}")


def example_from_dict(rec: dict):
    task = rec.get("task")
    if task == "mlm":
        return MaskedExample(rec["tokens"], rec["masked_positions"], rec["original_ids"])
    if task == "dsp":
        return SpeakerExample(_utt_from_dict(rec["utterance"]), rec["label"])
    if task == "crm":
        return MatchExample([_utt_from_dict(u) for u in rec["context"]],
                            _utt_from_dict(rec["gold_response"]),
                            [_utt_from_dict(u) for u in rec["negatives"]])
    if task == "dcv":
        return CoherenceExample(_dialogue_from_record(rec["dialogue"]), rec["label"],
                                rec["replaced_indices"])
    if task == "enp":
        return EntityCountExample(_utt_from_dict(rec["utterance"]), rec["count_class"])
    if task == "dur":
        return ReorderExample(_dialogue_from_record(rec["dialogue"]), rec["window_start"],
                              rec["permutation"], rec["target_distribution"])
    raise TaskGenError(f"unknown task tag {task!r}")


def write_examples(path: str | Path, examples: Iterable) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ex in examples:
            f.write(json.dumps(example_to_dict(ex), ensure_ascii=False) + "\n")
            n += 1
    return n


def read_examples(path: str | Path) -> list:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(example_from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TaskGenError) as e:
                raise TaskGenError(f"{path}:{lineno}: bad example record: {e}") from e
    return out


def generate(task: str, corpus: Corpus, vocab: Vocabulary | None, cfg: GenConfig, seed: int,
             stats: GenStats | None = None) -> Iterator:
    """Dispatch by task id; MLM additionally needs the vocabulary."""
    task = task.lower()
    if task == "mlm":
        if vocab is None:
            raise TaskGenError("MLM generation requires a vocabulary")
        return gen_mlm(corpus, vocab, seed, cfg.mask_rate, cfg.max_len, stats)
    if task == "dsp":
        return gen_dsp(corpus, stats)
    if task == "crm":
        return gen_crm(corpus, cfg.k_neg, seed, stats)
    if task == "dcv":
        return gen_dcv(corpus, cfg.corrupt_fraction, cfg.replace_prob, seed, stats)
    if task == "enp":
        return gen_enp(corpus, cfg.c_max, stats)
    if task == "dur":
        return gen_dur(corpus, cfg.window, seed, stats)
    raise TaskGenError(f"unknown pretrain task {task!r}; expected one of {PRETRAIN_TASKS}")
