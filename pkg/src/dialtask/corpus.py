"""Canonical dialogue data model: loading, validation, splitting, entity annotation.

Canonical file format is JSONL, one dialogue per line:

    {"id": str, "domain": str|null, "turns": [{"speaker": "USER"|"SYSTEM", "text": str}]}

Annotated corpora additionally carry an integer "entity_count" per turn.
External datasets are translated into this format by adapters (see
``adapt_woz`` for one example); the pipeline itself only ever sees the
canonical schema.
"""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Protocol

import numpy as np


class CorpusError(ValueError):
    """Raised for schema violations and malformed corpus files."""


class Speaker(str, Enum):
    USER = "USER"
    SYSTEM = "SYSTEM"


class Split(str, Enum):
    TRAIN = "TRAIN"
    VALID = "VALID"
    TEST = "TEST"


# Statistics of the nine-dataset task-oriented pre-training union this toolkit
# is designed around. Recorded as metadata only; fetching the source datasets
# is out of scope.
PRETRAIN_UNION = {
    "datasets": [
        "Frames",
        "MetaLWOZ",
        "WOZ",
        "CamRest676",
        "MSR-E2E",
        "MWOZ",
        "Schema",
        "SMD",
        "Taskmaster",
    ],
    "dialogues": 100_707,
    "utterances": 1_388_152,
    "domains": 60,
}


@dataclass
class Utterance:
    speaker: Speaker
    text: str
    entity_count: int | None = None

    def __post_init__(self):
        self.speaker = Speaker(self.speaker)
        if not self.text.strip():
            raise CorpusError("utterance text is empty after trimming")
        if self.entity_count is not None and self.entity_count < 0:
            raise CorpusError(f"negative entity_count: {self.entity_count}")


@dataclass
class Dialogue:
    id: str
    utterances: list[Utterance]
    domain: str | None = None

    def __post_init__(self):
        if len(self.utterances) < 2:
            raise CorpusError(f"dialogue {self.id!r} has {len(self.utterances)} turns, need >= 2")

    @property
    def annotated(self) -> bool:
        return all(u.entity_count is not None for u in self.utterances)


@dataclass
class Corpus:
    name: str
    dialogues: list[Dialogue]
    split: Split = Split.TRAIN

    def __post_init__(self):
        self.split = Split(self.split)
        if not self.dialogues:
            raise CorpusError(f"corpus {self.name!r} is empty")
        seen = set()
        for d in self.dialogues:
            if d.id in seen:
                raise CorpusError(f"duplicate dialogue id {d.id!r}")
            seen.add(d.id)

    @property
    def annotated(self) -> bool:
        return all(d.annotated for d in self.dialogues)

    def num_utterances(self) -> int:
        return sum(len(d.utterances) for d in self.dialogues)


def _dialogue_from_record(rec: dict) -> Dialogue:
    if "id" not in rec or "turns" not in rec:
        raise CorpusError(f"record missing required keys, got {sorted(rec)}")
    turns = []
    for t in rec["turns"]:
        if t.get("speaker") not in (Speaker.USER.value, Speaker.SYSTEM.value):
            raise CorpusError(f"bad speaker {t.get('speaker')!r} (multi-party dialogue is not supported)")
        turns.append(Utterance(Speaker(t["speaker"]), t["text"], t.get("entity_count")))
    return Dialogue(id=rec["id"], utterances=turns, domain=rec.get("domain"))


def _dialogue_to_record(d: Dialogue) -> dict:
    turns = []
    for u in d.utterances:
        t = {"speaker": u.speaker.value, "text": u.text}
        if u.entity_count is not None:
            t["entity_count"] = u.entity_count
        turns.append(t)
    return {"id": d.id, "domain": d.domain, "turns": turns}


def load_corpus(path: str | Path, split: Split = Split.TRAIN, name: str | None = None) -> Corpus:
    """Parse a canonical JSONL file into a validated Corpus.

    Every line must parse; the first malformed line aborts the load with its
    line number in the error message.
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus file not found: {path}")
    dialogues = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                dialogues.append(_dialogue_from_record(rec))
            except (json.JSONDecodeError, CorpusError, TypeError, KeyError) as e:
                raise CorpusError(f"{path}:{lineno}: {e}") from e
    if not dialogues:
        raise CorpusError(f"{path}: no dialogues found")
    return Corpus(name=name or path.stem, dialogues=dialogues, split=split)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for d in corpus.dialogues:
            fh.write(json.dumps(_dialogue_to_record(d), ensure_ascii=False) + "\n")


class EntityAnnotator(Protocol):
    """Pluggable span annotator. Must be deterministic for a fixed input."""

    name: str

    def annotate(self, text: str) -> list[tuple[int, int]]:
        """Return non-overlapping (start, end) character spans, one per entity."""
        ...


# Small closed-class list used only to reject utterance-initial capitalization
# that is an artifact of sentence case rather than a name.
_STOPWORDS = frozenset(
    """a an and are at be but by can could did do does for from he hello hi how i if in is it me my no
    of ok okay on or our please she so thank thanks that the there they this to we what when where which
    who will would yes you your""".split()
)


class RuleBasedAnnotator:
    """Dependency-free entity annotator for tests and desk-scale runs.

    One entity per maximal run of capitalized tokens (a lone utterance-initial
    stopword does not count) plus one per standalone digit token. Real NER
    systems plug in behind the same interface.
    """

    name = "rulebased"

    _token_re = re.compile(r"\S+")

    def annotate(self, text: str) -> list[tuple[int, int]]:
        tokens = []  # (core_start, core_end, core, token_index)
        for i, m in enumerate(self._token_re.finditer(text)):
            tok = m.group()
            core = tok.strip(string.punctuation)
            if not core:
                continue
            start = m.start() + tok.index(core)
            tokens.append((start, start + len(core), core, i))

        spans: list[tuple[int, int]] = []
        run: list[tuple[int, int, str, int]] = []

        def flush():
            if not run:
                return
            first = run[0]
            is_initial_lone_stopword = (
                len(run) == 1 and first[3] == 0 and first[2].lower() in _STOPWORDS
            )
            if not is_initial_lone_stopword:
                spans.append((run[0][0], run[-1][1]))
            run.clear()

        for tok in tokens:
            core = tok[2]
            if core[0].isalpha() and core[0].isupper():
                run.append(tok)
                continue
            flush()
            if core.isdigit():
                spans.append((tok[0], tok[1]))
        flush()
        return spans


def annotate_entities(corpus: Corpus, annotator: EntityAnnotator) -> Corpus:
    """Return a new corpus with every utterance's entity_count filled in.

    Pure: the input corpus is left untouched. An annotator failure is reported
    with the dialogue id and turn index it occurred at.
    """
    new_dialogues = []
    for d in corpus.dialogues:
        new_utts = []
        for turn_idx, u in enumerate(d.utterances):
            try:
                spans = annotator.annotate(u.text)
            except Exception as e:
                raise CorpusError(
                    f"annotator {annotator.name!r} failed on dialogue {d.id!r} turn {turn_idx}: {e}"
                ) from e
            for s, e_ in spans:
                if not (0 <= s < e_ <= len(u.text)):
                    raise CorpusError(
                        f"annotator {annotator.name!r} returned out-of-bounds span ({s},{e_}) "
                        f"on dialogue {d.id!r} turn {turn_idx}"
                    )
            new_utts.append(replace(u, entity_count=len(spans)))
        new_dialogues.append(Dialogue(id=d.id, utterances=new_utts, domain=d.domain))
    return Corpus(name=corpus.name, dialogues=new_dialogues, split=corpus.split)


def split_corpus(
    corpus: Corpus, ratios: tuple[float, float, float] = (0.9, 0.05, 0.05), seed: int = 0
) -> tuple[Corpus, Corpus, Corpus]:
    """Partition dialogues into train/valid/test by a seeded shuffle.

    Sizes follow largest-remainder rounding of the ratios. Raises if the
    allocation leaves a split empty even though the corpus has enough
    dialogues to populate all three.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise CorpusError(f"need three positive ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise CorpusError(f"ratios must sum to 1, got {ratios} (sum {sum(ratios)})")

    n = len(corpus.dialogues)
    base = [int(np.floor(r * n)) for r in ratios]
    frac = [r * n - b for r, b in zip(ratios, base)]
    for _ in range(n - sum(base)):
        i = int(np.argmax(frac))
        base[i] += 1
        frac[i] = -1.0
    if n >= 3 and min(base) == 0:
        raise CorpusError(f"ratios {ratios} leave an empty split for {n} dialogues")

    order = np.random.default_rng(seed).permutation(n)
    shuffled = [corpus.dialogues[i] for i in order]
    out = []
    offset = 0
    for size, sp in zip(base, (Split.TRAIN, Split.VALID, Split.TEST)):
        part = shuffled[offset : offset + size]
        offset += size
        out.append(Corpus(name=f"{corpus.name}-{sp.value.lower()}", dialogues=part, split=sp))
    return tuple(out)


def adapt_woz(path: str | Path, name: str = "woz", split: Split = Split.TRAIN) -> Corpus:
    """Adapter for WOZ-style JSON exports (one JSON array of dialogues, each a
    list of turns with "system_transcript" and "transcript" fields).

    Serves as the template for writing adapters from other source datasets to
    the canonical schema.
    """
    path = Path(path)
    raw = json.loads(path.read_text(encoding="utf-8"))
    dialogues = []
    for rec in raw:
        utts = []
        for turn in rec["dialogue"]:
            sys_text = (turn.get("system_transcript") or "").strip()
            if sys_text:
                utts.append(Utterance(Speaker.SYSTEM, sys_text))
            usr_text = (turn.get("transcript") or "").strip()
            if usr_text:
                utts.append(Utterance(Speaker.USER, usr_text))
        if len(utts) >= 2:
            dialogues.append(Dialogue(id=str(rec["dialogue_idx"]), utterances=utts, domain=rec.get("domain")))
    if not dialogues:
        raise CorpusError(f"{path}: adapter produced no usable dialogues")
    return Corpus(name=name, dialogues=dialogues, split=split)


def flatten_text(d: Dialogue) -> str:
    """Whole-dialogue surface string, used for quick statistics and hashing."""
    return " ".join(u.text for u in d.utterances)


def corpus_fingerprint(corpus: Corpus) -> str:
    """Stable content hash used to key pretraining checkpoint caches."""
    import hashlib

    h = hashlib.sha256()
    for d in corpus.dialogues:
        h.update(d.id.encode())
        for u in d.utterances:
            h.update(b"\x00" + u.speaker.value.encode() + b"\x01" + u.text.encode())
            if u.entity_count is not None:
                h.update(str(u.entity_count).encode())
    return h.hexdigest()[:16]
