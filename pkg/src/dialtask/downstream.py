"""Downstream task datasets: intent recognition (INT), dialogue-act prediction
(DA), response selection (RS) and dialogue state tracking (DST).

File formats (one JSON object per line):
  INT  {"text": ..., "intent": ...}
  DA   {"turns": [{"speaker","text"}...], "acts": [...]}
  RS   train: {"context": [turns...], "response": ...}
       eval:  {"context": [turns...], "candidates": [...], "gold_index": k}
  DST  {"turns": [turns...], "state": {"domain-slot": value, ...}}
Ontology for DST: JSON map {"domain-slot": [value strings]}.

Label inventories (intent list, act list) are derived from the union of the
splits handed to the loader, sorted for a stable class indexing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from dialtask.corpus import Speaker, Utterance

DOWNSTREAM_TASKS = ("int", "da", "rs", "dst")
OOS_INTENT = "oos"  # conventional out-of-scope label


class DataError(ValueError):
    pass


@dataclass
class IntentExample:
    text: str
    intent: str


@dataclass
class ActExample:
    history: list[Utterance]
    acts: list[str]


@dataclass
class SelectionExample:
    context: list[Utterance]
    response: str


@dataclass
class SelectionPool:
    context: list[Utterance]
    candidates: list[str]
    gold_index: int

    def __post_init__(self):
        if not 0 <= self.gold_index < len(self.candidates):
            raise DataError(f"gold_index {self.gold_index} outside candidate list")


@dataclass
class StateExample:
    history: list[Utterance]
    state: dict[str, str]


def _need(rec: dict, key: str, path, lineno: int):
    if key not in rec:
        raise DataError(f"{path}:{lineno}: missing required field {key!r}")
    return rec[key]


def _turns(raw, path, lineno: int) -> list[Utterance]:
    if not isinstance(raw, list) or not raw:
        raise DataError(f"{path}:{lineno}: turns must be a non-empty list")
    out = []
    for t in raw:
        if "speaker" not in t or "text" not in t:
            raise DataError(f"{path}:{lineno}: turn missing 'speaker'/'text'")
        try:
            out.append(Utterance(Speaker(t["speaker"]), t["text"], t.get("entity_count")))
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: {e}") from e
    return out


def _records(path: str | Path):
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON: {e}") from e


def load_intent(path: str | Path) -> list[IntentExample]:
    out = [
        IntentExample(str(_need(r, "text", path, ln)), str(_need(r, "intent", path, ln)))
        for ln, r in _records(path)
    ]
    if not out:
        raise DataError(f"{path}: no examples")
    return out


def load_acts(path: str | Path) -> list[ActExample]:
    out = []
    for ln, r in _records(path):
        acts = _need(r, "acts", path, ln)
        if not isinstance(acts, list):
            raise DataError(f"{path}:{ln}: 'acts' must be a list")
        out.append(ActExample(_turns(_need(r, "turns", path, ln), path, ln), [str(a) for a in acts]))
    if not out:
        raise DataError(f"{path}: no examples")
    return out


def load_selection(path: str | Path) -> list[SelectionExample | SelectionPool]:
    out: list[SelectionExample | SelectionPool] = []
    for ln, r in _records(path):
        ctx = _turns(_need(r, "context", path, ln), path, ln)
        if "candidates" in r:
            out.append(SelectionPool(ctx, [str(c) for c in r["candidates"]],
                                     int(_need(r, "gold_index", path, ln))))
        else:
            out.append(SelectionExample(ctx, str(_need(r, "response", path, ln))))
    if not out:
        raise DataError(f"{path}: no examples")
    return out


def load_states(path: str | Path) -> list[StateExample]:
    out = []
    for ln, r in _records(path):
        state = _need(r, "state", path, ln)
        if not isinstance(state, dict):
            raise DataError(f"{path}:{ln}: 'state' must be an object")
        out.append(StateExample(_turns(_need(r, "turns", path, ln), path, ln),
                                {str(k): str(v) for k, v in state.items()}))
    if not out:
        raise DataError(f"{path}: no examples")
    return out


def load_ontology(path: str | Path) -> dict[str, list[str]]:
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, dict) or not raw:
        raise DataError(f"{path}: ontology must be a non-empty JSON object")
    out = {}
    for pair, values in raw.items():
        if not isinstance(values, list) or len(values) < 2:
            raise DataError(f"{path}: pair {pair!r} needs a list of >= 2 values")
        out[str(pair)] = [str(v) for v in values]
    return out


@dataclass
class TaskData:
    """Train/val/test splits plus the label inventory shared across them."""

    task: str
    train: list
    val: list
    test: list
    labels: list[str] = field(default_factory=list)  # intents or acts; [] for rs/dst
    ontology: dict[str, list[str]] | None = None     # dst only
    oos_intent: str | None = None                    # int only
    name: str = "data"

    def __post_init__(self):
        if self.task not in DOWNSTREAM_TASKS:
            raise DataError(f"unknown downstream task {self.task!r}")
        if not self.train or not self.val or not self.test:
            raise DataError(f"{self.task}: all of train/val/test must be non-empty")
        if self.task == "dst" and not self.ontology:
            raise DataError("dst requires an ontology")

    def label_index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise DataError(f"label {label!r} not in {self.task} inventory") from None


def _intent_inventory(splits: Sequence[list[IntentExample]]) -> tuple[list[str], str | None]:
    labels = sorted({e.intent for split in splits for e in split})
    return labels, OOS_INTENT if OOS_INTENT in labels else None


def _act_inventory(splits: Sequence[list[ActExample]]) -> list[str]:
    return sorted({a for split in splits for e in split for a in e.acts})


def load_task_data(
    task: str,
    train_path: str | Path,
    val_path: str | Path,
    test_path: str | Path,
    ontology_path: str | Path | None = None,
    name: str | None = None,
) -> TaskData:
    task = task.lower()
    name = name or Path(str(train_path)).stem
    if task == "int":
        splits = [load_intent(p) for p in (train_path, val_path, test_path)]
        labels, oos = _intent_inventory(splits)
        return TaskData(task, *splits, labels=labels, oos_intent=oos, name=name)
    if task == "da":
        splits = [load_acts(p) for p in (train_path, val_path, test_path)]
        return TaskData(task, *splits, labels=_act_inventory(splits), name=name)
    if task == "rs":
        splits = [load_selection(p) for p in (train_path, val_path, test_path)]
        return TaskData(task, *splits, name=name)
    if task == "dst":
        if ontology_path is None:
            raise DataError("dst requires --ontology")
        splits = [load_states(p) for p in (train_path, val_path, test_path)]
        onto = load_ontology(ontology_path)
        data = TaskData(task, *splits, ontology=onto, name=name)
        for split in splits:
            for ex in split:
                if set(ex.state) != set(onto):
                    raise DataError(
                        f"state keys {sorted(ex.state)} do not match ontology pairs"
                    )
                for pair, value in ex.state.items():
                    if value not in onto[pair]:
                        raise DataError(f"value {value!r} not in ontology for {pair!r}")
        return data
    raise DataError(f"unknown downstream task {task!r}")
