"""Synthetic task-oriented dialogue world for fixtures and desk-scale runs.

Templated multi-domain dialogues (restaurant / hotel / taxi) whose turns carry
the signal each objective needs: role-specific phrasing for speaker
prediction, capitalized venue names and digits for entity counting, slot
values embedded in the text for state tracking, and scripted intents/acts for
the downstream fixtures. Everything is a pure function of a seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dialtask.corpus import Corpus, Dialogue, Speaker, Utterance, save_corpus
from dialtask.downstream import (
    ActExample,
    IntentExample,
    SelectionExample,
    SelectionPool,
    StateExample,
    TaskData,
)
from dialtask.trainer import stream_seed

FOODS = ["italian", "chinese", "thai", "indian", "french"]
AREAS = ["north", "south", "centre", "east", "west"]
PRICES = ["cheap", "moderate", "expensive"]
DESTINATIONS = ["Airport", "Station", "Museum", "Harbour", "Stadium"]
RESTAURANTS = ["Marios", "Gardenia", "Lotus House", "Curry Palace", "Bistro Nord"]
HOTELS = ["Plaza", "Rosewood", "Grand Arms", "Harbour View", "City Lodge"]

NONE_VALUE = "none"

USER_FILLERS = [
    "hmm let me think about it",
    "one moment please",
    "that sounds really good",
    "could you repeat that please",
    "okay great thanks",
]
SYS_FILLERS = [
    ("anything else i can help with", {"reqmore"}),
    ("is there anything more you need", {"reqmore"}),
    ("happy to help with your plans", {"greet"}),
]
OOS_TEXTS = [
    "will it rain tomorrow afternoon",
    "tell me a joke please",
    "play some jazz music for me",
    "what time is it right now",
    "who won the game last night",
]

ACTS = ("bye", "greet", "inform", "offerbooked", "reqmore")


def ontology() -> dict[str, list[str]]:
    return {
        "restaurant-food": [NONE_VALUE] + FOODS,
        "restaurant-area": [NONE_VALUE] + AREAS,
        "hotel-price": [NONE_VALUE] + PRICES,
        "hotel-area": [NONE_VALUE] + AREAS,
        "taxi-destination": [NONE_VALUE] + DESTINATIONS,
    }


@dataclass
class ScriptedDialogue:
    dialogue: Dialogue
    user_intents: list[tuple[int, str]]   # (turn index, intent)
    sys_acts: list[tuple[int, frozenset[str]]]
    state: dict[str, str]


def _pick(rng: np.random.Generator, items):
    return items[int(rng.integers(len(items)))]


def _script(rng: np.random.Generator, did: str, n_turns: int) -> ScriptedDialogue:
    if n_turns < 6:
        raise ValueError(f"scripted dialogues need >= 6 turns, got {n_turns}")
    domain = _pick(rng, ["restaurant", "hotel", "taxi"])
    state = {pair: NONE_VALUE for pair in ontology()}
    turns: list[tuple[Speaker, str]] = []
    intents: list[tuple[int, str]] = []
    acts: list[tuple[int, frozenset[str]]] = []
    n_people = int(rng.integers(2, 7))
    hour = int(rng.integers(5, 10))

    if domain == "restaurant":
        food, area, venue = _pick(rng, FOODS), _pick(rng, AREAS), _pick(rng, RESTAURANTS)
        state["restaurant-food"], state["restaurant-area"] = food, area
        turns += [
            (Speaker.USER, f"i want a {food} restaurant in the {area}"),
            (Speaker.SYSTEM, f"{venue} is a great {food} place in the {area}"),
            (Speaker.USER, f"please book a table for {n_people} people at {hour} pm"),
            (Speaker.SYSTEM, f"booked {venue} for {n_people} people at {hour} pm"),
        ]
        intents += [(0, "find_restaurant"), (2, "book_restaurant")]
        acts += [(1, frozenset({"inform"})), (3, frozenset({"offerbooked"}))]
    elif domain == "hotel":
        price, area, venue = _pick(rng, PRICES), _pick(rng, AREAS), _pick(rng, HOTELS)
        state["hotel-price"], state["hotel-area"] = price, area
        turns += [
            (Speaker.USER, f"i need a {price} hotel in the {area}"),
            (Speaker.SYSTEM, f"the {venue} is a {price} hotel in the {area}"),
            (Speaker.USER, f"please book it for {n_people} nights"),
            (Speaker.SYSTEM, f"booked the {venue} for {n_people} nights"),
        ]
        intents += [(0, "find_hotel"), (2, "book_hotel")]
        acts += [(1, frozenset({"inform"})), (3, frozenset({"offerbooked"}))]
    else:
        dest = _pick(rng, DESTINATIONS)
        state["taxi-destination"] = dest
        turns += [
            (Speaker.USER, f"get me a taxi to the {dest}"),
            (Speaker.SYSTEM, f"i found a taxi to the {dest} for you"),
            (Speaker.USER, f"make it arrive by {hour} pm please"),
            (Speaker.SYSTEM, f"your taxi to the {dest} is booked for {hour} pm"),
        ]
        intents += [(0, "book_taxi"), (2, "book_taxi")]
        acts += [(1, frozenset({"inform"})), (3, frozenset({"inform", "offerbooked"}))]

    # pad with filler pairs, then close; odd counts get a lone user goodbye
    while len(turns) + 2 < n_turns:
        if (n_turns - len(turns)) % 2 == 1:
            intents.append((len(turns), "chitchat"))
            turns.append((Speaker.USER, _pick(rng, USER_FILLERS)))
        else:
            intents.append((len(turns), "chitchat"))
            turns.append((Speaker.USER, _pick(rng, USER_FILLERS)))
            text, act = _pick(rng, SYS_FILLERS)
            acts.append((len(turns), frozenset(act)))
            turns.append((Speaker.SYSTEM, text))
    intents.append((len(turns), "thank"))
    turns.append((Speaker.USER, "thank you goodbye"))
    acts.append((len(turns), frozenset({"bye"})))
    turns.append((Speaker.SYSTEM, "you are welcome have a nice day"))
    assert len(turns) == n_turns

    d = Dialogue(id=did, utterances=[Utterance(s, t) for s, t in turns], domain=domain)
    return ScriptedDialogue(d, intents, acts, state)


def _scripts(n: int, seed: int, turn_counts: list[int] | None, tag: str) -> list[ScriptedDialogue]:
    out = []
    for i in range(n):
        rng = np.random.default_rng(stream_seed(seed, f"{tag}:{i}"))
        n_turns = turn_counts[i % len(turn_counts)] if turn_counts else int(rng.integers(6, 11))
        out.append(_script(rng, f"syn-{i:04d}", n_turns))
    return out


def make_corpus(n: int, seed: int = 0, turn_counts: list[int] | None = None,
                name: str = "synth") -> Corpus:
    return Corpus(name, [s.dialogue for s in _scripts(n, seed, turn_counts, "corpus")])


def make_intent_data(seed: int = 0, n_train: int = 96, n_val: int = 24, n_test: int = 48,
                     oos_rate: float = 0.15) -> TaskData:
    def sample(n, tag):
        rng = np.random.default_rng(stream_seed(seed, tag))
        scripts = _scripts(max(1, n), seed, None, f"int-{tag}")
        pool = [(s.dialogue.utterances[i].text, intent)
                for s in scripts for i, intent in s.user_intents]
        out = []
        for _ in range(n):
            if rng.random() < oos_rate:
                out.append(IntentExample(_pick(rng, OOS_TEXTS), "oos"))
            else:
                text, intent = pool[int(rng.integers(len(pool)))]
                out.append(IntentExample(text, intent))
        return out

    splits = [sample(n_train, "train"), sample(n_val, "val"), sample(n_test, "test")]
    labels = sorted({e.intent for s in splits for e in s})
    return TaskData("int", *splits, labels=labels, oos_intent="oos", name="synth-int")


def make_act_data(seed: int = 0, n_train: int = 96, n_val: int = 24, n_test: int = 48) -> TaskData:
    def sample(n, tag):
        scripts = _scripts(n, seed, None, f"da-{tag}")
        rng = np.random.default_rng(stream_seed(seed, f"da-pick-{tag}"))
        out = []
        for s in scripts:
            idx, acts = s.sys_acts[int(rng.integers(len(s.sys_acts)))]
            out.append(ActExample(s.dialogue.utterances[:idx], sorted(acts)))
        return out

    splits = [sample(n_train, "train"), sample(n_val, "val"), sample(n_test, "test")]
    labels = sorted({a for s in splits for e in s for a in e.acts})
    return TaskData("da", *splits, labels=labels, name="synth-da")


def make_selection_data(seed: int = 0, n_train: int = 96, n_val: int = 24,
                        n_pools: int = 24, pool_size: int = 100) -> TaskData:
    def pairs(n, tag):
        scripts = _scripts(n, seed, None, f"rs-{tag}")
        rng = np.random.default_rng(stream_seed(seed, f"rs-pick-{tag}"))
        out = []
        for s in scripts:
            idx, _ = s.sys_acts[int(rng.integers(len(s.sys_acts)))]
            out.append(SelectionExample(s.dialogue.utterances[:idx],
                                        s.dialogue.utterances[idx].text))
        return out

    train, val = pairs(n_train, "train"), pairs(n_val, "val")

    # distractor pool: system responses from a disjoint set of scripted dialogues
    distractor_scripts = _scripts(max(200, 3 * pool_size), seed, None, "rs-distractors")
    distractors = sorted({s.dialogue.utterances[i].text
                          for s in distractor_scripts for i, _ in s.sys_acts})
    rng = np.random.default_rng(stream_seed(seed, "rs-pools"))
    test = []
    for ex in pairs(n_pools, "test"):
        negs = [t for t in distractors if t != ex.response]
        chosen = [negs[int(j)] for j in rng.choice(len(negs), size=pool_size - 1, replace=False)]
        gold_at = int(rng.integers(pool_size))
        cands = chosen[:gold_at] + [ex.response] + chosen[gold_at:]
        test.append(SelectionPool(ex.context, cands, gold_at))
    return TaskData("rs", train, val, test, name="synth-rs")


def make_state_data(seed: int = 0, n_train: int = 72, n_val: int = 18, n_test: int = 36) -> TaskData:
    def sample(n, tag):
        return [
            StateExample(s.dialogue.utterances, dict(s.state))
            for s in _scripts(n, seed, None, f"dst-{tag}")
        ]

    return TaskData("dst", sample(n_train, "train"), sample(n_val, "val"),
                    sample(n_test, "test"), ontology=ontology(), name="synth-dst")


def make_task_data(task: str, seed: int = 0, **sizes) -> TaskData:
    maker = {"int": make_intent_data, "da": make_act_data,
             "rs": make_selection_data, "dst": make_state_data}[task]
    return maker(seed=seed, **sizes)


# --- file emission mirroring the downstream loader formats ---

def _turns_json(utts) -> list[dict]:
    return [{"speaker": u.speaker.value, "text": u.text} for u in utts]


def _write_jsonl(path: Path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rec in records:
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


def write_task_files(data: TaskData, outdir: str | Path) -> dict[str, str]:
    """Write train/val/test JSONL (+ ontology for DST); returns the path map."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split in ("train", "val", "test"):
        examples = getattr(data, split)
        records = []
        for e in examples:
            if isinstance(e, IntentExample):
                records.append({"text": e.text, "intent": e.intent})
            elif isinstance(e, ActExample):
                records.append({"turns": _turns_json(e.history), "acts": e.acts})
            elif isinstance(e, SelectionExample):
                records.append({"context": _turns_json(e.context), "response": e.response})
            elif isinstance(e, SelectionPool):
                records.append({"context": _turns_json(e.context), "candidates": e.candidates,
                                "gold_index": e.gold_index})
            elif isinstance(e, StateExample):
                records.append({"turns": _turns_json(e.history), "state": e.state})
            else:
                raise TypeError(f"unexpected example type {type(e).__name__}")
        path = outdir / f"{data.task}-{split}.jsonl"
        _write_jsonl(path, records)
        paths[split] = str(path)
    if data.ontology is not None:
        path = outdir / "ontology.json"
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(data.ontology, f, indent=2, sort_keys=True)
            f.write("\n")
        paths["ontology"] = str(path)
    return paths


def write_fixture_tree(outdir: str | Path, seed: int = 0, n_dialogues: int = 50,
                       **task_sizes) -> dict:
    """Materialize a corpus plus all four downstream fixtures under outdir."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    corpus = make_corpus(n_dialogues, seed)
    corpus_path = outdir / "corpus.jsonl"
    save_corpus(corpus, corpus_path)
    manifest = {"corpus": str(corpus_path), "tasks": {}}
    for task in ("int", "da", "rs", "dst"):
        data = make_task_data(task, seed=seed, **task_sizes.get(task, {}))
        manifest["tasks"][task] = write_task_files(data, outdir / task)
    return manifest
