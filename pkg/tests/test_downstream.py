import json

import pytest

from dialtask import synth
from dialtask.corpus import Speaker
from dialtask.downstream import (DataError, IntentExample, SelectionPool,
                                 load_acts, load_intent, load_ontology,
                                 load_selection, load_states, load_task_data)


def _write_jsonl(path, records):
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8")


def test_load_intent(tmp_path):
    p = tmp_path / "int.jsonl"
    _write_jsonl(p, [{"text": "book a table", "intent": "find_restaurant"},
                     {"text": "blah", "intent": "oos"}])
    examples = load_intent(p)
    assert examples[0] == IntentExample("book a table", "find_restaurant")
    assert examples[1].intent == "oos"


def test_loader_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"text": "hi", "intent": "x"}\n{"text": "no intent"}\n', encoding="utf-8")
    with pytest.raises(DataError, match=":2:"):
        load_intent(p)
    p.write_text("not json\n", encoding="utf-8")
    with pytest.raises(DataError, match=":1:"):
        load_intent(p)


def test_load_acts_and_turns(tmp_path):
    p = tmp_path / "da.jsonl"
    _write_jsonl(p, [{"turns": [{"speaker": "USER", "text": "hi"}], "acts": ["greet"]}])
    examples = load_acts(p)
    assert examples[0].history[0].speaker is Speaker.USER
    assert examples[0].acts == ["greet"]
    _write_jsonl(p, [{"turns": [], "acts": []}])
    with pytest.raises(DataError, match="non-empty"):
        load_acts(p)


def test_load_selection_dispatches_on_candidates(tmp_path):
    p = tmp_path / "rs.jsonl"
    ctx = [{"speaker": "USER", "text": "hello"}]
    _write_jsonl(p, [
        {"context": ctx, "response": "hi there"},
        {"context": ctx, "candidates": ["a", "b", "c"], "gold_index": 2},
    ])
    plain, pool = load_selection(p)
    assert plain.response == "hi there"
    assert isinstance(pool, SelectionPool) and pool.gold_index == 2


def test_selection_pool_validates_gold_index(tmp_path):
    p = tmp_path / "rs.jsonl"
    _write_jsonl(p, [{"context": [{"speaker": "USER", "text": "x"}],
                      "candidates": ["a", "b"], "gold_index": 5}])
    with pytest.raises(DataError):
        load_selection(p)


def test_load_ontology(tmp_path):
    p = tmp_path / "ont.json"
    p.write_text(json.dumps({"r-food": ["none", "thai"], "r-area": ["none", "north"]}))
    onto = load_ontology(p)
    assert set(onto) == {"r-food", "r-area"}
    p.write_text(json.dumps({"r-food": ["lonely"]}))
    with pytest.raises(DataError):
        load_ontology(p)


def test_load_task_data_dst_validates_against_ontology(tmp_path):
    turns = [{"speaker": "USER", "text": "thai food please"}]
    for split in ("train", "val", "test"):
        _write_jsonl(tmp_path / f"{split}.jsonl",
                     [{"turns": turns, "state": {"r-food": "thai"}}])
    ont = tmp_path / "ont.json"
    ont.write_text(json.dumps({"r-food": ["none", "thai"]}))
    data = load_task_data("dst", tmp_path / "train.jsonl", tmp_path / "val.jsonl",
                          tmp_path / "test.jsonl", ont)
    assert data.ontology == {"r-food": ["none", "thai"]}

    ont.write_text(json.dumps({"r-food": ["none", "italian"]}))
    with pytest.raises(DataError, match="thai"):
        load_task_data("dst", tmp_path / "train.jsonl", tmp_path / "val.jsonl",
                       tmp_path / "test.jsonl", ont)


def test_intent_inventory_and_oos():
    data = synth.make_intent_data(seed=0, n_train=40, n_val=10, n_test=20)
    assert data.oos_intent == "oos"
    assert data.labels == sorted(data.labels)
    assert any(e.intent == "oos" for e in data.train + data.val + data.test)
    assert data.label_index(data.labels[0]) == 0
    with pytest.raises(DataError):
        data.label_index("not-a-label")


def test_synth_selection_pools_unique_gold():
    data = synth.make_selection_data(seed=0, n_train=10, n_val=5, n_pools=6, pool_size=25)
    for pool in data.test:
        assert len(pool.candidates) == 25
        assert pool.candidates[pool.gold_index] not in (
            pool.candidates[:pool.gold_index] + pool.candidates[pool.gold_index + 1:]
        )


def test_synth_states_cover_ontology():
    data = synth.make_state_data(seed=0, n_train=12, n_val=4, n_test=6)
    onto = data.ontology
    for ex in data.train + data.val + data.test:
        assert set(ex.state) == set(onto)
        for pair, value in ex.state.items():
            assert value in onto[pair]
    # the "none" value carries the unmentioned domains
    assert any(v == "none" for ex in data.train for v in ex.state.values())
    assert any(v != "none" for ex in data.train for v in ex.state.values())


def test_synth_corpus_turn_taking():
    # scripted dialogues open with the user, close with the system, and may
    # contain back-to-back user turns (filler before the goodbye) — the
    # generators must tolerate that, so the fixture keeps it
    corpus = synth.make_corpus(10, seed=4)
    for d in corpus.dialogues:
        assert d.utterances[0].speaker is Speaker.USER
        assert d.utterances[-1].speaker is Speaker.SYSTEM
        roles = {u.speaker for u in d.utterances}
        assert roles == {Speaker.USER, Speaker.SYSTEM}


def test_write_task_files_roundtrip(tmp_path):
    for task in ("int", "da", "rs", "dst"):
        data = synth.make_task_data(task, seed=3, **synth_sizes(task))
        paths = synth.write_task_files(data, tmp_path / task)
        back = load_task_data(task, paths["train"], paths["val"], paths["test"],
                              paths.get("ontology"))
        assert back.task == task
        assert len(back.train) == len(data.train)
        assert len(back.test) == len(data.test)
        if task == "dst":
            assert back.ontology == data.ontology
        if task == "int":
            assert back.labels == data.labels


def synth_sizes(task):
    if task == "rs":
        return dict(n_train=10, n_val=4, n_pools=3, pool_size=20)
    return dict(n_train=10, n_val=4, n_test=6)


def test_fixture_tree(tmp_path):
    manifest = synth.write_fixture_tree(tmp_path, seed=0, n_dialogues=8,
                                        int=dict(n_train=8, n_val=4, n_test=4),
                                        da=dict(n_train=8, n_val=4, n_test=4),
                                        rs=dict(n_train=8, n_val=4, n_pools=3, pool_size=10),
                                        dst=dict(n_train=8, n_val=4, n_test=4))
    assert set(manifest["tasks"]) == {"int", "da", "rs", "dst"}
    from dialtask.corpus import load_corpus

    assert len(load_corpus(manifest["corpus"]).dialogues) == 8
