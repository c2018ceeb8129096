import json

import pytest

from dialtask.corpus import (Corpus, CorpusError, Dialogue, RuleBasedAnnotator,
                             Speaker, Split, Utterance, adapt_woz, annotate_entities,
                             corpus_fingerprint, load_corpus, save_corpus,
                             split_corpus)

from conftest import DATA


def _dialogue(did="d0", n=4):
    utts = [
        Utterance(Speaker.USER if i % 2 == 0 else Speaker.SYSTEM, f"turn {i}")
        for i in range(n)
    ]
    return Dialogue(id=did, utterances=utts)


def test_schema_validation():
    with pytest.raises(CorpusError):
        Utterance(Speaker.USER, "   ")
    with pytest.raises(CorpusError):
        Utterance(Speaker.USER, "hi", entity_count=-1)
    with pytest.raises(CorpusError):
        Dialogue(id="d", utterances=[Utterance(Speaker.USER, "only one")])
    with pytest.raises(CorpusError):
        Corpus(name="c", dialogues=[])
    with pytest.raises(CorpusError):
        Corpus(name="c", dialogues=[_dialogue("same"), _dialogue("same")])


def test_speaker_and_split_coercion():
    u = Utterance("USER", "hi there")
    assert u.speaker is Speaker.USER
    c = Corpus(name="c", dialogues=[_dialogue()], split="TEST")
    assert c.split is Split.TEST


def test_roundtrip(tmp_path, sample_corpus):
    path = tmp_path / "c.jsonl"
    save_corpus(sample_corpus, path)
    back = load_corpus(path)
    assert back.dialogues == sample_corpus.dialogues
    assert corpus_fingerprint(back) == corpus_fingerprint(sample_corpus)


def test_sample_corpus_shape(sample_corpus):
    assert len(sample_corpus.dialogues) == 50
    assert sample_corpus.num_utterances() == 412
    for d in sample_corpus.dialogues:
        assert len(d.utterances) >= 2


def test_load_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "x"}\n', encoding="utf-8")
    with pytest.raises(CorpusError):
        load_corpus(bad)
    bad.write_text("not json\n", encoding="utf-8")
    with pytest.raises(CorpusError):
        load_corpus(bad)


def test_annotator_counts():
    ann = RuleBasedAnnotator()
    # capitalized runs count once; digits count each; initial stopword-case does not
    assert len(ann.annotate("book Da Vinci Pizzeria for 2 people at 7")) == 3
    assert len(ann.annotate("The table is ready")) == 0
    assert len(ann.annotate("i want thai food")) == 0
    spans = ann.annotate("University Arms in Cambridge")
    assert spans == [(0, 15), (19, 28)]


def test_annotate_entities_pure(sample_corpus):
    out = annotate_entities(sample_corpus, RuleBasedAnnotator())
    assert out.annotated
    assert not sample_corpus.annotated      # input untouched
    assert out.num_utterances() == sample_corpus.num_utterances()
    counts = [u.entity_count for d in out.dialogues for u in d.utterances]
    assert all(c >= 0 for c in counts) and max(counts) > 0


def test_annotator_bad_span_reported():
    class Broken:
        name = "broken"

        def annotate(self, text):
            return [(0, len(text) + 5)]

    corpus = Corpus(name="c", dialogues=[_dialogue()])
    with pytest.raises(CorpusError, match="d0"):
        annotate_entities(corpus, Broken())


def test_split_corpus_partition(sample_corpus):
    tr, va, te = split_corpus(sample_corpus, (0.8, 0.1, 0.1), seed=3)
    assert len(tr.dialogues) + len(va.dialogues) + len(te.dialogues) == 50
    assert (len(tr.dialogues), len(va.dialogues), len(te.dialogues)) == (40, 5, 5)
    ids = {d.id for c in (tr, va, te) for d in c.dialogues}
    assert ids == {d.id for d in sample_corpus.dialogues}
    # deterministic
    tr2, _, _ = split_corpus(sample_corpus, (0.8, 0.1, 0.1), seed=3)
    assert [d.id for d in tr2.dialogues] == [d.id for d in tr.dialogues]


def test_split_corpus_rejects_bad_ratios(sample_corpus):
    with pytest.raises(CorpusError):
        split_corpus(sample_corpus, (0.5, 0.5, 0.0))
    with pytest.raises(CorpusError):
        split_corpus(sample_corpus, (0.7, 0.2, 0.2))


def test_fingerprint_sensitivity(sample_corpus):
    fp = corpus_fingerprint(sample_corpus)
    d0 = sample_corpus.dialogues[0]
    changed = Corpus(
        name=sample_corpus.name,
        dialogues=[
            Dialogue(d0.id, d0.utterances[:-1] + [Utterance(Speaker.USER, "different closer")],
                     d0.domain)
        ] + sample_corpus.dialogues[1:],
    )
    assert corpus_fingerprint(changed) != fp


def test_adapt_woz():
    corpus = adapt_woz(DATA / "woz_sample.json", name="woz-sample")
    assert corpus.name == "woz-sample"
    assert len(corpus.dialogues) == 3
    d = corpus.dialogues[0]
    assert d.id == "7" and d.domain == "restaurant"
    # empty leading system transcript dropped; user turn comes first
    assert d.utterances[0].speaker is Speaker.USER
    assert d.utterances[1].speaker is Speaker.SYSTEM


def test_adapt_woz_rejects_empty(tmp_path):
    p = tmp_path / "empty.json"
    p.write_text(json.dumps([{"dialogue_idx": 1, "dialogue": []}]), encoding="utf-8")
    with pytest.raises(CorpusError):
        adapt_woz(p)
