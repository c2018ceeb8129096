import json

import numpy as np
import pytest

from dialtask import synth
from dialtask.corpus import Dialogue, Speaker, Utterance
from dialtask.encoder import tokenize_dialogue
from dialtask.taskgen import (CoherenceExample, GenConfig, GenStats, MaskedExample,
                              MatchExample, ReorderExample, TaskGenError,
                              dialogue_rng, dur_target, example_from_dict,
                              example_to_dict, gen_crm, gen_dcv, gen_dsp, gen_dur,
                              gen_enp, gen_mlm, generate, mask_token_ids,
                              read_examples, write_examples)


def _serialize(examples):
    return [json.dumps(example_to_dict(e), sort_keys=True) for e in examples]


# --- dataclass validation ---------------------------------------------------

def test_masked_example_validation():
    MaskedExample(tokens=[1, 9, 8, 2], masked_positions=[1, 2], original_ids=[7, 7])
    with pytest.raises(TaskGenError):
        MaskedExample(tokens=[1, 9, 8, 2], masked_positions=[2, 1], original_ids=[7, 7])
    with pytest.raises(TaskGenError):
        MaskedExample(tokens=[1, 9], masked_positions=[5], original_ids=[7])
    with pytest.raises(TaskGenError):
        MaskedExample(tokens=[1, 9], masked_positions=[1], original_ids=[])


def test_match_example_validation():
    ctx = [Utterance(Speaker.USER, "hello there")]
    gold = Utterance(Speaker.SYSTEM, "hi , how can i help ?")
    neg = Utterance(Speaker.SYSTEM, "the train leaves at noon")
    MatchExample(context=ctx, gold_response=gold, negatives=[neg])
    with pytest.raises(TaskGenError):
        MatchExample(context=ctx, gold_response=gold, negatives=[])
    with pytest.raises(TaskGenError):
        MatchExample(context=ctx, gold_response=gold,
                     negatives=[Utterance(Speaker.SYSTEM, gold.text)])


def test_reorder_example_validation():
    d = Dialogue("x", [Utterance(Speaker.USER, f"t {i}") for i in range(4)])
    ReorderExample(dialogue=d, window_start=0, permutation=[1, 0, 2],
                   target_distribution=dur_target([1, 0, 2]))
    with pytest.raises(TaskGenError):
        ReorderExample(dialogue=d, window_start=0, permutation=[0, 0, 2],
                       target_distribution=dur_target([1, 0, 2]))
    with pytest.raises(TaskGenError):
        ReorderExample(dialogue=d, window_start=3, permutation=[1, 0, 2],
                       target_distribution=dur_target([1, 0, 2]))
    with pytest.raises(TaskGenError):
        ReorderExample(dialogue=d, window_start=0, permutation=[1, 0, 2],
                       target_distribution=[0.5, 0.4, 0.3])


def test_coherence_example_validation():
    d = Dialogue("x", [Utterance(Speaker.USER, "a b"), Utterance(Speaker.SYSTEM, "c d")])
    with pytest.raises(TaskGenError):
        CoherenceExample(dialogue=d, label=2)
    with pytest.raises(TaskGenError):
        CoherenceExample(dialogue=d, label=1, replaced_indices=[0])
    with pytest.raises(TaskGenError):
        CoherenceExample(dialogue=d, label=0, replaced_indices=[])


# --- per-dialogue RNG -------------------------------------------------------

def test_dialogue_rng_keyed_by_seed_and_id():
    a = dialogue_rng(3, "d7").random(4)
    b = dialogue_rng(3, "d7").random(4)
    c = dialogue_rng(3, "d8").random(4)
    d = dialogue_rng(4, "d7").random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c) and not np.array_equal(a, d)


# --- MLM --------------------------------------------------------------------

def test_mask_count_and_restorability(rng):
    from dialtask.vocab import Vocabulary

    vocab = Vocabulary("alpha beta gamma delta".split())
    ids = [vocab.cls_id] + [vocab.id(t) for t in "alpha beta gamma delta".split() * 5] + [vocab.sep_id]
    ex = mask_token_ids(ids, vocab, rng, mask_rate=0.15)
    assert len(ex.masked_positions) == int(np.ceil(0.15 * 20))
    for pos, orig in zip(ex.masked_positions, ex.original_ids):
        assert orig == ids[pos]
    untouched = set(range(len(ids))) - set(ex.masked_positions)
    assert all(ex.tokens[i] == ids[i] for i in untouched)


def test_mask_skips_too_short(vocab, rng):
    assert mask_token_ids([vocab.cls_id, vocab.id("alpha"), vocab.sep_id], vocab, rng, 0.15) is None


def test_mlm_never_masks_special_tokens(sample_corpus, vocab):
    for d, ex in zip(sample_corpus.dialogues, gen_mlm(sample_corpus, vocab, seed=0)):
        seq = tokenize_dialogue(d, vocab, 512)
        special_positions = {i for i, t in enumerate(seq.ids) if t in vocab.special_ids}
        assert special_positions.isdisjoint(ex.masked_positions)
        assert set(seq.marker_positions[Speaker.USER]).isdisjoint(ex.masked_positions)


def test_mlm_8010_10_split(sample_corpus, vocab):
    mask = keep = rand = 0
    for seed in range(30):
        for ex in gen_mlm(sample_corpus, vocab, seed=seed):
            for pos, orig in zip(ex.masked_positions, ex.original_ids):
                tok = ex.tokens[pos]
                if tok == vocab.mask_id:
                    mask += 1
                elif tok == orig:
                    keep += 1
                else:
                    rand += 1
    total = mask + keep + rand
    assert total > 5000
    assert abs(mask / total - 0.8) < 0.02
    assert abs(keep / total - 0.1) < 0.02
    assert abs(rand / total - 0.1) < 0.02


# --- DSP --------------------------------------------------------------------

def test_dsp_one_per_utterance(sample_corpus):
    examples = list(gen_dsp(sample_corpus))
    assert len(examples) == sample_corpus.num_utterances()
    for ex in examples:
        assert ex.label == (0 if ex.utterance.speaker == Speaker.USER else 1)


# --- CRM --------------------------------------------------------------------

def test_crm_shape_and_gold_exclusion(sample_corpus):
    examples = list(gen_crm(sample_corpus, k_neg=9, seed=0))
    n_candidates = sum(
        1
        for d in sample_corpus.dialogues
        for i, u in enumerate(d.utterances)
        if u.speaker == Speaker.SYSTEM and i > 0
    )
    assert len(examples) == n_candidates
    for ex in examples:
        assert len(ex.negatives) == 9
        assert ex.gold_response.speaker == Speaker.SYSTEM
        assert all(n.text != ex.gold_response.text for n in ex.negatives)
        assert all(n.speaker == Speaker.SYSTEM for n in ex.negatives)
        assert ex.context  # history is non-empty
        assert ex.context[-1].text != ex.gold_response.text


def test_crm_needs_two_dialogues():
    lone = synth.make_corpus(1, seed=0)
    with pytest.raises(TaskGenError):
        list(gen_crm(lone, k_neg=3, seed=0))


# --- DCV --------------------------------------------------------------------

def test_dcv_balance_and_consistency(sample_corpus):
    examples = list(gen_dcv(sample_corpus, corrupt_fraction=0.5, replace_prob=0.3, seed=0))
    assert len(examples) == 50
    by_id = {d.id: d for d in sample_corpus.dialogues}
    n_pos = sum(e.label for e in examples)
    assert abs(n_pos - (50 - n_pos)) <= 1
    for ex in examples:
        orig = by_id[ex.dialogue.id]
        assert len(ex.dialogue.utterances) == len(orig.utterances)  # length preserved
        if ex.label == 1:
            assert ex.dialogue.utterances == orig.utterances
            assert ex.replaced_indices == []
        else:
            assert ex.replaced_indices
            for j, (a, b) in enumerate(zip(ex.dialogue.utterances, orig.utterances)):
                if j in ex.replaced_indices:
                    assert a.speaker == b.speaker and a.text != b.text
                else:
                    assert a == b


def test_dcv_replacement_rate_matches_model():
    # per-turn Bernoulli(0.3) with one forced: for 10-turn dialogues the mean
    # replaced count is 10*0.3 + 0.7**10 ~= 3.03
    corpus = synth.make_corpus(60, seed=2, turn_counts=[10])
    counts = []
    for seed in range(15):
        for ex in gen_dcv(corpus, corrupt_fraction=0.5, replace_prob=0.3, seed=seed):
            if ex.label == 0:
                counts.append(len(ex.replaced_indices))
    assert len(counts) == 15 * 30
    assert abs(np.mean(counts) - 3.03) < 0.4
    assert min(counts) >= 1


def test_dcv_rejects_bad_fractions(sample_corpus):
    with pytest.raises(TaskGenError):
        list(gen_dcv(sample_corpus, corrupt_fraction=0.0))
    with pytest.raises(TaskGenError):
        list(gen_dcv(sample_corpus, replace_prob=1.5))


# --- ENP --------------------------------------------------------------------

def test_enp_clips_counts(annotated_corpus):
    examples = list(gen_enp(annotated_corpus, c_max=2))
    assert len(examples) == annotated_corpus.num_utterances()
    assert {e.count_class for e in examples} <= {0, 1, 2}
    raw = [u.entity_count for d in annotated_corpus.dialogues for u in d.utterances]
    for ex, c in zip(examples, raw):
        assert ex.count_class == min(c, 2)


def test_enp_requires_annotation(sample_corpus):
    first_id = sample_corpus.dialogues[0].id
    with pytest.raises(TaskGenError, match=first_id):
        list(gen_enp(sample_corpus))


# --- DUR --------------------------------------------------------------------

def test_dur_target_worked_example():
    t = dur_target([2, 1, 3])
    np.testing.assert_allclose(t, [0.2447, 0.0900, 0.6652], atol=5e-5)
    assert abs(sum(t) - 1.0) < 1e-12


def test_dur_window_properties(sample_corpus):
    by_id = {d.id: d for d in sample_corpus.dialogues}
    examples = list(gen_dur(sample_corpus, window=3, seed=0))
    assert len(examples) == 50
    for ex in examples:
        orig = by_id[ex.dialogue.id]
        w, p = ex.window_start, ex.permutation
        assert sorted(p) == [0, 1, 2] and p != [0, 1, 2]
        assert 0 <= w <= len(orig.utterances) - 3
        for j in range(3):
            assert ex.dialogue.utterances[w + j] == orig.utterances[w + p[j]]
        assert ex.dialogue.utterances[:w] == orig.utterances[:w]
        assert ex.dialogue.utterances[w + 3:] == orig.utterances[w + 3:]
        assert abs(sum(ex.target_distribution) - 1.0) <= 1e-6


def test_dur_skips_short_dialogues():
    corpus = synth.make_corpus(6, seed=1, turn_counts=[6])
    stats = GenStats()
    examples = list(gen_dur(corpus, window=8, seed=0, stats=stats))
    assert examples == [] and stats.skipped == 6


# --- dispatch, determinism, persistence -------------------------------------

@pytest.mark.parametrize("task", ["mlm", "dsp", "crm", "dcv", "enp", "dur"])
def test_generate_deterministic(task, annotated_corpus, vocab):
    cfg = GenConfig(k_neg=4)
    a = _serialize(generate(task, annotated_corpus, vocab, cfg, seed=11))
    b = _serialize(generate(task, annotated_corpus, vocab, cfg, seed=11))
    c = _serialize(generate(task, annotated_corpus, vocab, cfg, seed=12))
    assert a == b
    if task not in ("dsp", "enp"):  # those two draw no randomness
        assert a != c


@pytest.mark.parametrize("task", ["mlm", "dsp", "enp", "dur"])
def test_per_dialogue_generators_ignore_corpus_order(task, annotated_corpus, vocab):
    from dialtask.corpus import Corpus

    reversed_corpus = Corpus(name="rev", dialogues=list(reversed(annotated_corpus.dialogues)))
    cfg = GenConfig()
    fwd = _serialize(generate(task, annotated_corpus, vocab, cfg, seed=5))
    rev = _serialize(generate(task, reversed_corpus, vocab, cfg, seed=5))
    assert sorted(fwd) == sorted(rev)


def test_generate_unknown_task(sample_corpus, vocab):
    with pytest.raises(TaskGenError):
        list(generate("nope", sample_corpus, vocab, GenConfig(), seed=0))


def test_generate_stats(sample_corpus, vocab):
    stats = GenStats()
    examples = list(generate("dur", sample_corpus, vocab, GenConfig(window=3), seed=0, stats=stats))
    assert stats.produced == len(examples)
    assert stats.skipped == 0


@pytest.mark.parametrize("task", ["mlm", "dsp", "crm", "dcv", "enp", "dur"])
def test_jsonl_roundtrip(task, annotated_corpus, vocab, tmp_path):
    examples = list(generate(task, annotated_corpus, vocab, GenConfig(k_neg=3), seed=2))
    path = tmp_path / f"{task}.jsonl"
    n = write_examples(path, examples)
    assert n == len(examples)
    back = read_examples(path)
    assert _serialize(back) == _serialize(examples)
    assert type(back[0]) is type(examples[0])


def test_example_dict_rejects_unknown():
    with pytest.raises(TaskGenError):
        example_from_dict({"task": "nope"})
