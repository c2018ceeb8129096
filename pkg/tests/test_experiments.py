import json

import pytest

from dialtask import synth
from dialtask.corpus import save_corpus
from dialtask.encoder import EncoderConfig
from dialtask.experiments import (AffinityTable, ExperimentError, ExperimentSpec,
                                  PretrainSpec, affinity_overlap, collect_results,
                                  emit_report, nice_pairs, standard_grid,
                                  parse_affinity_literal, run_matrix)
from dialtask.metrics import MetricReport
from dialtask.taskgen import GenConfig
from dialtask.trainer import TrainConfig

# independent transcription of the affinity table, hand-typed from the source
# rather than parsed from the module literal, so the two must agree cell by cell
EXPECTED_MARKS = {
    "int": ({"single_turn_representation", "entity_information"}, {"single_turn_classifier"}),
    "da": ({"multi_turn_representation"}, {"multi_turn_classifier"}),
    "rs": ({"coherence"}, {"siamese_model"}),
    "dst": ({"multi_turn_representation", "entity_information"}, {"multi_turn_classifier"}),
    "dsp": ({"single_turn_representation"}, {"single_turn_classifier"}),
    "crm": ({"coherence"}, {"siamese_model"}),
    "dcv": ({"multi_turn_representation"}, {"multi_turn_classifier"}),
    "enp": ({"single_turn_representation", "entity_information"}, {"single_turn_classifier"}),
    "dur": ({"coherence"}, {"rank_loss"}),
}


# --- affinity table ---------------------------------------------------------

def test_table_matches_independent_transcription():
    table = AffinityTable.default()
    assert set(table.abilities) == set(EXPECTED_MARKS)
    for task, (abilities, structures) in EXPECTED_MARKS.items():
        assert table.abilities[task] == abilities, task
        assert table.structures[task] == structures, task


def test_affinity_overlap_crm_rs():
    ab, st = affinity_overlap("crm", "rs")
    assert ab == {"coherence"}
    assert st == {"siamese_model"}


def test_affinity_overlap_examples():
    ab, st = affinity_overlap("enp", "int")
    assert ab == {"single_turn_representation", "entity_information"}
    assert st == {"single_turn_classifier"}
    ab, st = affinity_overlap("dur", "rs")
    assert ab == {"coherence"} and st == set()
    ab, st = affinity_overlap("dcv", "dst")
    assert ab == {"multi_turn_representation"} and st == {"multi_turn_classifier"}


def test_affinity_unknown_task():
    with pytest.raises(ExperimentError):
        affinity_overlap("crm", "nope")


def test_literal_parser_rejects_malformed():
    with pytest.raises(ExperimentError):
        parse_affinity_literal("X | ※ . | . .\n")


# --- spec validation --------------------------------------------------------

def test_standard_grid_rows():
    names = [c.name for c in standard_grid()]
    assert names == ["BERT2", "MLM3", "DSP", "CRM", "DCV", "ENP", "DUR",
                     "Joint", "CRM w.o. mlm"]
    grid = standard_grid()
    assert grid[0].is_baseline
    assert grid[7].tasks == ("enp", "crm")
    assert grid[8].tasks == ("crm",) and not grid[8].mlm


def test_pretrain_spec_rejects_bad_tasks():
    with pytest.raises(ExperimentError):
        PretrainSpec("bad", ("mlm",))
    with pytest.raises(ExperimentError):
        PretrainSpec("bad", ("nope",))


@pytest.fixture()
def small_world(tmp_path):
    save_corpus(synth.make_corpus(16, seed=0), tmp_path / "corpus.jsonl")
    data = synth.make_task_data("int", seed=1, n_train=12, n_val=6, n_test=6)
    paths = synth.write_task_files(data, tmp_path / "int")
    return tmp_path, paths


def _spec(tmp_path, paths, configs, **kw):
    defaults = dict(
        corpus_path=str(tmp_path / "corpus.jsonl"),
        outdir=str(tmp_path / "grid"),
        configs=configs,
        tasks={"int": paths},
        seeds=(0,),
        encoder=EncoderConfig(d_model=32, n_layers=1, n_heads=2, max_len=96),
        pretrain_cfg=TrainConfig(max_steps=4, batch_size=4, eval_every=2,
                                 gen=GenConfig(k_neg=3, max_len=96)),
        finetune_cfg=TrainConfig(max_steps=4, batch_size=4, eval_every=2),
    )
    defaults.update(kw)
    return ExperimentSpec(**defaults)


def test_spec_validates(small_world):
    tmp_path, paths = small_world
    with pytest.raises(ExperimentError, match="duplicate"):
        _spec(tmp_path, paths, [PretrainSpec("A", ()), PretrainSpec("A", ())])
    with pytest.raises(ExperimentError, match="does not exist"):
        _spec(tmp_path, {"train": str(tmp_path / "missing.jsonl"),
                         "val": paths["val"], "test": paths["test"]},
              [PretrainSpec("A", ())])
    with pytest.raises(ExperimentError, match="ontology"):
        _spec(tmp_path, paths, [PretrainSpec("A", ())],
              tasks={"dst": paths})
    with pytest.raises(ExperimentError, match="seed"):
        _spec(tmp_path, paths, [PretrainSpec("A", ())], seeds=())


def test_spec_file_roundtrip(small_world):
    tmp_path, paths = small_world
    spec = _spec(tmp_path, paths, [PretrainSpec("MLM3", ()), PretrainSpec("CRM", ("crm",))])
    (tmp_path / "grid.json").write_text(json.dumps(spec.to_dict()), encoding="utf-8")
    back = ExperimentSpec.from_file(tmp_path / "grid.json")
    assert back.to_dict() == spec.to_dict()


# --- matrix runner ----------------------------------------------------------

def test_matrix_runs_caches_and_resumes(small_world):
    tmp_path, paths = small_world
    spec = _spec(tmp_path, paths,
                 [PretrainSpec("BERT2", (), mlm=False), PretrainSpec("CRM", ("crm",))])
    first = run_matrix(spec)
    assert first.ok
    assert sorted(first.pretrained) == ["BERT2", "CRM"]
    assert len(first.completed) == 2
    report = (tmp_path / "grid" / "report.md").read_text(encoding="utf-8")

    second = run_matrix(spec)
    assert second.ok
    assert second.pretrained == [] and second.completed == []
    assert len(second.skipped) == 4  # 2 checkpoints + 2 cells
    assert (tmp_path / "grid" / "report.md").read_text(encoding="utf-8") == report

    # resume: removing one cell recomputes exactly that cell
    target = tmp_path / "grid" / "cells" / "crm" / "int" / "seed0" / "metrics.json"
    before = target.read_bytes()
    target.unlink()
    third = run_matrix(spec)
    assert third.completed == ["crm/int/seed0"]
    assert target.read_bytes() == before  # determinism: identical metrics


def test_matrix_records_failures_and_continues(small_world):
    tmp_path, paths = small_world
    # DUR with an oversized window yields zero examples -> that config fails,
    # the rest of the grid still completes
    spec = _spec(tmp_path, paths,
                 [PretrainSpec("DUR", ("dur",)), PretrainSpec("MLM3", ())],
                 pretrain_cfg=TrainConfig(max_steps=4, batch_size=4, eval_every=2,
                                          gen=GenConfig(window=50, max_len=96)))
    result = run_matrix(spec)
    assert not result.ok
    assert set(result.failed) == {"pretrain:DUR"}
    assert result.completed == ["mlm3/int/seed0"]
    failures = json.loads((tmp_path / "grid" / "failures.json").read_text())
    assert "pretrain:DUR" in failures


def test_matrix_parallel_equals_serial(small_world):
    tmp_path, paths = small_world
    spec = _spec(tmp_path, paths, [PretrainSpec("MLM3", ()), PretrainSpec("DSP", ("dsp",))],
                 seeds=(0, 1))
    serial = run_matrix(spec, jobs=1)
    assert serial.ok and len(serial.completed) == 4
    cells = sorted((tmp_path / "grid" / "cells").rglob("metrics.json"))
    contents = [p.read_bytes() for p in cells]
    for p in cells:
        p.unlink()
    parallel = run_matrix(spec, jobs=2)
    assert parallel.ok and len(parallel.completed) == 4
    assert [p.read_bytes() for p in cells] == contents


# --- reporting --------------------------------------------------------------

def _report(config, task, values):
    return MetricReport(task, "synth", values)


def test_nice_pairs_rule(small_world):
    tmp_path, paths = small_world
    spec = _spec(tmp_path, paths,
                 [PretrainSpec("MLM3", ()), PretrainSpec("CRM", ("crm",)),
                  PretrainSpec("DSP", ("dsp",)), PretrainSpec("CRM w.o. mlm", ("crm",), mlm=False)],
                 tasks={"int": paths, "rs": paths})  # paths only checked at spec build
    results = {
        ("MLM3", "rs"): _report("MLM3", "rs", {"R_10@1": 0.50, "R_10@3": 0.70}),
        # improves both metrics -> nice
        ("CRM", "rs"): _report("CRM", "rs", {"R_10@1": 0.60, "R_10@3": 0.80}),
        # improves one of two -> not a strict majority -> not nice
        ("DSP", "rs"): _report("DSP", "rs", {"R_10@1": 0.60, "R_10@3": 0.70}),
        # would qualify but the no-MLM ablation is excluded from the rule
        ("CRM w.o. mlm", "rs"): _report("x", "rs", {"R_10@1": 0.9, "R_10@3": 0.9}),
    }
    pairs = nice_pairs(spec, results)
    assert [(p["pretrain"], p["downstream"]) for p in pairs] == [("CRM", "rs")]
    assert pairs[0]["shared_abilities"] == ["coherence"]
    assert pairs[0]["shared_structures"] == ["siamese_model"]


def test_report_structure(small_world):
    tmp_path, paths = small_world
    spec = _spec(tmp_path, paths, [PretrainSpec("MLM3", ()), PretrainSpec("DSP", ("dsp",))])
    result = run_matrix(spec)
    assert result.ok
    md = (tmp_path / "grid" / "report.md").read_text(encoding="utf-8")
    assert "## INT" in md
    assert "| config | Acc (all) |" in md
    lines = [l for l in md.splitlines() if l.startswith("| MLM3") or l.startswith("| DSP")]
    assert len(lines) == 2 and lines[0].startswith("| MLM3")  # spec row order
    csv_text = (tmp_path / "grid" / "report.csv").read_text(encoding="utf-8")
    header = csv_text.splitlines()[0]
    assert header == "task,dataset,config,metric,mean_pct,seed0"
    assert any('"MLM3"' in l for l in csv_text.splitlines()[1:])

    results = collect_results(spec, tmp_path / "grid")
    assert set(results) == {("MLM3", "int"), ("DSP", "int")}
