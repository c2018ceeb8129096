"""Experiment grids: pretrain-config x downstream-task matrices with cached
checkpoints, seed replication, affinity annotations and report emission.

In the standard grid the rows are further pre-training configurations —
BERT2 (no further pre-training), MLM3 (MLM only), one row per task, the
ENP+CRM joint row, and CRM without MLM — and the columns are the four
downstream tasks. Results land in a directory tree of per-cell JSON
files with atomic writes, so grids are resumable and cells can run in
parallel processes.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from dialtask.corpus import RuleBasedAnnotator, annotate_entities, corpus_fingerprint, load_corpus
from dialtask.downstream import DOWNSTREAM_TASKS, load_task_data
from dialtask.encoder import EncoderConfig, ReferenceEncoder, load_checkpoint, save_checkpoint
from dialtask.metrics import MetricReport, TASK_METRICS, aggregate_seeds
from dialtask.taskgen import GenConfig, PRETRAIN_TASKS
from dialtask.trainer import TrainConfig, evaluate, finetune, further_pretrain, vocab_from_corpus


class ExperimentError(ValueError):
    pass


# --- Affinity table: task abilities and structures --------------------------

ABILITIES = (
    "single_turn_representation",
    "multi_turn_representation",
    "coherence",
    "entity_information",
)
STRUCTURES = (
    "single_turn_classifier",
    "multi_turn_classifier",
    "siamese_model",
    "rank_loss",
)

# The affinity table as a fixed-width literal: one row per task, eight mark
# cells (four abilities, then four structures), "※" = marked.
AFFINITY_LITERAL = """\
INT  | ※ . . ※ | ※ . . .
DA   | . ※ . . | . ※ . .
RS   | . . ※ . | . . ※ .
DST  | . ※ . ※ | . ※ . .
DSP  | ※ . . . | ※ . . .
CRM  | . . ※ . | . . ※ .
DCV  | . ※ . . | . ※ . .
ENP  | ※ . . ※ | ※ . . .
DUR  | . . ※ . | . . . ※
"""


def parse_affinity_literal(text: str = AFFINITY_LITERAL) -> dict[str, tuple[frozenset[str], frozenset[str]]]:
    out = {}
    for line in text.strip().splitlines():
        name, ability_part, structure_part = (p.strip() for p in line.split("|"))
        marks = ability_part.split() + structure_part.split()
        if len(marks) != 8 or any(m not in ("※", ".") for m in marks):
            raise ExperimentError(f"malformed affinity row: {line!r}")
        abilities = frozenset(a for a, m in zip(ABILITIES, marks[:4]) if m == "※")
        structures = frozenset(s for s, m in zip(STRUCTURES, marks[4:]) if m == "※")
        out[name.lower()] = (abilities, structures)
    return out


@dataclass(frozen=True)
class AffinityTable:
    """Per task: its ability set and structure set."""

    abilities: dict[str, frozenset[str]]
    structures: dict[str, frozenset[str]]

    @classmethod
    def default(cls) -> "AffinityTable":
        rows = parse_affinity_literal()
        return cls(
            abilities={t: a for t, (a, _) in rows.items()},
            structures={t: s for t, (_, s) in rows.items()},
        )

    def overlap(self, p: str, d: str) -> tuple[frozenset[str], frozenset[str]]:
        for t in (p.lower(), d.lower()):
            if t not in self.abilities:
                raise ExperimentError(f"unknown task {t!r} in affinity table")
        return (
            self.abilities[p.lower()] & self.abilities[d.lower()],
            self.structures[p.lower()] & self.structures[d.lower()],
        )


def affinity_overlap(p: str, d: str, table: AffinityTable | None = None):
    return (table or AffinityTable.default()).overlap(p, d)


# --- experiment specification ----------------------------------------------

@dataclass
class PretrainSpec:
    name: str                  # row label, e.g. "MLM3", "CRM w.o. mlm"
    tasks: tuple[str, ...]     # further pre-training tasks (may be empty)
    mlm: bool = True           # include the MLM objective

    def __post_init__(self):
        for t in self.tasks:
            if t not in PRETRAIN_TASKS or t == "mlm":
                raise ExperimentError(f"config {self.name!r}: bad pretrain task {t!r}")

    @property
    def is_baseline(self) -> bool:
        """BERT2: no further pre-training stage at all."""
        return not self.tasks and not self.mlm


def standard_grid() -> list[PretrainSpec]:
    return [
        PretrainSpec("BERT2", (), mlm=False),
        PretrainSpec("MLM3", ()),
        PretrainSpec("DSP", ("dsp",)),
        PretrainSpec("CRM", ("crm",)),
        PretrainSpec("DCV", ("dcv",)),
        PretrainSpec("ENP", ("enp",)),
        PretrainSpec("DUR", ("dur",)),
        PretrainSpec("Joint", ("enp", "crm")),
        PretrainSpec("CRM w.o. mlm", ("crm",), mlm=False),
    ]


@dataclass
class ExperimentSpec:
    corpus_path: str
    outdir: str
    configs: list[PretrainSpec]
    tasks: dict[str, dict[str, str]]   # task -> {"train","val","test"[,"ontology"]}
    seeds: tuple[int, ...] = (0,)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain_cfg: TrainConfig = field(default_factory=TrainConfig)
    finetune_cfg: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if not self.configs:
            raise ExperimentError("spec needs at least one pretrain configuration")
        names = [c.name for c in self.configs]
        if len(set(names)) != len(names):
            raise ExperimentError(f"duplicate config names in {names}")
        if not self.tasks:
            raise ExperimentError("spec needs at least one downstream task")
        for task, paths in self.tasks.items():
            if task not in DOWNSTREAM_TASKS:
                raise ExperimentError(f"unknown downstream task {task!r}")
            for key in ("train", "val", "test"):
                if key not in paths:
                    raise ExperimentError(f"task {task!r}: missing {key!r} path")
                if not Path(paths[key]).exists():
                    raise ExperimentError(f"task {task!r}: {paths[key]} does not exist")
            if task == "dst" and "ontology" not in paths:
                raise ExperimentError("dst task requires an 'ontology' path")
        if not self.seeds:
            raise ExperimentError("spec needs at least one seed")

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentSpec":
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
        try:
            configs = [
                PretrainSpec(c["name"], tuple(c.get("tasks", ())), c.get("mlm", True))
                for c in raw["configs"]
            ]
            return cls(
                corpus_path=raw["corpus"],
                outdir=raw["outdir"],
                configs=configs,
                tasks=raw["tasks"],
                seeds=tuple(raw.get("seeds", [0])),
                encoder=EncoderConfig(**raw.get("encoder", {})),
                pretrain_cfg=_train_config(raw.get("pretrain", {})),
                finetune_cfg=_train_config(raw.get("finetune", {})),
            )
        except KeyError as e:
            raise ExperimentError(f"{path}: missing spec key {e}") from e

    def to_dict(self) -> dict:
        return {
            "corpus": self.corpus_path,
            "outdir": self.outdir,
            "configs": [{"name": c.name, "tasks": list(c.tasks), "mlm": c.mlm} for c in self.configs],
            "tasks": self.tasks,
            "seeds": list(self.seeds),
            "encoder": asdict(self.encoder),
            "pretrain": self.pretrain_cfg.to_dict(),
            "finetune": self.finetune_cfg.to_dict(),
        }


def _train_config(raw: dict) -> TrainConfig:
    raw = dict(raw)
    gen = GenConfig(**raw.pop("gen", {}))
    if "seeds" in raw:
        raw["seeds"] = tuple(raw["seeds"])
    return TrainConfig(**raw, gen=gen)


# --- matrix runner ----------------------------------------------------------

def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _config_key(spec: ExperimentSpec, cfg: PretrainSpec, fingerprint: str) -> str:
    payload = json.dumps(
        {
            "tasks": sorted(cfg.tasks),
            "mlm": cfg.mlm,
            "corpus": fingerprint,
            "encoder": asdict(spec.encoder),
            "train": spec.pretrain_cfg.to_dict(),
            "seed": spec.seeds[0],
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() else "-" for ch in name.lower()).strip("-")


@dataclass
class MatrixResult:
    outdir: str
    completed: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)    # cache hits
    failed: dict[str, str] = field(default_factory=dict)
    pretrained: list[str] = field(default_factory=list)  # configs trained this run

    @property
    def ok(self) -> bool:
        return not self.failed


def _ensure_checkpoint(spec: ExperimentSpec, cfg: PretrainSpec, corpus, vocab,
                       ckpt_dir: Path, fingerprint: str, result: MatrixResult) -> Path:
    key = _config_key(spec, cfg, fingerprint)
    path = ckpt_dir / f"{_slug(cfg.name)}-{key}.npz"
    if path.exists():
        result.skipped.append(f"pretrain:{cfg.name}")
        return path
    seed = spec.seeds[0]
    enc = ReferenceEncoder(spec.encoder, vocab, seed=seed)
    provenance = {"config": cfg.name, "tasks": list(cfg.tasks), "mlm": cfg.mlm,
                  "seed": seed, "steps": 0, "corpus_fingerprint": fingerprint}
    if cfg.is_baseline:
        save_checkpoint(path, enc, provenance)
    else:
        enc, record = further_pretrain(enc, list(cfg.tasks), corpus, spec.pretrain_cfg,
                                       seed=seed, include_mlm=cfg.mlm)
        provenance["steps"] = record.stopping_step
        save_checkpoint(path, enc, provenance)
        _atomic_write(path.with_suffix(".run.json"), record.to_json())
    result.pretrained.append(cfg.name)
    return path


def _run_cell(ckpt_path: str, task: str, paths: dict[str, str], cfg_dict: dict,
              seed: int, cell_dir: str) -> dict:
    """One (pretrain config, downstream task, seed) cell; runs in a worker."""
    enc, _ = load_checkpoint(ckpt_path)
    data = load_task_data(task, paths["train"], paths["val"], paths["test"],
                          paths.get("ontology"))
    cfg = _train_config(cfg_dict)
    model, record = finetune(enc, task, data, cfg, seed=seed)
    report = evaluate(model, data, batch_size=cfg.batch_size)
    cell = Path(cell_dir)
    cell.mkdir(parents=True, exist_ok=True)
    _atomic_write(cell / "run.json", record.to_json())
    _atomic_write(cell / "metrics.json", report.to_json())
    return json.loads(report.to_json())


def run_matrix(spec: ExperimentSpec, jobs: int = 1) -> MatrixResult:
    """Execute (or resume) the full grid; never aborts on one failed cell."""
    outdir = Path(spec.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    result = MatrixResult(outdir=str(outdir))

    corpus = load_corpus(spec.corpus_path)
    if any("enp" in c.tasks for c in spec.configs) and not corpus.annotated:
        corpus = annotate_entities(corpus, RuleBasedAnnotator())
    fingerprint = corpus_fingerprint(corpus)

    extra = []
    if "dst" in spec.tasks:
        with open(spec.tasks["dst"]["ontology"], encoding="utf-8") as f:
            extra = [v for vals in json.load(f).values() for v in vals]
    vocab = vocab_from_corpus(corpus, extra_texts=extra)

    _atomic_write(outdir / "grid.json", json.dumps(spec.to_dict(), indent=2, sort_keys=True))
    ckpt_dir = outdir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)

    checkpoints: dict[str, Path] = {}
    for cfg in spec.configs:
        try:
            checkpoints[cfg.name] = _ensure_checkpoint(spec, cfg, corpus, vocab,
                                                       ckpt_dir, fingerprint, result)
        except Exception as e:  # a broken config must not sink the grid
            result.failed[f"pretrain:{cfg.name}"] = f"{type(e).__name__}: {e}"

    pending = []
    for cfg in spec.configs:
        if cfg.name not in checkpoints:
            continue
        for task in spec.tasks:
            for seed in spec.seeds:
                cell_id = f"{_slug(cfg.name)}/{task}/seed{seed}"
                cell_dir = outdir / "cells" / cell_id
                if (cell_dir / "metrics.json").exists():
                    result.skipped.append(cell_id)
                    continue
                pending.append(
                    (cell_id, str(checkpoints[cfg.name]), task, spec.tasks[task],
                     spec.finetune_cfg.to_dict(), seed, str(cell_dir))
                )

    if jobs > 1 and pending:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {
                cell_id: pool.submit(_run_cell, *args)
                for cell_id, *args in pending
            }
            for cell_id, fut in futures.items():
                try:
                    fut.result()
                    result.completed.append(cell_id)
                except Exception as e:
                    result.failed[cell_id] = f"{type(e).__name__}: {e}"
    else:
        for cell_id, *args in pending:
            try:
                _run_cell(*args)
                result.completed.append(cell_id)
            except Exception as e:
                result.failed[cell_id] = f"{type(e).__name__}: {e}"

    if result.failed:
        _atomic_write(outdir / "failures.json", json.dumps(result.failed, indent=2, sort_keys=True))
    emit_report(spec, outdir)
    return result


# --- reporting --------------------------------------------------------------

def collect_results(spec: ExperimentSpec, outdir: Path) -> dict[tuple[str, str], MetricReport]:
    """(config name, task) -> seed-aggregated MetricReport for completed cells."""
    out = {}
    for cfg in spec.configs:
        for task in spec.tasks:
            reports = []
            for seed in spec.seeds:
                path = outdir / "cells" / _slug(cfg.name) / task / f"seed{seed}" / "metrics.json"
                if path.exists():
                    reports.append(MetricReport.from_json(path.read_text(encoding="utf-8")))
            if reports:
                out[(cfg.name, task)] = aggregate_seeds(reports)
    return out


def _metric_columns(task: str, results: dict, configs) -> list[str]:
    for cfg_name in configs:
        rep = results.get((cfg_name, task))
        if rep:
            if task == "rs":  # pool size is data-dependent (R_100@k at full scale)
                return sorted(rep.values, key=lambda n: int(n.split("@")[1]))
            return [m for m in TASK_METRICS[task] if m in rep.values]
    return list(TASK_METRICS[task])


def nice_pairs(spec: ExperimentSpec, results: dict, baseline: str = "MLM3",
               table: AffinityTable | None = None) -> list[dict]:
    """Single-task configs that beat the MLM-only baseline on a strict majority
    of that downstream task's metrics (declared rule; the source study names
    nice pairs narratively)."""
    table = table or AffinityTable.default()
    out = []
    for cfg in spec.configs:
        if len(cfg.tasks) != 1 or not cfg.mlm:
            continue
        p_task = cfg.tasks[0]
        for task in spec.tasks:
            ours, base = results.get((cfg.name, task)), results.get((baseline, task))
            if not ours or not base:
                continue
            shared = [m for m in ours.values if m in base.values]
            improved = [m for m in shared if ours.values[m] > base.values[m]]
            if len(improved) * 2 > len(shared):
                ab, st = table.overlap(p_task, task)
                out.append({
                    "pretrain": cfg.name,
                    "downstream": task,
                    "improved": improved,
                    "out_of": shared,
                    "shared_abilities": sorted(ab),
                    "shared_structures": sorted(st),
                })
    return out


def emit_report(spec: ExperimentSpec, outdir: str | Path) -> tuple[Path, Path]:
    """Write report.md and report.csv over whatever cells have completed."""
    outdir = Path(outdir)
    results = collect_results(spec, outdir)
    config_names = [c.name for c in spec.configs]

    md = ["# Experiment grid report", "",
          f"Corpus: `{spec.corpus_path}`  |  seeds: {list(spec.seeds)}",
          "", "Values are percentages averaged over seeds; best per column in bold.", ""]
    csv_lines = ["task,dataset,config,metric,mean_pct," +
                 ",".join(f"seed{s}" for s in spec.seeds)]

    for task in spec.tasks:
        columns = _metric_columns(task, results, config_names)
        dataset = next((results[(c, task)].dataset for c in config_names
                        if (c, task) in results), "-")
        md.append(f"## {task.upper()} ({dataset})")
        md.append("")
        md.append("| config | " + " | ".join(columns) + " |")
        md.append("|" + "---|" * (len(columns) + 1))
        best = {
            m: max((results[(c, task)].values[m] for c in config_names
                    if (c, task) in results and m in results[(c, task)].values),
                   default=None)
            for m in columns
        }
        for name in config_names:
            rep = results.get((name, task))
            cells = []
            for m in columns:
                if rep is None or m not in rep.values:
                    cells.append("—")
                    continue
                v = rep.values[m]
                text = f"{100*v:.2f}"
                cells.append(f"**{text}**" if v == best[m] else text)
            md.append(f"| {name} | " + " | ".join(cells) + " |")
            if rep is not None:
                for m in columns:
                    if m in rep.values:
                        per_seed = rep.per_seed.get(m, [])
                        seed_cells = [f"{100*x:.2f}" for x in per_seed]
                        seed_cells += [""] * (len(spec.seeds) - len(seed_cells))
                        csv_lines.append(
                            f'{task},{rep.dataset},"{name}","{m}",{100*rep.values[m]:.2f},'
                            + ",".join(seed_cells)
                        )
        md.append("")

    pairs = nice_pairs(spec, results)
    md.append("## Nice pairs (improve > half of the task's metrics vs MLM3)")
    md.append("")
    if pairs:
        for p in pairs:
            md.append(
                f"- ({p['pretrain']}, {p['downstream'].upper()}): improves "
                f"{len(p['improved'])}/{len(p['out_of'])} metrics; shared abilities: "
                f"{p['shared_abilities'] or '∅'}; shared structures: {p['shared_structures'] or '∅'}"
            )
    else:
        md.append("- none")
    md.append("")

    md_path = outdir / "report.md"
    csv_path = outdir / "report.csv"
    _atomic_write(md_path, "\n".join(md))
    _atomic_write(csv_path, "\n".join(csv_lines) + "\n")
    return md_path, csv_path
