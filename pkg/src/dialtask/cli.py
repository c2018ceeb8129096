"""Command-line surface for the pipeline.

Verbs compose into the full study:

    dialtask ingest   --in raw.json --out corpus.jsonl
    dialtask annotate --in corpus.jsonl --out annotated.jsonl
    dialtask gen      --task dur --window 3 --seed 7 --in corpus.jsonl --out dur.jsonl
    dialtask pretrain --corpus corpus.jsonl --tasks crm --no-mlm --out ckpt.npz
    dialtask finetune --task dst --ckpt ckpt.npz --train ... --out model.npz
    dialtask eval     --model model.npz --task-dir data/dst
    dialtask matrix   --spec grid.json --jobs 4
    dialtask report   --spec grid.json

Every command prints a JSON summary to stdout on success and writes errors to
stderr only. Exit codes: 0 success, 1 usage error, 2 data error, 3 training
failure. Relative paths resolve against $DIALTASK_DATA when it is set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from dialtask.corpus import (CorpusError, RuleBasedAnnotator, Split, adapt_woz,
                             annotate_entities, load_corpus, save_corpus)
from dialtask.downstream import DataError, DOWNSTREAM_TASKS, load_task_data
from dialtask.encoder import EncoderConfig, ReferenceEncoder, load_checkpoint, save_checkpoint
from dialtask.experiments import ExperimentError, ExperimentSpec, emit_report, run_matrix
from dialtask.heads import HeadError
from dialtask.metrics import MetricError
from dialtask.taskgen import (GenConfig, GenStats, PRETRAIN_TASKS, TaskGenError,
                              generate, write_examples)
from dialtask.trainer import (TrainConfig, TrainError, evaluate, finetune,
                              further_pretrain, load_task_model, save_task_model,
                              vocab_from_corpus)

USAGE_ERROR, DATA_ERROR, TRAIN_ERROR = 1, 2, 3

_DATA_ERRORS = (CorpusError, DataError, TaskGenError, MetricError, ExperimentError,
                HeadError, FileNotFoundError, json.JSONDecodeError, KeyError)


def _resolve(path: str | None) -> str | None:
    if path is None:
        return None
    base = os.environ.get("DIALTASK_DATA")
    return str(Path(base) / path) if base else path


class _Parser(argparse.ArgumentParser):
    """argparse with spec-conformant usage exit code (1, not 2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _add_encoder_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--n-heads", type=int, default=2)
    p.add_argument("--max-len", type=int, default=128)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, default=200, help="max optimizer steps")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=None, help="override task default")
    p.add_argument("--eval-every", type=int, default=None,
                   help="validation cadence in steps (default: one epoch)")
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)


def _encoder_config(args) -> EncoderConfig:
    return EncoderConfig(d_model=args.d_model, n_layers=args.n_layers,
                         n_heads=args.n_heads, max_len=args.max_len)


def _train_config(args, gen: GenConfig | None = None) -> TrainConfig:
    return TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                       max_len=args.max_len, patience=args.patience,
                       max_steps=args.steps, eval_every=args.eval_every,
                       gen=gen or GenConfig(max_len=args.max_len))


# --- verbs ------------------------------------------------------------------

def cmd_ingest(args) -> dict:
    src = _resolve(getattr(args, "in"))
    if args.format == "woz":
        corpus = adapt_woz(src, name=args.name or Path(src).stem)
    else:
        corpus = load_corpus(src, name=args.name)
    out = _resolve(args.out)
    save_corpus(corpus, out)
    return {"corpus": corpus.name, "dialogues": len(corpus.dialogues),
            "utterances": corpus.num_utterances(), "out": out}


def cmd_annotate(args) -> dict:
    corpus = load_corpus(_resolve(getattr(args, "in")))
    corpus = annotate_entities(corpus, RuleBasedAnnotator())
    out = _resolve(args.out)
    save_corpus(corpus, out)
    counts = [u.entity_count for d in corpus.dialogues for u in d.utterances]
    return {"dialogues": len(corpus.dialogues), "utterances": len(counts),
            "mean_entity_count": round(sum(counts) / len(counts), 4), "out": out}


def cmd_gen(args) -> dict:
    corpus = load_corpus(_resolve(getattr(args, "in")))
    cfg = GenConfig(mask_rate=args.mask_rate, k_neg=args.k_neg,
                    corrupt_fraction=args.corrupt_fraction,
                    replace_prob=args.replace_prob, window=args.window,
                    c_max=args.c_max, max_len=args.max_len)
    vocab = vocab_from_corpus(corpus)
    stats = GenStats()
    examples = generate(args.task, corpus, vocab, cfg, seed=args.seed, stats=stats)
    out = _resolve(args.out)
    write_examples(out, examples)
    return {"task": args.task, "produced": stats.produced, "skipped": stats.skipped,
            "seed": args.seed, "out": out}


def cmd_pretrain(args) -> dict:
    corpus = load_corpus(_resolve(args.corpus))
    if "enp" in args.tasks and not corpus.annotated:
        corpus = annotate_entities(corpus, RuleBasedAnnotator())
    vocab = vocab_from_corpus(corpus)
    cfg = _train_config(args)
    enc = ReferenceEncoder(_encoder_config(args), vocab, seed=args.seed)
    enc, record = further_pretrain(enc, args.tasks, corpus, cfg, seed=args.seed,
                                   include_mlm=not args.no_mlm)
    out = _resolve(args.out)
    save_checkpoint(out, enc, {"tasks": args.tasks, "mlm": not args.no_mlm,
                               "seed": args.seed, "steps": record.stopping_step})
    Path(out).with_suffix(".run.json").write_text(record.to_json(), encoding="utf-8")
    return {"tasks": record.task.removeprefix("pretrain:").split("+"),
            "steps": record.stopping_step, "best_val": record.best_val, "out": out}


def cmd_finetune(args) -> dict:
    enc, _ = load_checkpoint(_resolve(args.ckpt))
    data = load_task_data(args.task, _resolve(args.train), _resolve(args.val),
                          _resolve(args.test), _resolve(args.ontology))
    cfg = _train_config(args)
    model, record = finetune(enc, args.task, data, cfg, seed=args.seed)
    out = _resolve(args.out)
    save_task_model(out, model, {"task": args.task, "seed": args.seed,
                                 "steps": record.stopping_step})
    Path(out).with_suffix(".run.json").write_text(record.to_json(), encoding="utf-8")
    return {"task": args.task, "steps": record.stopping_step,
            "best_val": record.best_val, "out": out}


def cmd_eval(args) -> dict:
    model = load_task_model(_resolve(args.model))
    data = load_task_data(model.task, _resolve(args.train), _resolve(args.val),
                          _resolve(args.test), _resolve(args.ontology))
    report = evaluate(model, data, split=args.split, batch_size=args.batch_size)
    summary = json.loads(report.to_json())
    if args.out:
        out = _resolve(args.out)
        Path(out).write_text(report.to_json(), encoding="utf-8")
        summary["out"] = out
    return summary


def cmd_matrix(args) -> dict:
    spec = ExperimentSpec.from_file(_resolve(args.spec))
    if args.outdir:
        spec.outdir = _resolve(args.outdir)
    result = run_matrix(spec, jobs=args.jobs)
    summary = {"outdir": result.outdir, "completed": len(result.completed),
               "cached": len(result.skipped), "failed": sorted(result.failed),
               "report": str(Path(result.outdir) / "report.md")}
    if not result.ok:
        raise TrainError(f"{len(result.failed)} grid cells failed: "
                         + json.dumps(summary, sort_keys=True))
    return summary


def cmd_report(args) -> dict:
    spec = ExperimentSpec.from_file(_resolve(args.spec))
    if args.outdir:
        spec.outdir = _resolve(args.outdir)
    md, csv = emit_report(spec, spec.outdir)
    return {"report_md": str(md), "report_csv": str(csv)}


# --- parser -----------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="dialtask", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("ingest", help="normalize a raw dialogue file into corpus JSONL")
    p.add_argument("--in", required=True, help="source file")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("jsonl", "woz"), default="jsonl")
    p.add_argument("--name", default=None)
    p.set_defaults(run=cmd_ingest)

    p = sub.add_parser("annotate", help="add rule-based entity counts to a corpus")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(run=cmd_annotate)

    p = sub.add_parser("gen", help="generate further pre-training examples")
    p.add_argument("--task", required=True, choices=PRETRAIN_TASKS)
    p.add_argument("--in", required=True, help="corpus JSONL")
    p.add_argument("--out", required=True, help="examples JSONL")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mask-rate", type=float, default=0.15)
    p.add_argument("--k-neg", type=int, default=9)
    p.add_argument("--corrupt-fraction", type=float, default=0.5)
    p.add_argument("--replace-prob", type=float, default=0.3)
    p.add_argument("--window", type=int, default=3)
    p.add_argument("--c-max", type=int, default=10)
    p.add_argument("--max-len", type=int, default=512)
    p.set_defaults(run=cmd_gen)

    p = sub.add_parser("pretrain", help="further pre-train an encoder on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--tasks", nargs="*", default=[], choices=[t for t in PRETRAIN_TASKS if t != "mlm"],
                   help="task objectives; empty = MLM-only baseline")
    p.add_argument("--no-mlm", action="store_true", help="drop the MLM objective (w.o. mlm)")
    p.add_argument("--out", required=True, help="checkpoint .npz")
    _add_encoder_flags(p)
    _add_train_flags(p)
    p.set_defaults(run=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint on a downstream task")
    p.add_argument("--task", required=True, choices=DOWNSTREAM_TASKS)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--ontology", default=None)
    p.add_argument("--out", required=True, help="task model .npz")
    p.add_argument("--max-len", type=int, default=128)
    _add_train_flags(p)
    p.set_defaults(run=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a saved task model")
    p.add_argument("--model", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--ontology", default=None)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--out", default=None, help="also write metrics JSON here")
    p.set_defaults(run=cmd_eval)

    p = sub.add_parser("matrix", help="run a pretrain x downstream experiment grid")
    p.add_argument("--spec", required=True, help="grid spec JSON")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--outdir", default=None, help="override spec outdir")
    p.set_defaults(run=cmd_matrix)

    p = sub.add_parser("report", help="regenerate report.md/report.csv from grid cells")
    p.add_argument("--spec", required=True)
    p.add_argument("--outdir", default=None)
    p.set_defaults(run=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        summary = args.run(args)
    except _DATA_ERRORS as e:
        print(f"dialtask {args.verb}: {type(e).__name__}: {e}", file=sys.stderr)
        return DATA_ERROR
    except TrainError as e:
        print(f"dialtask {args.verb}: {e}", file=sys.stderr)
        return TRAIN_ERROR
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
