"""Further pre-training and fine-tuning loops.

Protocol: Adam with constant learning rate (5e-5 default, 3e-5 for DST
fine-tuning), batch size 32, early stopping on validation loss with a
patience counted in evaluations, and seeded replication. Multi-task further
pre-training sums equally weighted per-task losses over round-robin batches;
MLM participates by default and can be disabled for the "without MLM"
ablation. Every run is a deterministic function of (config, seed, data) in a
fixed runtime configuration.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from dialtask import heads as H
from dialtask.corpus import Corpus, Speaker, Utterance
from dialtask.downstream import SelectionExample, SelectionPool, TaskData
from dialtask.encoder import (
    EncoderConfig,
    ReferenceEncoder,
    load_arrays,
    save_arrays,
)
from dialtask.metrics import MetricError, MetricReport, f1_multilabel, intent_metrics, recall_at_k, dst_metrics
from dialtask.taskgen import GenConfig, MatchExample, generate
from dialtask.vocab import Vocabulary, build_vocab


class TrainError(RuntimeError):
    pass


PRETRAIN_LR = 5e-5
DST_FINETUNE_LR = 3e-5


@dataclass
class TrainConfig:
    learning_rate: float | None = None  # None -> 5e-5, or 3e-5 for DST fine-tuning
    batch_size: int = 32
    max_len: int = 512
    seeds: tuple[int, ...] = (0, 1, 2)
    patience: int = 3           # evaluations without improvement before stopping
    max_steps: int = 1000
    eval_every: int | None = None  # None -> once per epoch-equivalent
    mlm_weight: float = 1.0
    task_weights: dict[str, float] = field(default_factory=dict)
    rs_k_neg: int = 9           # negatives when fine-tuning response selection
    dst_logit_scale: float = 1.0  # cosine-softmax sharpness for the DST bank
    gen: GenConfig = field(default_factory=GenConfig)

    def __post_init__(self):
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise TrainError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise TrainError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.seeds:
            raise TrainError("need at least one seed")
        if self.dst_logit_scale <= 0:
            raise TrainError(f"dst_logit_scale must be positive, got {self.dst_logit_scale}")

    def resolved_lr(self, task: str) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return DST_FINETUNE_LR if task == "dst" else PRETRAIN_LR

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d


class Adam:
    """Adaptive moment estimation over a flat name->array parameter dict."""

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            if k not in self.params:
                raise TrainError(f"gradient for unknown parameter {k!r}")
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            self.params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class RunRecord:
    task: str                 # "pretrain:<task+task>" or downstream id
    seed: int
    config: dict
    losses: list[float] = field(default_factory=list)
    breakdown: list[dict[str, float]] = field(default_factory=list)
    val_steps: list[int] = field(default_factory=list)
    val_trace: list[float] = field(default_factory=list)
    stopping_step: int = 0
    best_val: float = math.inf
    checkpoint: str | None = None

    def to_json(self) -> str:
        rec = asdict(self)
        rec["best_val"] = None if math.isinf(self.best_val) else self.best_val
        return json.dumps(rec, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        rec = json.loads(text)
        if rec.get("best_val") is None:
            rec["best_val"] = math.inf
        return cls(**rec)


def stream_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class _BatchStream:
    """Epoch-shuffled, seeded batch stream over a fixed example list."""

    def __init__(self, examples: list, batch_size: int, seed: int, name: str):
        if not examples:
            raise TrainError(f"no training examples for {name!r}")
        self.examples = examples
        self.batch_size = batch_size
        self.seed = seed
        self.name = name
        self.per_epoch = math.ceil(len(examples) / batch_size)

    def batch(self, step: int) -> list:
        epoch, index = divmod(step, self.per_epoch)
        rng = np.random.default_rng(stream_seed(self.seed, f"{self.name}:epoch{epoch}"))
        order = rng.permutation(len(self.examples))
        lo = index * self.batch_size
        return [self.examples[i] for i in order[lo : lo + self.batch_size]]


def vocab_from_corpus(corpus: Corpus, extra_texts: Sequence[str] = (),
                      min_count: int = 1, max_size: int | None = None) -> Vocabulary:
    texts = [u.text for d in corpus.dialogues for u in d.utterances]
    return build_vocab(list(texts) + list(extra_texts), min_count=min_count, max_size=max_size)


def holdout(corpus: Corpus, frac: float = 0.1, seed: int = 0) -> tuple[Corpus, Corpus]:
    """Seeded train/validation dialogue split used by further pre-training."""
    n = len(corpus.dialogues)
    if n < 2:
        raise TrainError("corpus too small to hold out a validation set")
    n_val = max(1, round(frac * n))
    if n >= 4:
        n_val = min(max(2, n_val), n - 2)
    order = np.random.default_rng(seed).permutation(n)
    val_idx = set(int(i) for i in order[:n_val])
    train = [d for i, d in enumerate(corpus.dialogues) if i not in val_idx]
    val = [d for i, d in enumerate(corpus.dialogues) if i in val_idx]
    return (
        Corpus(f"{corpus.name}-pt-train", train, corpus.split),
        Corpus(f"{corpus.name}-pt-val", val, corpus.split),
    )


def _snapshot(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


def _restore(params: dict[str, np.ndarray], snap: dict[str, np.ndarray]) -> None:
    for k, v in snap.items():
        np.copyto(params[k], v)


def _pretrain_heads(task: str, enc: ReferenceEncoder, cfg: TrainConfig, seed: int):
    d = enc.config.d_model
    hseed = stream_seed(seed, f"{task}-head")
    if task == "dsp":
        return H.LinearHead(d, 2, "dsp", hseed)
    if task == "dcv":
        return H.LinearHead(d, 2, "dcv", hseed)
    if task == "enp":
        return H.LinearHead(d, cfg.gen.c_max + 1, "enp", hseed)
    if task == "dur":
        return H.DURScorer(d, hseed)
    if task == "mlm":
        return H.LMHead(d, len(enc.vocab), hseed)
    if task == "crm":
        return None  # siamese: no head parameters
    raise TrainError(f"unknown pretrain task {task!r}")


def _pretrain_loss(task: str, batch: list, enc, head, with_grad: bool) -> H.LossValue:
    if task == "dsp":
        return H.dsp_loss(batch, enc, head, with_grad)
    if task == "dcv":
        return H.dcv_loss(batch, enc, head, with_grad)
    if task == "enp":
        return H.enp_loss(batch, enc, head, with_grad)
    if task == "dur":
        return H.dur_loss(batch, enc, head, with_grad)
    if task == "mlm":
        return H.mlm_loss(batch, enc, head, with_grad)
    if task == "crm":
        return H.crm_loss(batch, enc, with_grad)
    raise TrainError(f"unknown pretrain task {task!r}")


def _eval_batches(examples: list, batch_size: int):
    for lo in range(0, len(examples), batch_size):
        yield examples[lo : lo + batch_size]


def further_pretrain(
    enc: ReferenceEncoder,
    tasks: Sequence[str],
    corpus: Corpus,
    cfg: TrainConfig,
    seed: int = 0,
    include_mlm: bool = True,
) -> tuple[ReferenceEncoder, RunRecord]:
    """Multi-task further pre-training; returns the best-validation encoder.

    The effective task set is ``tasks`` plus MLM unless ``include_mlm`` is
    False (the "w.o. mlm" ablation). Passing an empty task list with MLM
    disabled is rejected; an empty list with MLM on is the MLM-only baseline.
    """
    active = [t.lower() for t in tasks]
    if include_mlm and "mlm" not in active:
        active.append("mlm")
    if not active:
        raise TrainError("no pre-training tasks (empty task list with MLM disabled)")
    if len(set(active)) != len(active):
        raise TrainError(f"duplicate tasks in {active}")

    if "enp" in active and not corpus.annotated:
        raise TrainError("ENP requires an entity-annotated corpus; run annotate_entities first")

    gen_cfg = GenConfig(**{**asdict(cfg.gen), "max_len": cfg.max_len})
    train_corpus, val_corpus = holdout(corpus, seed=stream_seed(seed, "holdout"))

    streams: dict[str, _BatchStream] = {}
    val_sets: dict[str, list] = {}
    heads = {}
    for t in active:
        train_ex = list(generate(t, train_corpus, enc.vocab, gen_cfg, seed))
        val_ex = list(generate(t, val_corpus, enc.vocab, gen_cfg, seed))
        if not train_ex or not val_ex:
            raise TrainError(f"task {t!r} produced no examples on the {'train' if not train_ex else 'validation'} side")
        streams[t] = _BatchStream(train_ex, cfg.batch_size, seed, f"pretrain-{t}")
        val_sets[t] = val_ex
        heads[t] = _pretrain_heads(t, enc, cfg, seed)

    all_params: dict[str, np.ndarray] = dict(enc.params)
    for h in heads.values():
        if h is not None:
            all_params.update(h.params)
    opt = Adam(all_params, cfg.resolved_lr("pretrain"))

    def weight(t: str) -> float:
        if t == "mlm":
            return cfg.mlm_weight
        return cfg.task_weights.get(t, 1.0)

    def val_loss() -> float:
        total = 0.0
        for t in active:
            vals = [
                _pretrain_loss(t, b, enc, heads[t], False).loss
                for b in _eval_batches(val_sets[t], cfg.batch_size)
            ]
            total += weight(t) * float(np.mean(vals))
        return total

    record = RunRecord(task="pretrain:" + "+".join(sorted(active)), seed=seed, config=cfg.to_dict())
    eval_every = cfg.eval_every or max(s.per_epoch for s in streams.values())
    best = _snapshot(all_params)
    bad = 0
    for step in range(1, cfg.max_steps + 1):
        total = 0.0
        grads: dict[str, np.ndarray] = {}
        parts = {}
        for t in active:
            lv = _pretrain_loss(t, streams[t].batch(step - 1), enc, heads[t], True)
            w = weight(t)
            total += w * lv.loss
            parts[t] = lv.loss
            for k, g in lv.grads.items():
                if k in grads:
                    grads[k] += w * g
                else:
                    grads[k] = w * g if w != 1.0 else g.copy()
        opt.step(grads)
        record.losses.append(total)
        record.breakdown.append(parts)
        if step % eval_every == 0 or step == cfg.max_steps:
            v = val_loss()
            record.val_steps.append(step)
            record.val_trace.append(v)
            if v < record.best_val:
                record.best_val = v
                best = _snapshot(all_params)
                bad = 0
            else:
                bad += 1
                if bad >= cfg.patience:
                    break
    record.stopping_step = len(record.losses)
    _restore(all_params, best)
    return enc, record


@dataclass
class TaskModel:
    """A fine-tuned downstream model: tuned encoder plus its task head."""

    task: str
    enc: ReferenceEncoder
    head: H.LinearHead | None = None
    bank: H.SlotProjectionBank | None = None
    labels: list[str] = field(default_factory=list)
    oos_intent: str | None = None
    threshold: float = 0.5


def _rs_triples(examples: list[SelectionExample], k_neg: int, seed: int, tag: str) -> list[MatchExample]:
    """Contrastive training triples for RS: negatives are other examples' responses."""
    if len(examples) < 2:
        raise TrainError("response selection needs >= 2 training examples for negatives")
    rng = np.random.default_rng(stream_seed(seed, tag))
    out = []
    for i, ex in enumerate(examples):
        pool = [e.response for j, e in enumerate(examples) if j != i and e.response != ex.response]
        if not pool:
            raise TrainError("no distinct negative responses available")
        idx = rng.choice(len(pool), size=k_neg, replace=len(pool) < k_neg)
        out.append(
            MatchExample(
                context=ex.context,
                gold_response=Utterance(Speaker.SYSTEM, ex.response),
                negatives=[Utterance(Speaker.SYSTEM, pool[int(j)]) for j in idx],
            )
        )
    return out


def finetune(
    enc: ReferenceEncoder,
    task: str,
    data: TaskData,
    cfg: TrainConfig,
    seed: int = 0,
) -> tuple[TaskModel, RunRecord]:
    """Single-task fine-tuning with early stopping on validation loss."""
    task = task.lower()
    if data.task != task:
        raise TrainError(f"data is for task {data.task!r}, not {task!r}")
    d = enc.config.d_model
    hseed = stream_seed(seed, f"{task}-head")

    if task == "int":
        head = H.LinearHead(d, max(2, len(data.labels)), "int", hseed)
        model = TaskModel(task, enc, head=head, labels=data.labels, oos_intent=data.oos_intent)
        train_ex, val_ex = data.train, data.val

        def loss_fn(batch, wg):
            return H.int_loss([e.text for e in batch], [data.label_index(e.intent) for e in batch],
                              enc, head, wg)
        params = {**enc.params, **head.params}
    elif task == "da":
        head = H.LinearHead(d, max(2, len(data.labels)), "da", hseed)
        model = TaskModel(task, enc, head=head, labels=data.labels)
        train_ex, val_ex = data.train, data.val

        def loss_fn(batch, wg):
            return H.da_loss([e.history for e in batch],
                             [{data.label_index(a) for a in e.acts} for e in batch],
                             enc, head, wg)
        params = {**enc.params, **head.params}
    elif task == "rs":
        model = TaskModel(task, enc)
        train_pool = [e for e in data.train if isinstance(e, SelectionExample)]
        val_pool = [e for e in data.val if isinstance(e, SelectionExample)]
        if not train_pool or not val_pool:
            raise TrainError("rs fine-tuning needs plain (context, response) examples in train/val")
        train_ex = _rs_triples(train_pool, cfg.rs_k_neg, seed, "rs-train-neg")
        val_ex = _rs_triples(val_pool, cfg.rs_k_neg, seed, "rs-val-neg")

        def loss_fn(batch, wg):
            return H.crm_loss(batch, enc, wg)
        params = dict(enc.params)
    elif task == "dst":
        bank = H.SlotProjectionBank.build(enc, data.ontology, hseed,
                                          logit_scale=cfg.dst_logit_scale)
        model = TaskModel(task, enc, bank=bank)
        train_ex, val_ex = data.train, data.val

        def loss_fn(batch, wg):
            return H.dst_loss([e.history for e in batch], [e.state for e in batch], enc, bank, wg)
        params = {**enc.params, **bank.params}
    else:
        raise TrainError(f"unknown downstream task {task!r}")

    stream = _BatchStream(train_ex, cfg.batch_size, seed, f"finetune-{task}")
    opt = Adam(params, cfg.resolved_lr(task))
    record = RunRecord(task=task, seed=seed, config=cfg.to_dict())
    eval_every = cfg.eval_every or stream.per_epoch
    best = _snapshot(params)
    bad = 0

    def val_loss() -> float:
        vals = [loss_fn(b, False).loss for b in _eval_batches(val_ex, cfg.batch_size)]
        return float(np.mean(vals))

    for step in range(1, cfg.max_steps + 1):
        lv = loss_fn(stream.batch(step - 1), True)
        opt.step(lv.grads)
        record.losses.append(lv.loss)
        if step % eval_every == 0 or step == cfg.max_steps:
            v = val_loss()
            record.val_steps.append(step)
            record.val_trace.append(v)
            if v < record.best_val:
                record.best_val = v
                best = _snapshot(params)
                bad = 0
            else:
                bad += 1
                if bad >= cfg.patience:
                    break
    record.stopping_step = len(record.losses)
    _restore(params, best)
    return model, record


def evaluate(model: TaskModel, data: TaskData, split: str = "test",
             batch_size: int = 32, dataset_name: str | None = None) -> MetricReport:
    """Deterministic metric evaluation; no parameter updates."""
    examples = {"train": data.train, "val": data.val, "test": data.test}[split]
    if not examples:
        raise MetricError(f"empty {split} split")
    name = dataset_name or data.name
    enc = model.enc
    if model.task == "int":
        preds: list[int] = []
        for batch in _eval_batches(examples, batch_size):
            preds.extend(H.int_predict([e.text for e in batch], enc, model.head))
        golds = [data.label_index(e.intent) for e in examples]
        oos = data.labels.index(data.oos_intent) if data.oos_intent else -1
        values = intent_metrics(preds, golds, oos)
        return MetricReport("int", name, values)
    if model.task == "da":
        pred_sets: list[set[int]] = []
        for batch in _eval_batches(examples, batch_size):
            pred_sets.extend(H.da_predict([e.history for e in batch], enc, model.head,
                                          model.threshold))
        gold_sets = [{data.label_index(a) for a in e.acts} for e in examples]
        micro, macro = f1_multilabel(pred_sets, gold_sets, len(data.labels))
        return MetricReport("da", name, {"f1_micro": micro, "f1_macro": macro})
    if model.task == "rs":
        pools = [e for e in examples if isinstance(e, SelectionPool)]
        if not pools:
            raise MetricError(f"{split} split has no candidate pools to rank")
        pool_size = len(pools[0].candidates)
        scored = []
        for p in pools:
            scores = H.rs_rank(p.context, p.candidates, enc)
            scored.append([(s, i == p.gold_index) for i, s in enumerate(scores)])
        rk = recall_at_k(scored, ks=(1, 3), pool=pool_size)
        return MetricReport("rs", name, {f"R_{pool_size}@1": rk[1], f"R_{pool_size}@3": rk[3]})
    if model.task == "dst":
        preds_state = []
        for batch in _eval_batches(examples, batch_size):
            preds_state.extend(H.dst_predict([e.history for e in batch], enc, model.bank))
        golds_state = [e.state for e in examples]
        joint, slot = dst_metrics(preds_state, golds_state)
        return MetricReport("dst", name, {"acc_joint": joint, "acc_slot": slot})
    raise TrainError(f"unknown task {model.task!r}")


def save_task_model(path: str | Path, model: TaskModel, provenance: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = dict(model.enc.params)
    meta: dict = {
        "kind": "task-model",
        "task": model.task,
        "config": asdict(model.enc.config),
        "vocab": model.enc.vocab.to_list(),
        "labels": model.labels,
        "oos_intent": model.oos_intent,
        "threshold": model.threshold,
        "provenance": provenance or {},
    }
    if model.head is not None:
        arrays.update(model.head.params)
        meta["head_name"] = model.head.name
        meta["head_c"] = model.head.c
    if model.bank is not None:
        arrays.update(model.bank.params)
        for pair, vv in model.bank.value_vectors.items():
            arrays[f"frozen:{pair}"] = vv
        meta["ontology"] = model.bank.values
    save_arrays(path, arrays, meta)


def load_task_model(path: str | Path) -> TaskModel:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "task-model":
        raise TrainError(f"{path} is not a saved task model")
    enc = ReferenceEncoder(EncoderConfig(**meta["config"]), Vocabulary.from_list(meta["vocab"]))
    for k in enc.params:
        np.copyto(enc.params[k], arrays[k])
    head = bank = None
    if "head_name" in meta:
        head = H.LinearHead(enc.config.d_model, meta["head_c"], meta["head_name"])
        for k in head.params:
            np.copyto(head.params[k], arrays[k])
    if "ontology" in meta:
        values = {p: list(v) for p, v in meta["ontology"].items()}
        params = {}
        vectors = {}
        for pair in values:
            params[f"dst/{pair}/G"] = arrays[f"dst/{pair}/G"].copy()
            params[f"dst/{pair}/b"] = arrays[f"dst/{pair}/b"].copy()
            vectors[pair] = arrays[f"frozen:{pair}"].copy()
        bank = H.SlotProjectionBank(values, params, vectors)
    return TaskModel(
        task=meta["task"],
        enc=enc,
        head=head,
        bank=bank,
        labels=list(meta.get("labels") or []),
        oos_intent=meta.get("oos_intent"),
        threshold=meta.get("threshold", 0.5),
    )
