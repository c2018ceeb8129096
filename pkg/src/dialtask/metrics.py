"""Evaluation metrics for the four downstream tasks.

All functions return fractions in [0, 1]; conversion to table percentages
happens only at the report boundary (experiments module). Every metric is a
pure, permutation-invariant function of its inputs and is mirrored by a
brute-force oracle in the test suite.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence


class MetricError(ValueError):
    pass


# canonical metric names per downstream task, in table column order
TASK_METRICS = {
    "int": ("Acc (all)", "Acc (in)", "Acc (out)", "Recall (out)"),
    "da": ("f1_micro", "f1_macro"),
    "rs": ("R_100@1", "R_100@3"),
    "dst": ("acc_joint", "acc_slot"),
}


def f1_multilabel(
    preds: Sequence[set[int] | frozenset[int] | list[int]],
    golds: Sequence[set[int] | frozenset[int] | list[int]],
    n_labels: int,
) -> tuple[float, float]:
    """(micro_f1, macro_f1) over a fixed label inventory of size n_labels.

    Micro pools TP/FP/FN over all labels; macro averages per-label F1 over the
    *full* inventory, scoring 0 for labels with no gold and no predicted
    occurrences.
    """
    if len(preds) != len(golds):
        raise MetricError(f"pred/gold length mismatch: {len(preds)} vs {len(golds)}")
    if not preds:
        raise MetricError("empty evaluation set")
    tp = [0] * n_labels
    fp = [0] * n_labels
    fn = [0] * n_labels
    for p, g in zip(preds, golds):
        ps, gs = set(p), set(g)
        for lab in ps | gs:
            if not 0 <= lab < n_labels:
                raise MetricError(f"label {lab} outside inventory of size {n_labels}")
        for lab in ps & gs:
            tp[lab] += 1
        for lab in ps - gs:
            fp[lab] += 1
        for lab in gs - ps:
            fn[lab] += 1
    TP, FP, FN = sum(tp), sum(fp), sum(fn)
    micro = 2 * TP / (2 * TP + FP + FN) if (2 * TP + FP + FN) else 0.0
    per_label = [
        2 * tp[l] / (2 * tp[l] + fp[l] + fn[l]) if (2 * tp[l] + fp[l] + fn[l]) else 0.0
        for l in range(n_labels)
    ]
    macro = sum(per_label) / n_labels
    return micro, macro


def intent_metrics(
    preds: Sequence[int], golds: Sequence[int], oos_class: int
) -> dict[str, float]:
    """Accuracy family for intent recognition with an out-of-scope class.

    Returns "Acc (all)", "Acc (in)" (gold-in-scope only), "Acc (out)" (binary
    in/out detection accuracy over all examples) and "Recall (out)";
    "Recall (out)" and "Acc (in)" are omitted when their denominator is empty.
    """
    if len(preds) != len(golds):
        raise MetricError(f"pred/gold length mismatch: {len(preds)} vs {len(golds)}")
    if not preds:
        raise MetricError("empty evaluation set")
    n = len(golds)
    correct = sum(p == g for p, g in zip(preds, golds))
    out = {"Acc (all)": correct / n}
    in_idx = [i for i, g in enumerate(golds) if g != oos_class]
    if in_idx:
        out["Acc (in)"] = sum(preds[i] == golds[i] for i in in_idx) / len(in_idx)
    det = sum((p == oos_class) == (g == oos_class) for p, g in zip(preds, golds))
    out["Acc (out)"] = det / n
    oos_idx = [i for i, g in enumerate(golds) if g == oos_class]
    if oos_idx:
        out["Recall (out)"] = sum(preds[i] == oos_class for i in oos_idx) / len(oos_idx)
    return out


def recall_at_k(
    scored: Sequence[Sequence[tuple[float, bool]]],
    ks: Sequence[int] = (1, 3),
    pool: int = 100,
) -> dict[int, float]:
    """R_pool@k over examples of (score, is_gold) candidate lists.

    Candidates are ranked by descending score with ties broken by the stable
    original candidate index, so results are deterministic.
    """
    if not scored:
        raise MetricError("empty evaluation set")
    if any(k < 1 for k in ks):
        raise MetricError(f"invalid k in {list(ks)}")
    hits = {k: 0 for k in ks}
    for i, cands in enumerate(scored):
        if len(cands) != pool:
            raise MetricError(f"example {i}: {len(cands)} candidates, expected pool of {pool}")
        gold_idx = [j for j, (_, is_gold) in enumerate(cands) if is_gold]
        if len(gold_idx) != 1:
            raise MetricError(f"example {i}: {len(gold_idx)} gold candidates, expected exactly 1")
        order = sorted(range(pool), key=lambda j: (-cands[j][0], j))
        rank = order.index(gold_idx[0])
        for k in ks:
            hits[k] += rank < k
    return {k: hits[k] / len(scored) for k in ks}


def dst_metrics(
    preds: Sequence[dict[str, str]], golds: Sequence[dict[str, str]]
) -> tuple[float, float]:
    """(acc_joint, acc_slot) over per-turn state dictionaries."""
    if len(preds) != len(golds):
        raise MetricError(f"pred/gold length mismatch: {len(preds)} vs {len(golds)}")
    if not preds:
        raise MetricError("empty evaluation set")
    slot_hits = slot_total = joint_hits = 0
    for i, (p, g) in enumerate(zip(preds, golds)):
        if set(p) != set(g):
            raise MetricError(f"turn {i}: pair keys differ: {sorted(set(p) ^ set(g))}")
        ok = [p[k] == g[k] for k in g]
        slot_hits += sum(ok)
        slot_total += len(ok)
        joint_hits += all(ok)
    return joint_hits / len(golds), slot_hits / slot_total


@dataclass
class MetricReport:
    task: str
    dataset: str
    values: dict[str, float]  # metric name -> mean over seeds (fractions)
    per_seed: dict[str, list[float]] = field(default_factory=dict)

    def __post_init__(self):
        for name, v in self.values.items():
            if not 0.0 <= v <= 1.0:
                raise MetricError(f"metric {name!r} = {v} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(
            {"task": self.task, "dataset": self.dataset, "values": self.values,
             "per_seed": self.per_seed},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        rec = json.loads(text)
        return cls(rec["task"], rec["dataset"], rec["values"], rec.get("per_seed", {}))

    def csv_row(self, headers: Sequence[str] | None = None) -> str:
        """One CSV line with table-percentage values under the given headers."""
        headers = headers or TASK_METRICS[self.task]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="")
        cells = [self.task, self.dataset]
        for h in headers:
            cells.append(f"{100.0 * self.values[h]:.2f}" if h in self.values else "")
        writer.writerow(cells)
        return buf.getvalue()


def aggregate_seeds(reports: Sequence[MetricReport]) -> MetricReport:
    """Mean the per-seed reports of one (task, dataset) cell."""
    if not reports:
        raise MetricError("nothing to aggregate")
    task, dataset = reports[0].task, reports[0].dataset
    if any(r.task != task or r.dataset != dataset for r in reports):
        raise MetricError("cannot aggregate reports from different cells")
    names = [n for n in reports[0].values if all(n in r.values for r in reports)]
    values = {n: sum(r.values[n] for r in reports) / len(reports) for n in names}
    per_seed = {n: [r.values[n] for r in reports] for n in names}
    return MetricReport(task, dataset, values, per_seed)
