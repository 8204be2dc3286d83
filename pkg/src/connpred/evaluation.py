"""Classification metrics on a 0-100 scale, confusion matrices, and the
three-setting rater-consensus analysis.

All functions are pure. Scores keep full float precision internally and are
rounded to two decimals (half-even) only when serialized.
"""

import csv
import json
from collections import Counter
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal
from typing import Optional, Sequence

import numpy as np

from .text import NO_CONNECTIVE_LABEL


class EvalError(Exception):
    pass


def round2(x):
    """Round to 2 decimals, half to even, on the printed decimal value."""
    return float(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


@dataclass
class ClassScores:
    label: str
    precision: float
    recall: float
    f1: float
    support: float

    def to_json_dict(self):
        return {
            "label": self.label,
            "precision": round2(self.precision),
            "recall": round2(self.recall),
            "f1": round2(self.f1),
            "support": round(self.support, 6),
        }


@dataclass
class EvalReport:
    """Accuracy, per-class precision/recall/F1, macro-F1, and the confusion
    matrix (rows = true label, cols = predicted). Scores are 0-100."""

    accuracy: float
    per_class: list
    macro_f1: float
    confusion: np.ndarray
    n: float
    labels: list

    def to_json_dict(self):
        return {
            "n": round(self.n, 6),
            "accuracy": round2(self.accuracy),
            "macro_f1": round2(self.macro_f1),
            "labels": list(self.labels),
            "per_class": [c.to_json_dict() for c in self.per_class],
            "confusion": [[round(v, 6) for v in row] for row in self.confusion.tolist()],
        }


def evaluate_ids(pred_ids, gold_ids, num_classes, weights=None, labels=None):
    """Core metric computation over integer class ids.

    `weights` (optional, same length) weights each item's contribution to the
    confusion counts; default 1 per item. F1 is 0 whenever precision + recall
    is 0, and macro-F1 averages over the full label set.
    """
    pred_ids = list(pred_ids)
    gold_ids = list(gold_ids)
    if len(pred_ids) != len(gold_ids):
        raise EvalError(
            "length mismatch: %d predictions vs %d gold" % (len(pred_ids), len(gold_ids))
        )
    if weights is None:
        weights = [1.0] * len(pred_ids)
    elif len(weights) != len(pred_ids):
        raise EvalError("length mismatch: weights")
    if labels is None:
        labels = [str(i) for i in range(num_classes)]
    conf = np.zeros((num_classes, num_classes), dtype=np.float64)
    for p, g, w in zip(pred_ids, gold_ids, weights):
        if not (0 <= g < num_classes) or not (0 <= p < num_classes):
            raise EvalError("class id out of range: gold=%r pred=%r" % (g, p))
        conf[g, p] += w
    total = conf.sum()
    accuracy = 100.0 * np.trace(conf) / total if total > 0 else 0.0
    per_class = []
    for k in range(num_classes):
        tp = conf[k, k]
        col = conf[:, k].sum()
        row = conf[k, :].sum()
        prec = 100.0 * tp / col if col > 0 else 0.0
        rec = 100.0 * tp / row if row > 0 else 0.0
        f1 = 2.0 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        per_class.append(ClassScores(labels[k], prec, rec, f1, float(row)))
    macro = sum(c.f1 for c in per_class) / num_classes if num_classes else 0.0
    return EvalReport(
        accuracy=float(accuracy),
        per_class=per_class,
        macro_f1=float(macro),
        confusion=conf,
        n=float(total),
        labels=list(labels),
    )


def evaluate(predictions, gold, labels, weights=None):
    """Evaluate label-string predictions against gold given the ordered label
    set. Unknown labels raise EvalError."""
    index = {name: i for i, name in enumerate(labels)}

    def to_ids(seq, what):
        out = []
        for s in seq:
            if s not in index:
                raise EvalError("unknown %s label: %r" % (what, s))
            out.append(index[s])
        return out

    return evaluate_ids(
        to_ids(predictions, "predicted"),
        to_ids(gold, "gold"),
        len(labels),
        weights=weights,
        labels=labels,
    )


def macro_f1_ids(pred_ids, gold_ids, num_classes):
    return evaluate_ids(pred_ids, gold_ids, num_classes).macro_f1


def majority_vote(annotations):
    """Label chosen by at least 2 of the 3 raters, else None."""
    if len(annotations) != 3:
        raise EvalError("expected exactly 3 annotations, got %d" % len(annotations))
    label, count = Counter(annotations).most_common(1)[0]
    return label if count >= 2 else None


@dataclass
class ConsensusStats:
    majority_pct: float
    unanimous_pct: float

    def to_json_dict(self):
        return {
            "majority_pct": round2(self.majority_pct),
            "unanimous_pct": round2(self.unanimous_pct),
        }


def consensus_stats(annotations):
    """Share of items where >=2 raters agree, and where all 3 agree (0-100)."""
    n = len(annotations)
    if n == 0:
        return ConsensusStats(0.0, 0.0)
    maj = sum(1 for a in annotations if majority_vote(a) is not None)
    una = sum(1 for a in annotations if len(set(a)) == 1)
    return ConsensusStats(100.0 * maj / n, 100.0 * una / n)


@dataclass
class SettingReport:
    setting: str
    n: int
    raters: EvalReport
    model: EvalReport

    def to_json_dict(self):
        return {
            "setting": self.setting,
            "n": self.n,
            "raters": self.raters.to_json_dict(),
            "model": self.model.to_json_dict(),
        }


@dataclass
class RaterAnalysis:
    a: SettingReport
    b: SettingReport
    c: SettingReport
    consensus: ConsensusStats

    def to_json_dict(self):
        return {
            "A": self.a.to_json_dict(),
            "B": self.b.to_json_dict(),
            "C": self.c.to_json_dict(),
            "consensus": self.consensus.to_json_dict(),
        }


def rater_analysis(gold, model, annotations, labels, no_connective=NO_CONNECTIVE_LABEL):
    """Three evaluation settings comparing rater decisions with the model.

    A: every item; each of the 3 annotations scored against gold at weight
       1/3, the model at weight 1.
    B: only items where a majority label exists; raters scored by that label.
    C: setting B minus items where gold, the majority label, or the model
       label is the no-connective class.
    """
    gold = list(gold)
    model = list(model)
    annotations = [tuple(a) for a in annotations]
    if not (len(gold) == len(model) == len(annotations)):
        raise EvalError(
            "misaligned inputs: %d gold, %d model, %d annotations"
            % (len(gold), len(model), len(annotations))
        )
    flat_pred = []
    flat_gold = []
    for g, ann in zip(gold, annotations):
        for r in ann:
            flat_pred.append(r)
            flat_gold.append(g)
    a = SettingReport(
        "A",
        len(gold),
        raters=evaluate(flat_pred, flat_gold, labels, weights=[1.0 / 3.0] * len(flat_pred)),
        model=evaluate(model, gold, labels),
    )
    b_idx = []
    maj = {}
    for i, ann in enumerate(annotations):
        m = majority_vote(ann)
        if m is not None:
            b_idx.append(i)
            maj[i] = m
    b = SettingReport(
        "B",
        len(b_idx),
        raters=evaluate([maj[i] for i in b_idx], [gold[i] for i in b_idx], labels),
        model=evaluate([model[i] for i in b_idx], [gold[i] for i in b_idx], labels),
    )
    c_idx = [
        i
        for i in b_idx
        if gold[i] != no_connective and maj[i] != no_connective and model[i] != no_connective
    ]
    c = SettingReport(
        "C",
        len(c_idx),
        raters=evaluate([maj[i] for i in c_idx], [gold[i] for i in c_idx], labels),
        model=evaluate([model[i] for i in c_idx], [gold[i] for i in c_idx], labels),
    )
    return RaterAnalysis(a, b, c, consensus_stats(annotations))


def read_predictions_tsv(path):
    """item_id<TAB>label per line; returns an id -> label dict."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise EvalError("%s:%d: expected 2 tab-separated fields" % (path, lineno))
            item_id, label = parts
            if item_id in out:
                raise EvalError("%s:%d: duplicate item id %r" % (path, lineno, item_id))
            out[item_id] = label
    return out


def read_raters_tsv(path):
    """item_id<TAB>label1<TAB>label2<TAB>label3; returns id -> 3-tuple."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise EvalError("%s:%d: expected 4 tab-separated fields" % (path, lineno))
            if parts[0] in out:
                raise EvalError("%s:%d: duplicate item id %r" % (path, lineno, parts[0]))
            out[parts[0]] = (parts[1], parts[2], parts[3])
    return out


def align_by_id(gold_ids: Sequence[str], *maps):
    """Pick values out of each id-keyed map in gold id order; a missing id is
    a misalignment error."""
    rows = []
    for m in maps:
        extra = set(m) - set(gold_ids)
        if extra:
            raise EvalError("unknown item ids: %s" % ", ".join(sorted(extra)[:5]))
        row = []
        for i in gold_ids:
            if i not in m:
                raise EvalError("missing item id: %r" % i)
            row.append(m[i])
        rows.append(row)
    return rows


def write_confusion_csv(path, report: EvalReport):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + list(report.labels))
        for name, row in zip(report.labels, report.confusion):
            w.writerow([name] + [("%g" % round(v, 6)) for v in row])


def write_report_json(path, report, extra: Optional[dict] = None):
    doc = report.to_json_dict()
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
