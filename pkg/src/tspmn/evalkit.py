"""Prediction aggregation and multi-label metrics.

Micro precision/recall/F1 pool true/false positives and false negatives
over every (query, term) decision. Macro-F1 averages per-term F1 over terms
that were either gold-supported or predicted at least once. Accuracy is
exact set match: a query counts only if its whole predicted term set equals
the gold set.

Zero-support convention: a term with neither gold nor predicted occurrences
is left out of the macro average, and if there are no decisions at all the
pooled precision/recall/F1 are reported as 1.0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .util import DataError, atomic_write_text


@dataclass(frozen=True)
class TermCounts:
    tp: int
    fp: int
    fn: int
    f1: float


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    micro_f1: float
    macro_f1: float
    accuracy: float
    per_term: dict[int, TermCounts]

    def headline(self) -> dict[str, float]:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
        }


def aggregate_predictions(
    per_sequence: Iterable[tuple[Sequence[int], Iterable[int]]]
) -> set[int]:
    """Union the selected terms of the sequences packed from one query.

    Each input pair is (term_ids of the sequence, selected indices into
    it). A term appearing in more than one sequence is a caller bug.
    """
    seen: set[int] = set()
    selected: set[int] = set()
    for term_ids, picked in per_sequence:
        for t in term_ids:
            if t in seen:
                raise DataError(f"term {t} appears in more than one sequence")
            seen.add(t)
        for i in picked:
            selected.add(term_ids[i])
    return selected


def compute_metrics(
    preds: Mapping[str, set[int]],
    golds: Mapping[str, set[int]],
    universe: Iterable[int],
) -> Metrics:
    """Score predicted term sets against gold term sets, per query id."""
    if set(preds) != set(golds):
        raise DataError("prediction and gold query ids differ")

    term_tp: dict[int, int] = {}
    term_fp: dict[int, int] = {}
    term_fn: dict[int, int] = {}
    exact = 0
    for qid in preds:
        p, g = preds[qid], golds[qid]
        if p == g:
            exact += 1
        for t in p & g:
            term_tp[t] = term_tp.get(t, 0) + 1
        for t in p - g:
            term_fp[t] = term_fp.get(t, 0) + 1
        for t in g - p:
            term_fn[t] = term_fn.get(t, 0) + 1

    tp = sum(term_tp.values())
    fp = sum(term_fp.values())
    fn = sum(term_fn.values())
    if tp == fp == fn == 0:
        precision = recall = micro = 1.0
    else:
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        micro = 2 * precision * recall / (precision + recall) if precision + recall else 0.0

    per_term: dict[int, TermCounts] = {}
    f1_values = []
    for t in sorted(universe):
        t_tp = term_tp.get(t, 0)
        t_fp = term_fp.get(t, 0)
        t_fn = term_fn.get(t, 0)
        if t_tp == t_fp == t_fn == 0:
            continue  # neither gold-supported nor predicted
        f1 = 2 * t_tp / (2 * t_tp + t_fp + t_fn)
        per_term[t] = TermCounts(tp=t_tp, fp=t_fp, fn=t_fn, f1=f1)
        f1_values.append(f1)
    macro = sum(f1_values) / len(f1_values) if f1_values else 1.0

    accuracy = exact / len(preds) if preds else 1.0
    return Metrics(
        precision=precision,
        recall=recall,
        micro_f1=micro,
        macro_f1=macro,
        accuracy=accuracy,
        per_term=per_term,
    )


def write_metrics_json(metrics: Metrics, path: str) -> None:
    payload = dict(metrics.headline())
    payload["per_term"] = {
        str(t): {"tp": c.tp, "fp": c.fp, "fn": c.fn, "f1": c.f1}
        for t, c in sorted(metrics.per_term.items())
    }
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_metrics_tsv(metrics: Metrics, path: str) -> None:
    lines = ["term_id\ttp\tfp\tfn\tf1"]
    for t, c in sorted(metrics.per_term.items()):
        lines.append(f"{t}\t{c.tp}\t{c.fp}\t{c.fn}\t{c.f1:.6f}")
    atomic_write_text(path, "\n".join(lines) + "\n")
