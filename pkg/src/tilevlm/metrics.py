"""Scoring: field accuracy, precision@k, and precision/recall/F1.

Zero denominators in P/R/F1 score 0 and raise a ``ZeroDivisionWarning``
rather than an error, the conservative choice for a scorer.
"""

from __future__ import annotations

import csv
import warnings
from collections import defaultdict
from typing import Sequence

from .errors import ContractError, DimensionError, ParameterError


class ZeroDivisionWarning(RuntimeWarning):
    pass


def field_accuracy(correct: Sequence[int], valid: Sequence[int]) -> float:
    """Corpus-level ΣC / ΣM (a ratio of sums, not a mean of per-sample ratios)."""
    if len(correct) != len(valid):
        raise DimensionError(f"{len(correct)} correct counts for {len(valid)} samples")
    for c, m in zip(correct, valid):
        if not 0 <= c <= m:
            raise ContractError(f"need 0 <= C <= M per sample, got C={c}, M={m}")
    total = sum(valid)
    if total == 0:
        raise ContractError("field_accuracy: no valid fields")
    return sum(correct) / total


def precision_at_k(relevance: Sequence, k: int = 10) -> float:
    """Relevant items among the first k, over k, even when the list is shorter."""
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    return sum(1 for r in list(relevance)[:k] if r) / k


def _ratio(num: int, den: int, name: str) -> float:
    if den == 0:
        warnings.warn(f"{name}: zero denominator, scoring 0", ZeroDivisionWarning, stacklevel=3)
        return 0.0
    return num / den


def precision_recall_f1(pred: Sequence, truth: Sequence) -> tuple[float, float, float]:
    if len(pred) != len(truth):
        raise ContractError(f"{len(pred)} predictions for {len(truth)} labels")
    tp = sum(1 for p, t in zip(pred, truth) if p and t)
    fp = sum(1 for p, t in zip(pred, truth) if p and not t)
    fn = sum(1 for p, t in zip(pred, truth) if t and not p)
    p = _ratio(tp, tp + fp, "precision")
    r = _ratio(tp, tp + fn, "recall")
    if p + r == 0:
        warnings.warn("f1: precision and recall are both 0", ZeroDivisionWarning, stacklevel=2)
        return p, r, 0.0
    return p, r, 2 * p * r / (p + r)


# --------------------------------------------------------------------------
# CSV front-ends used by the ``score`` command
#
# f1:        pred and truth are ``id,label`` with label in {0, 1}; joined on id.
# p@10:      pred is ``query,rank,item``; truth is ``query,item,relevant``.
#            Score is the mean precision@10 over the queries in pred.
# field-acc: pred and truth are ``sample,field,value``. A truth row is a
#            valid field; it is correct when pred has the same value.


def _rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _need(rows: list[dict], cols: Sequence[str], path) -> None:
    if rows and not set(cols) <= set(rows[0]):
        raise ContractError(f"{path}: expected columns {list(cols)}, got {list(rows[0])}")


def _flag(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes"):
        return True
    if t in ("0", "false", "no", ""):
        return False
    raise ContractError(f"not a binary label: {text!r}")


def score_f1(pred_path, truth_path) -> dict:
    pred, truth = _rows(pred_path), _rows(truth_path)
    _need(pred, ("id", "label"), pred_path)
    _need(truth, ("id", "label"), truth_path)
    p_map = {r["id"]: _flag(r["label"]) for r in pred}
    t_map = {r["id"]: _flag(r["label"]) for r in truth}
    if set(p_map) != set(t_map):
        raise ContractError("prediction and truth ids differ")
    ids = sorted(t_map)
    p, r, f = precision_recall_f1([p_map[i] for i in ids], [t_map[i] for i in ids])
    return {"precision": p, "recall": r, "f1": f}


def score_precision_at_10(pred_path, truth_path) -> dict:
    pred, truth = _rows(pred_path), _rows(truth_path)
    _need(pred, ("query", "rank", "item"), pred_path)
    _need(truth, ("query", "item", "relevant"), truth_path)
    rel = {(r["query"], r["item"]) for r in truth if _flag(r["relevant"])}
    ranked: dict[str, list[tuple[int, str]]] = defaultdict(list)
    for r in pred:
        ranked[r["query"]].append((int(r["rank"]), r["item"]))
    if not ranked:
        raise ContractError("no queries in predictions")
    scores = {}
    for q, items in ranked.items():
        items.sort()
        names = [it for _, it in items]
        if len(set(names)) != len(names):
            raise ContractError(f"query {q!r}: duplicate items in ranked list")
        scores[q] = precision_at_k([(q, it) in rel for it in names], 10)
    return {"p@10": sum(scores.values()) / len(scores), "queries": len(scores)}


def score_field_accuracy(pred_path, truth_path) -> dict:
    pred, truth = _rows(pred_path), _rows(truth_path)
    _need(pred, ("sample", "field", "value"), pred_path)
    _need(truth, ("sample", "field", "value"), truth_path)
    got = {(r["sample"], r["field"]): r["value"] for r in pred}
    correct: dict[str, int] = defaultdict(int)
    valid: dict[str, int] = defaultdict(int)
    for r in truth:
        key = (r["sample"], r["field"])
        valid[r["sample"]] += 1
        correct[r["sample"]] += int(got.get(key) == r["value"])
    samples = sorted(valid)
    return {"field_accuracy": field_accuracy([correct[s] for s in samples], [valid[s] for s in samples]),
            "samples": len(samples)}


SCORERS = {"f1": score_f1, "p@10": score_precision_at_10, "field-acc": score_field_accuracy}
