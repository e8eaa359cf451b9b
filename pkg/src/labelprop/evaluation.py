"""Scoring predictions against withheld truth at chunk and file granularity.

File-level scores aggregate chunk predictions by majority vote within each
parent file, which typically beats per-chunk accuracy whenever chunks err
independently. UNASSIGNED chunk predictions abstain from the vote rather
than voting for a catch-all class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import DatasetManifest
from .errors import DataError, ParamError
from .propagation import UNASSIGNED


@dataclass
class ClassMetrics:
    name: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class EvalReport:
    """Per-class and averaged precision/recall/F1 plus plain accuracy."""

    per_class: list[ClassMetrics]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float
    granularity: str          # "chunk" | "file"
    n_evaluated: int
    averaging: str = "macro"  # "macro" | "weighted"

    def to_dict(self) -> dict:
        return {
            "granularity": self.granularity,
            "n_evaluated": self.n_evaluated,
            "averaging": self.averaging,
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_class": [
                {
                    "class": m.name,
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "support": m.support,
                }
                for m in self.per_class
            ],
        }


def _score(
    pred: np.ndarray,
    truth: np.ndarray,
    classes: list[str],
    others_class: int | None,
    granularity: str,
    average: str,
) -> EvalReport:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ParamError("pred and truth must be 1-D arrays of equal length")
    if pred.size == 0:
        raise ParamError("nothing to evaluate: empty prediction set")
    if average not in ("macro", "weighted"):
        raise ParamError(f"unknown averaging mode {average!r}")
    c = len(classes)
    if ((truth < 0) | (truth >= c)).any():
        raise DataError("truth contains class indices outside the class list")
    if ((pred >= c) | (pred < UNASSIGNED)).any():
        raise DataError("pred contains class indices outside the class list")
    if others_class is not None:
        if not 0 <= others_class < c:
            raise ParamError(f"others_class index {others_class} out of range")
        pred = np.where(pred == UNASSIGNED, others_class, pred)

    assigned = pred != UNASSIGNED
    correct = assigned & (pred == truth)
    accuracy = float(correct.mean())

    per_class: list[ClassMetrics] = []
    for j, name in enumerate(classes):
        support = int((truth == j).sum())
        tp = int((correct & (truth == j)).sum())
        predicted = int((assigned & (pred == j)).sum())
        precision = tp / predicted if predicted > 0 else 0.0
        recall = tp / support if support > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        per_class.append(ClassMetrics(name, precision, recall, f1, support))

    present = [m for m in per_class if m.support > 0]
    if average == "macro":
        avg = lambda vals, _: float(np.mean(vals))
    else:
        avg = lambda vals, sups: float(np.average(vals, weights=sups))
    supports = [m.support for m in present]
    return EvalReport(
        per_class=per_class,
        macro_precision=avg([m.precision for m in present], supports),
        macro_recall=avg([m.recall for m in present], supports),
        macro_f1=avg([m.f1 for m in present], supports),
        accuracy=accuracy,
        granularity=granularity,
        n_evaluated=int(pred.size),
        averaging=average,
    )


def chunk_metrics(
    pred: np.ndarray,
    truth: np.ndarray,
    classes: list[str],
    others_class: int | None = None,
    average: str = "macro",
) -> EvalReport:
    """Per-chunk scores. UNASSIGNED predictions map to `others_class` when
    one is declared; otherwise they count as wrong and predict no class, so
    they depress recall without entering any precision denominator.
    """
    return _score(pred, truth, classes, others_class, "chunk", average)


def majority_vote(pred: np.ndarray, truth: np.ndarray, file_ids) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Collapse chunk predictions to one (pred, truth) pair per file.

    A file's truth must be shared by all of its chunks. Its prediction is
    the most common assigned chunk prediction, ties broken toward the
    smaller class index; a file whose chunks are all UNASSIGNED stays
    UNASSIGNED. Files are ordered by first appearance.
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    file_ids = list(file_ids)
    if not (len(file_ids) == pred.size == truth.size):
        raise ParamError("pred, truth, and file_ids must have equal length")
    order: list[str] = []
    groups: dict[str, list[int]] = {}
    for pos, fid in enumerate(file_ids):
        if fid not in groups:
            groups[fid] = []
            order.append(fid)
        groups[fid].append(pos)

    c = int(max(truth.max(), pred.max())) + 1 if truth.size else 0
    file_pred = np.empty(len(order), dtype=np.int64)
    file_truth = np.empty(len(order), dtype=np.int64)
    for fi, fid in enumerate(order):
        rows = groups[fid]
        truths = {int(truth[r]) for r in rows}
        if len(truths) != 1:
            raise DataError(f"file {fid!r} has chunks with conflicting truth labels")
        file_truth[fi] = truths.pop()
        votes = [int(pred[r]) for r in rows if pred[r] != UNASSIGNED]
        if not votes:
            file_pred[fi] = UNASSIGNED
        else:
            counts = np.bincount(votes, minlength=c)
            file_pred[fi] = int(counts.argmax())  # argmax -> smallest index on ties
    return file_pred, file_truth, order


def file_metrics(
    pred: np.ndarray,
    truth: np.ndarray,
    manifest: DatasetManifest,
    others_class: int | None = None,
    average: str = "macro",
) -> EvalReport:
    """Majority-vote scores over parent files of the manifest's eval items.

    `pred` and `truth` are aligned with manifest.eval_indices() order.
    """
    eval_idx = manifest.eval_indices()
    pred = np.asarray(pred, dtype=np.int64)
    if pred.size != eval_idx.size:
        raise ParamError(
            f"got {pred.size} predictions for {eval_idx.size} eval items"
        )
    file_ids = [manifest.items[i].file_id for i in eval_idx]
    f_pred, f_truth, _ = majority_vote(pred, truth, file_ids)
    return _score(f_pred, f_truth, manifest.classes, others_class, "file", average)


def others_class_index(classes: list[str]) -> int | None:
    """Index of a declared catch-all class named "Others", if any."""
    for j, name in enumerate(classes):
        if name == "Others":
            return j
    return None
