"""Output writers: delimited label records, JSON reports, text tables, figures.

Every file lands atomically (written to a temporary sibling, then renamed)
so downstream consumers never observe partial output. Figures render with
the Agg backend straight to PNG next to the delimited data they summarize.
"""

from __future__ import annotations

import io
import json
import os
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .dataset import DatasetManifest
from .evaluation import EvalReport
from .propagation import PropagationResult, UNASSIGNED


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_labels_file(
    path,
    manifest: DatasetManifest,
    result: PropagationResult,
    emit_scores: bool = False,
) -> None:
    """One JSON record per item: {id, pseudo_label, confidence, assigned}.

    `pseudo_label` is the class name, or null for UNASSIGNED items. With
    emit_scores each record also carries its full propagated score row.
    """
    lines = []
    for i, item in enumerate(manifest.items):
        label = int(result.pseudo_labels[i])
        rec = {
            "id": item.id,
            "pseudo_label": None if label == UNASSIGNED else manifest.classes[label],
            "confidence": float(result.confidence[i]),
            "assigned": label != UNASSIGNED,
        }
        if emit_scores:
            rec["scores"] = [float(v) for v in result.P[i]]
        lines.append(json.dumps(rec, separators=(",", ":")))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_labels_file(path, manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    """Load (pseudo_labels, confidence) aligned to manifest item order."""
    from .errors import DataError, FormatError

    by_id: dict[str, tuple[int, float]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            name = rec.get("pseudo_label")
            label = UNASSIGNED if name is None else manifest.class_index(name)
            by_id[rec["id"]] = (label, float(rec.get("confidence", 0.0)))
    labels = np.empty(manifest.n, dtype=np.int64)
    confidence = np.empty(manifest.n, dtype=np.float64)
    for i, item in enumerate(manifest.items):
        if item.id not in by_id:
            raise DataError(f"{path}: no prediction for item {item.id!r}")
        labels[i], confidence[i] = by_id[item.id]
    return labels, confidence


def write_cg_stats(path, result: PropagationResult, classes: list[str]) -> None:
    """Flat per-class solver report: {class: {iterations, final_residual}}."""
    stats = {
        classes[st.class_index]: {
            "iterations": st.iterations,
            "final_residual": st.final_residual,
        }
        for st in result.cg_stats
    }
    write_json(path, stats)


def format_report_table(report: EvalReport, per_class: bool = True) -> str:
    """Aligned plain-text rendering of an evaluation report."""
    lines = [
        f"granularity : {report.granularity}",
        f"evaluated   : {report.n_evaluated}",
        f"accuracy    : {report.accuracy:.4f}",
        f"{report.averaging} P/R/F1 : "
        f"{report.macro_precision:.4f} / {report.macro_recall:.4f} / {report.macro_f1:.4f}",
    ]
    if per_class:
        width = max(5, max(len(m.name) for m in report.per_class))
        lines.append("")
        lines.append(f"{'class':<{width}}  {'prec':>6}  {'rec':>6}  {'f1':>6}  {'support':>7}")
        for m in report.per_class:
            lines.append(
                f"{m.name:<{width}}  {m.precision:6.4f}  {m.recall:6.4f}  "
                f"{m.f1:6.4f}  {m.support:7d}"
            )
    return "\n".join(lines) + "\n"


def write_report(base_path, report: EvalReport, per_class: bool = True) -> None:
    """Emit <base>.json and <base>.txt for one report."""
    base = Path(base_path)
    write_json(base.with_suffix(".json"), report.to_dict())
    atomic_write_text(base.with_suffix(".txt"), format_report_table(report, per_class))


def _save_fig(fig, path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=120, bbox_inches="tight")
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def fig_degree_histogram(degrees: np.ndarray, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist(degrees, bins=min(40, max(5, int(np.sqrt(degrees.size)))), color="tab:blue")
    ax.set_xlabel("weighted degree")
    ax.set_ylabel("nodes")
    ax.set_title("degree distribution")
    _save_fig(fig, path)


def fig_residual_curves(result: PropagationResult, classes: list[str], path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for st in result.cg_stats:
        trace = np.asarray(st.residual_trace)
        ax.semilogy(np.arange(trace.size), np.maximum(trace, 1e-300), label=classes[st.class_index])
    ax.set_xlabel("iteration")
    ax.set_ylabel("residual norm")
    ax.set_title("solver convergence per class")
    if len(classes) <= 12:
        ax.legend(fontsize=7)
    _save_fig(fig, path)


def fig_confidence_histogram(confidence: np.ndarray, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist(confidence, bins=20, range=(0.0, 1.0), color="tab:green")
    ax.set_xlabel("confidence")
    ax.set_ylabel("items")
    ax.set_title("pseudo-label confidence")
    _save_fig(fig, path)


def fig_f1_bars(report: EvalReport, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    names = [m.name for m in report.per_class]
    ax.bar(range(len(names)), [m.f1 for m in report.per_class], color="tab:purple")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("F1")
    ax.set_title(f"per-class F1 ({report.granularity} level)")
    _save_fig(fig, path)


def fig_agreement_curve(agreements: list[float], path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    rounds = np.arange(2, len(agreements) + 2)
    ax.plot(rounds, agreements, marker="o")
    ax.set_xlabel("round")
    ax.set_ylabel("agreement with previous round")
    ax.set_ylim(0, 1.02)
    ax.set_title("pseudo-label stability")
    _save_fig(fig, path)


def fig_loss_curve(trace: list[float], path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(np.arange(1, len(trace) + 1), trace, marker=".")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean weighted loss")
    ax.set_title("training loss")
    _save_fig(fig, path)
