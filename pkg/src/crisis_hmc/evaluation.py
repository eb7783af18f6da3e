"""Multi-label evaluation: per-label and macro F1, AIT macro, per-event-type breakdown."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .exceptions import ValidationError
from .ontology import LabelOntology, derive_upper_labels

logger = logging.getLogger(__name__)

SCHEMA = "eval-v1"


def _as_sets(rows, labels) -> list[set]:
    if isinstance(rows, np.ndarray):
        return [{labels[j] for j in np.flatnonzero(r)} for r in np.atleast_2d(rows)]
    return [set(r) for r in rows]


def label_scores(pred, gold, label) -> dict:
    tp = sum(label in p and label in g for p, g in zip(pred, gold))
    n_pred = sum(label in p for p in pred)
    support = sum(label in g for g in gold)
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / support if support else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return {"precision": precision, "recall": recall, "f1": f1, "support": support}


def macro_f1(predicted, gold, labels: Sequence[str], skip_zero_support: bool = False) -> dict:
    """Unweighted mean of per-label F1.

    ``predicted`` and ``gold`` are parallel lists of label sets (or indicator
    matrices whose columns follow ``labels``). Labels without gold support
    score 0 and count toward the mean unless ``skip_zero_support`` is set.
    """
    labels = list(labels)
    pred = _as_sets(predicted, labels)
    gold = _as_sets(gold, labels)
    if len(pred) != len(gold):
        raise ValidationError(f"{len(pred)} predictions for {len(gold)} gold documents")
    per_label = {lab: label_scores(pred, gold, lab) for lab in labels}
    counted = [m["f1"] for m in per_label.values() if m["support"] > 0 or not skip_zero_support]
    macro = float(np.mean(counted)) if counted else 0.0
    return {"per_label": per_label, "macro": macro}


def per_event_type_report(
    predictions,
    gold: Sequence,
    labels: Sequence[str],
    skip_zero_support: bool = False,
) -> dict:
    """Lower-level macro F1 per event, aggregated to mean and population std per event type.

    ``gold`` holds tweets (with ``id``, ``event_id``, ``event_type``,
    ``lower_labels``). ``predictions`` is either a list parallel to ``gold``
    or a mapping from tweet id to predicted lower labels; event types with
    no predicted tweet are left out and reported under ``notices``.
    """
    if isinstance(predictions, Mapping):
        pairs = [(predictions.get(t.id), t) for t in gold]
    else:
        if len(predictions) != len(gold):
            raise ValidationError("predictions and gold differ in length")
        pairs = list(zip(predictions, gold))
    by_event: dict = {}
    for pred, tweet in pairs:
        by_event.setdefault((tweet.event_type, tweet.event_id), []).append((pred, tweet))

    types: dict = {}
    notices = []
    for (etype, event_id), rows in sorted(by_event.items()):
        rows = [(p, t) for p, t in rows if p is not None]
        if not rows:
            continue
        score = macro_f1([set(p) for p, _ in rows], [t.lower_labels for _, t in rows], labels, skip_zero_support)
        types.setdefault(etype, {})[event_id] = score["macro"]
    for etype in sorted({t.event_type for t in gold} - set(types)):
        notices.append(f"event type {etype!r} has no predictions; omitted")
        logger.info(notices[-1])

    out = {}
    for etype, events in sorted(types.items()):
        scores = np.array(list(events.values()))
        out[etype] = {
            "mean": float(scores.mean()),
            "std": float(scores.std()),  # population std, 0 for a single event
            "n_events": len(events),
            "events": dict(sorted(events.items())),
        }
    return {"event_types": out, "notices": notices}


@dataclass
class EvalReport:
    per_label: dict
    macro_f1_upper: float
    macro_f1_lower: float
    macro_f1_ait: float
    per_event_type: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    per_label_upper: dict = field(default_factory=dict)
    schema: str = SCHEMA

    def to_dict(self) -> dict:
        return asdict(self)

    def row(self) -> dict:
        return {"L_T": self.macro_f1_upper, "L_B": self.macro_f1_lower, "AIT": self.macro_f1_ait}


def evaluate(
    pred_lower: Sequence,
    gold: Sequence,
    ontology: LabelOntology,
    pred_upper: Sequence | None = None,
    skip_zero_support: bool = False,
    config: dict | None = None,
) -> EvalReport:
    """Full report for predictions on ``gold`` tweets.

    Upper predictions default to the parents of the predicted lower labels.
    """
    lower_labels = list(ontology.lower_labels)
    pred_lower = _as_sets(pred_lower, lower_labels)
    if pred_upper is None:
        pred_upper = [derive_upper_labels(p, ontology) for p in pred_lower]
    else:
        pred_upper = _as_sets(pred_upper, list(ontology.upper_labels))
    gold_lower = [t.lower_labels for t in gold]
    gold_upper = [t.upper_labels for t in gold]
    low = macro_f1(pred_lower, gold_lower, lower_labels, skip_zero_support)
    up = macro_f1(pred_upper, gold_upper, ontology.upper_labels, skip_zero_support)
    ait = macro_f1(pred_lower, gold_lower, ontology.ait_labels, skip_zero_support)
    events = per_event_type_report(pred_lower, gold, lower_labels, skip_zero_support)
    return EvalReport(
        per_label=low["per_label"],
        macro_f1_upper=up["macro"],
        macro_f1_lower=low["macro"],
        macro_f1_ait=ait["macro"],
        per_event_type=events,
        config=dict(config or {}),
        per_label_upper=up["per_label"],
    )


# -- output ----------------------------------------------------------------


def write_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_per_label_csv(report: EvalReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "support", "precision", "recall", "f1"])
        for label, m in report.per_label.items():
            writer.writerow([label, m["support"], f"{m['precision']:.6f}", f"{m['recall']:.6f}", f"{m['f1']:.6f}"])
    return path


def _svg_figure(report: EvalReport, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "crisis-hmc"
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(12, 4.5))
    labels = list(report.per_label)
    ax1.bar(range(len(labels)), [report.per_label[l]["f1"] for l in labels], color="#4477aa")
    ax1.set_xticks(range(len(labels)))
    ax1.set_xticklabels(labels, rotation=90, fontsize=6)
    ax1.set_ylabel("F1")
    ax1.set_ylim(0, 1)
    ax1.set_title("per information type")
    types = report.per_event_type.get("event_types", {})
    names = list(types)
    ax2.bar(range(len(names)), [types[n]["mean"] for n in names],
            yerr=[types[n]["std"] for n in names], capsize=3, color="#ee6677")
    ax2.set_xticks(range(len(names)))
    ax2.set_xticklabels(names, rotation=45, fontsize=7)
    ax2.set_ylim(0, 1)
    ax2.set_title("lower-level macro F1 per event type")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def emit_report(report: EvalReport, out_dir, formats=("json", "csv", "svg"), stem: str = "report") -> list[Path]:
    """Write the report as JSON, per-label CSV and an SVG figure."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write report to {out_dir}: {exc}") from exc
    written = []
    for fmt in formats:
        if fmt == "json":
            written.append(write_json(report.to_dict(), out_dir / f"{stem}.json"))
        elif fmt == "csv":
            written.append(write_per_label_csv(report, out_dir / f"{stem}.csv"))
        elif fmt == "svg":
            written.append(_svg_figure(report, out_dir / f"{stem}.svg"))
        else:
            raise ValidationError(f"unknown report format {fmt!r}")
    return written
