"""Ranking and threshold metrics, prediction dumps and result tables."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .actions import ACTIONS, CONCRETE_ACTIONS


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Step-wise average precision: sum over thresholds of (R_n - R_{n-1}) * P_n.

    Tied scores form one threshold. Raises ``ValueError`` when there is no
    positive label, since AP is undefined then.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length ({s.size} vs {y.size})")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("average precision is undefined without positive labels")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # last index of each block of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp_at = tp[ends].astype(np.float64)
    precision = tp_at / (ends + 1)
    recall = tp_at / n_pos
    increments = np.diff(np.r_[0.0, recall])
    return float(np.sum(increments * precision))


def f1_scores(probabilities: Sequence[float], labels: Sequence[int],
              threshold: float = 0.5) -> tuple[float, float]:
    """(binary F1 of the positive class, macro F1 over both classes).

    A prediction is positive when its probability is at least ``threshold``.
    A class whose F1 has a zero denominator scores 0.
    """
    p = np.asarray(probabilities, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if p.shape != y.shape:
        raise ValueError("probabilities and labels differ in length")
    pred = p >= threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    tn = int(np.sum(~pred & ~y))

    def f1(tp_, fp_, fn_):
        denom = 2 * tp_ + fp_ + fn_
        return 2 * tp_ / denom if denom else 0.0

    pos = f1(tp, fp, fn)
    neg = f1(tn, fn, fp)
    return pos, (pos + neg) / 2


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1 / (1 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1 + np.exp(-np.abs(x))))


@dataclass
class PredictionDump:
    """Accumulated logits and labels of one split, one row per decision point."""

    game_id: np.ndarray
    turn_index: np.ndarray
    task: str
    action_logits: np.ndarray | None = None       # (N, 28, 5)
    action_labels: np.ndarray | None = None       # (N, 28, 5)
    icr_logits: np.ndarray | None = None          # (N,) or (N, 28)
    icr_turn_labels: np.ndarray | None = None     # (N,)
    icr_clipart_labels: np.ndarray | None = None  # (N, 28)

    def __len__(self) -> int:
        return len(self.game_id)

    def icr_scores_and_labels(self) -> tuple[np.ndarray, np.ndarray]:
        if self.icr_logits is None:
            raise ValueError("dump has no iCR predictions")
        if self.task == "when":
            return self.icr_logits.ravel(), self.icr_turn_labels.ravel()
        return self.icr_logits.ravel(), self.icr_clipart_labels.ravel()

    def save(self, path: str | Path) -> None:
        arrays = {k: v for k, v in asdict(self).items() if v is not None and k != "task"}
        np.savez_compressed(path, task=np.array(self.task), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "PredictionDump":
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
        task = str(data.pop("task"))
        return cls(task=task, **data)


@dataclass
class MetricsRow:
    variant: str
    inputs: str
    task: str
    icr_ap: float | None = None
    icr_bf1: float | None = None
    icr_mf1: float | None = None
    action_ap: float | None = None
    action_bf1: float | None = None
    action_mf1: float | None = None
    meta: dict = field(default_factory=dict)

    METRICS = ("icr_ap", "icr_bf1", "icr_mf1", "action_ap", "action_bf1", "action_mf1")

    def __post_init__(self) -> None:
        for name in self.METRICS:
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def values(self) -> dict[str, float | None]:
        return {k: getattr(self, k) for k in self.METRICS}


def action_metrics(logits: np.ndarray, labels: np.ndarray,
                   aggregation: Literal["pooled", "macro"] = "pooled") -> tuple[float, float, float]:
    """AP, bF1, mF1 over the four concrete actions (meta-action excluded)."""
    lg, lb = logits[..., :4], labels[..., :4]
    if aggregation == "pooled":
        ap = average_precision(lg.ravel(), lb.ravel())
        bf1, mf1 = f1_scores(sigmoid(lg.ravel()), lb.ravel())
        return ap, bf1, mf1
    per = []
    for k in range(4):
        ap = average_precision(lg[..., k].ravel(), lb[..., k].ravel())
        per.append((ap, *f1_scores(sigmoid(lg[..., k].ravel()), lb[..., k].ravel())))
    return tuple(float(np.mean([p[i] for p in per])) for i in range(3))


def metrics_from_dump(dump: PredictionDump, variant: str, inputs: str,
                      aggregation: Literal["pooled", "macro"] = "pooled") -> MetricsRow:
    row = MetricsRow(variant=variant, inputs=inputs, task=dump.task,
                     meta={"action_aggregation": aggregation, "n_decision_points": len(dump)})
    if dump.icr_logits is not None:
        scores, labels = dump.icr_scores_and_labels()
        row.icr_ap = average_precision(scores, labels)
        row.icr_bf1, row.icr_mf1 = f1_scores(sigmoid(scores), labels)
    if dump.action_logits is not None:
        row.action_ap, row.action_bf1, row.action_mf1 = action_metrics(
            dump.action_logits, dump.action_labels, aggregation)
    row.__post_init__()
    return row


def per_action_ap_from_dump(dump: PredictionDump) -> dict[str, float]:
    if dump.action_logits is None:
        raise ValueError("this model has no action heads")
    return {name: average_precision(dump.action_logits[..., k].ravel(), dump.action_labels[..., k].ravel())
            for k, name in enumerate(CONCRETE_ACTIONS)}


# --- checkpoint-level entry points ---------------------------------------------

def _dump_for(checkpoint, records, featurizer, expected_task=None):
    from .training import load_checkpoint, predict_dump

    model, _ = load_checkpoint(checkpoint)
    if expected_task and model.cfg.task != expected_task:
        raise ValueError(f"checkpoint is a task={model.cfg.task!r} model, expected {expected_task!r}")
    if featurizer is None:
        raise ValueError("a featurizer is required to evaluate a checkpoint")
    return model, predict_dump(model, records, featurizer)


def evaluate_when(checkpoint, records, featurizer=None, aggregation="pooled") -> MetricsRow:
    """Turn-level metrics over every decision point of a split."""
    model, dump = _dump_for(checkpoint, records, featurizer, "when")
    return metrics_from_dump(dump, model.cfg.variant, model.cfg.inputs_label(), aggregation)


def evaluate_what(checkpoint, records, featurizer=None, aggregation="pooled") -> MetricsRow:
    """Clipart-level metrics pooled over all (turn, clipart) pairs of the iCR turns."""
    if any(not r.is_icr for r in records):
        raise ValueError("Task-2 evaluation expects iCR turns only")
    model, dump = _dump_for(checkpoint, records, featurizer, "what")
    return metrics_from_dump(dump, model.cfg.variant, model.cfg.inputs_label(), aggregation)


def per_action_ap(checkpoint, records, featurizer=None) -> dict[str, float]:
    _, dump = _dump_for(checkpoint, records, featurizer)
    return per_action_ap_from_dump(dump)


# --- reports -------------------------------------------------------------------

VARIANT_LABELS = {
    "overhearer": "Overhearer",
    "action_taker": "Action-Taker",
    "icr_action_taker": "iCR-Action-Taker",
    "icr_action_detecter": "iCR-Action-Detecter",
}


def row_key(row: MetricsRow) -> str:
    return f"{VARIANT_LABELS.get(row.variant, row.variant)} | {row.inputs}"


def load_reference(path: str | Path) -> dict[tuple[str, str], dict[str, float]]:
    """Reference metrics: JSON list of {task, model, inputs, <metric>: value}."""
    out = {}
    for entry in json.loads(Path(path).read_text(encoding="utf-8")):
        key = (entry["task"], f"{entry['model']} | {entry['inputs']}")
        out[key] = {k: v for k, v in entry.items() if k in MetricsRow.METRICS and v is not None}
    return out


def report_rows(rows: Sequence[MetricsRow], reference: dict | None = None) -> list[dict]:
    """Table rows grouped by task (when first); optional signed deltas against a reference."""
    out = []
    for task in ("when", "what"):
        for row in (r for r in rows if r.task == task):
            rec = {"task": task, "model": VARIANT_LABELS.get(row.variant, row.variant), "inputs": row.inputs}
            rec.update({k: (None if v is None else round(v, 6)) for k, v in row.values().items()})
            if reference is not None:
                ref = reference.get((task, row_key(row)), {})
                for k, v in row.values().items():
                    if k in ref and v is not None:
                        rec[f"delta_{k}"] = round(v - ref[k], 6)
            rec["meta"] = dict(row.meta)
            out.append(rec)
    return out


def write_report(rows: Sequence[MetricsRow], out_dir: str | Path, reference: dict | None = None) -> list[dict]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = report_rows(rows, reference)
    (out_dir / "report.json").write_text(json.dumps(table, indent=1) + "\n", encoding="utf-8")
    cols = ["task", "model", "inputs", *MetricsRow.METRICS]
    if reference is not None:
        cols += [f"delta_{k}" for k in MetricsRow.METRICS]
    with open(out_dir / "report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for rec in table:
            w.writerow({k: ("" if rec.get(k) is None else rec.get(k)) for k in cols})
    return table


def format_table(table: Sequence[dict]) -> str:
    """Plain-text rendering with one block per task."""
    lines = []
    for task, title in (("when", "Task 1: when to ask"), ("what", "Task 2: what to ask")):
        block = [r for r in table if r["task"] == task]
        if not block:
            continue
        lines.append(title)
        lines.append(f"{'model':<22}{'inputs':<24}" + "".join(f"{m:>11}" for m in MetricsRow.METRICS))
        for r in block:
            vals = "".join(f"{'-' if r[m] is None else format(r[m], '.3f'):>11}" for m in MetricsRow.METRICS)
            lines.append(f"{r['model']:<22}{r['inputs']:<24}{vals}")
        lines.append("")
    return "\n".join(lines)
