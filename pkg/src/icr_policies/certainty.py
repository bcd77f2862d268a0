"""Classification-margin certainty of the Action-Taker and its relation to iCRs.

The certainty of a binary prediction with probability ``p`` is the margin
``|p - (1 - p)|``: 0 at complete indecision, 1 at full confidence. Margins of
the meta-action ("acted upon") are compared between cliparts that are iCR
targets and those that are not, and between the per-turn minimum margin of
iCR and non-iCR turns, with a two-sample Kolmogorov-Smirnov test.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from scipy.special import kolmogorov

from .actions import ACTIONS
from .evaluation import PredictionDump, average_precision, sigmoid

Level = Literal["clipart", "turn"]
LEVELS: tuple[Level, ...] = ("clipart", "turn")
P_FLOOR = 1e-300


@dataclass(frozen=True)
class CertaintySample:
    group: Literal["icr", "non_icr"]
    level: Level
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.size and (v.min() < 0 or v.max() > 1):
            raise ValueError("certainty values must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    def summary(self) -> dict[str, float]:
        v = self.values
        return {"n": int(v.size), "mean": float(v.mean()),
                "std": float(v.std(ddof=1)) if v.size > 1 else 0.0}


def margin(p):
    """|p - (1 - p)| for a probability or an array of probabilities."""
    arr = np.asarray(p, dtype=np.float64)
    if np.any((arr < 0) | (arr > 1)) or np.any(np.isnan(arr)):
        raise ValueError("probabilities must lie in [0, 1]")
    out = np.abs(2 * arr - 1)
    return float(out) if out.ndim == 0 else out


def ecdf(values: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Sorted support points and the right-continuous ECDF at each of them."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    return v, np.arange(1, v.size + 1) / v.size


def ks_two_sample(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided two-sample KS statistic and its asymptotic p-value."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    stat = float(np.max(np.abs(cdf_a - cdf_b)))
    en = np.sqrt(a.size * b.size / (a.size + b.size))
    p = float(np.clip(kolmogorov(en * stat), 0.0, 1.0))
    return stat, p


def format_p(p: float) -> str:
    return f"< {P_FLOOR:g}" if p < P_FLOOR else f"{p:.3g}"


def collect_samples(dump: PredictionDump, level: Level) -> tuple[CertaintySample, CertaintySample]:
    """(iCR sample, non-iCR sample) of meta-action margins.

    ``clipart`` pools every (turn, clipart) margin, split by whether the
    clipart is an iCR target; ``turn`` takes each turn's minimum margin, split
    by the turn-level iCR label.
    """
    if dump.action_logits is None:
        raise ValueError("certainty analysis needs a model with action heads")
    probs = sigmoid(dump.action_logits[..., ACTIONS.index("acted_upon")])
    m = margin(probs)
    if level == "clipart":
        flags = dump.icr_clipart_labels.astype(bool)
        values, labels = m.ravel(), flags.ravel()
    elif level == "turn":
        values, labels = m.min(axis=1), dump.icr_turn_labels.astype(bool)
    else:
        raise ValueError(f"unknown level {level!r}")
    return (CertaintySample("icr", level, values[labels]),
            CertaintySample("non_icr", level, values[~labels]))


def boxplot_stats(values: np.ndarray) -> dict[str, float]:
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    iqr = q3 - q1
    lo = values[values >= q1 - 1.5 * iqr].min()
    hi = values[values <= q3 + 1.5 * iqr].max()
    return {"q1": float(q1), "median": float(med), "q3": float(q3),
            "whisker_low": float(lo), "whisker_high": float(hi),
            "n_outliers": int(np.sum((values < lo) | (values > hi)))}


def analyse_level(dump: PredictionDump, level: Level) -> dict:
    icr, non = collect_samples(dump, level)
    stat, p = ks_two_sample(icr.values, non.values)
    scores = np.concatenate([icr.values, non.values])
    labels = np.r_[np.ones(icr.values.size), np.zeros(non.values.size)]
    xa, ya = ecdf(icr.values)
    xb, yb = ecdf(non.values)
    return {
        "icr": icr.summary(),
        "non_icr": non.summary(),
        "ks_statistic": stat,
        "ks_p_value": p,
        "ks_p_display": format_p(p),
        # lower certainty is taken as the stronger iCR signal
        "ap_negated_margin": average_precision(-scores, labels),
        "ap_margin": average_precision(scores, labels),
        "ecdf": {"icr": [xa.tolist(), ya.tolist()], "non_icr": [xb.tolist(), yb.tolist()]},
        "boxplot": {"icr": boxplot_stats(icr.values), "non_icr": boxplot_stats(non.values)},
    }


def run_h2(dump: PredictionDump, out_dir: str | Path | None = None, figures: bool = True) -> dict:
    """KS tests, certainty-as-predictor AP, ECDF and boxplot data for both levels."""
    report = {
        "score_direction": "ap uses the negated margin (lower certainty ranks higher); "
                           "ap_margin is the opposite convention",
        "levels": {level: analyse_level(dump, level) for level in LEVELS},
    }
    if out_dir is not None:
        write_h2(report, out_dir, figures)
    return report


def table3_rows(report: dict) -> list[list[str]]:
    rows = [["", "clipart iCR", "clipart non-iCR", "turn iCR", "turn non-iCR"]]
    lv = report["levels"]
    rows.append(["mean (std)"] + [f"{lv[l][g]['mean']:.3f} ({lv[l][g]['std']:.3f})"
                                  for l in LEVELS for g in ("icr", "non_icr")])
    rows.append(["KS test"] + [f"{lv[l]['ks_statistic']:.3f}{'*' if lv[l]['ks_p_value'] < 0.001 else ''}"
                               for l in LEVELS for _ in (0, 1)])
    rows.append(["AP"] + [f"{lv[l]['ap_negated_margin']:.3f}" for l in LEVELS for _ in (0, 1)])
    return rows


def write_h2(report: dict, out_dir: str | Path, figures: bool = True) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {
        "score_direction": report["score_direction"],
        "levels": {l: {k: v for k, v in r.items() if k not in ("ecdf",)} for l, r in report["levels"].items()},
    }
    (out_dir / "h2_summary.json").write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    (out_dir / "h2_ecdf.json").write_text(
        json.dumps({l: r["ecdf"] for l, r in report["levels"].items()}) + "\n", encoding="utf-8")
    with open(out_dir / "table3.csv", "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(table3_rows(report))
    if figures:
        plot_h2(report, out_dir)


def plot_h2(report: dict, out_dir: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    titles = {"clipart": "certainty per clipart", "turn": "minimum certainty per turn"}
    for level, res in report["levels"].items():
        fig, ax = plt.subplots(figsize=(4, 3))
        for group, style in (("icr", "-"), ("non_icr", "--")):
            x, y = res["ecdf"][group]
            ax.step([0.0] + x + [1.0], [0.0] + y + [1.0], where="post", linestyle=style,
                    label=group.replace("_", "-"))
        ax.set_xlabel(titles[level])
        ax.set_ylabel("ECDF")
        ax.set_xlim(0, 1)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / f"ecdf_{level}.svg")
        plt.close(fig)

        fig, ax = plt.subplots(figsize=(4, 2.5))
        data = [np.asarray(res["ecdf"][g][0]) for g in ("icr", "non_icr")]
        ax.boxplot(data, orientation="horizontal")
        ax.set_yticks([1, 2], ["iCR", "non-iCR"])
        ax.set_xlabel(titles[level])
        fig.tight_layout()
        fig.savefig(out_dir / f"boxplot_{level}.svg")
        plt.close(fig)
