"""Precision/recall/F1, precision-recall curves and per-token reports.

0/0 conventions: precision, recall and F1 are 0 when their denominator is 0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import NoPositives
from .panel import format_value


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _flat(probs, labels, mask):
    p = np.asarray(probs).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    m = np.ones_like(y) if mask is None else np.asarray(mask).reshape(-1).astype(bool)
    return p[m], y[m]


def confusion(preds, labels, mask=None) -> Confusion:
    yhat, y = _flat(preds, labels, mask)
    yhat = yhat.astype(bool)
    return Confusion(
        int(np.sum(yhat & y)), int(np.sum(yhat & ~y)), int(np.sum(~yhat & y)), int(np.sum(~yhat & ~y))
    )


def prf1(conf: Confusion) -> tuple[float, float, float]:
    precision = conf.tp / (conf.tp + conf.fp) if conf.tp + conf.fp else 0.0
    recall = conf.tp / (conf.tp + conf.fn) if conf.tp + conf.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


@dataclass(frozen=True)
class PRCurve:
    thresholds: np.ndarray  # descending distinct scores
    recall: np.ndarray  # non-decreasing
    precision: np.ndarray
    auc: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.recall.tolist(), self.precision.tolist()))

    def at(self, gamma: float) -> tuple[float, float]:
        """(precision, recall) of the rule p >= gamma."""
        k = np.flatnonzero(self.thresholds >= gamma)
        if len(k) == 0:
            return 0.0, 0.0
        j = k[-1]
        return float(self.precision[j]), float(self.recall[j])

    def restricted(self, min_recall: float = 0.5) -> "PRCurve":
        keep = self.recall >= min_recall
        return PRCurve(self.thresholds[keep], self.recall[keep], self.precision[keep], self.auc)


def _trapezoid(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def pr_curve(probs, labels, mask=None) -> PRCurve:
    """One point per distinct score (rule p >= score), highest score first.

    The area is the trapezoid over recall, extended flat to recall 0 from the
    first point.
    """
    p, y = _flat(probs, labels, mask)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositives("precision-recall curve needs at least one positive")
    order = np.argsort(-p, kind="stable")
    p_sorted, y_sorted = p[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    last_of_run = np.r_[p_sorted[1:] != p_sorted[:-1], True]
    thresholds = p_sorted[last_of_run]
    tp, fp = tp[last_of_run], fp[last_of_run]
    recall = tp / n_pos
    precision = tp / (tp + fp)
    auc = _trapezoid(np.r_[0.0, recall], np.r_[precision[0], precision])
    return PRCurve(thresholds, recall, precision, auc)


@dataclass(frozen=True)
class TokenReport:
    token: str
    n_events: int
    precision: float
    recall: float
    f1: float


def per_token_report(preds, labels, tokens: Sequence[str], mask=None, min_events: int = 5) -> list[TokenReport]:
    """Per-token metrics over (N, T) prediction/label grids; tokens with fewer
    than ``min_events`` positives are left out."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    mask = np.ones(labels.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    out = []
    for i, tok in enumerate(tokens):
        n_events = int(labels[i][mask[i]].sum())
        if n_events < min_events:
            continue
        out.append(TokenReport(tok, n_events, *prf1(confusion(preds[i], labels[i], mask[i]))))
    return out


def write_pr_csv(curve: PRCurve, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "recall", "precision"])
        for t, r, p in zip(curve.thresholds, curve.recall, curve.precision):
            w.writerow([format_value(t), format_value(r), format_value(p)])


def write_pr_svg(curves: dict[str, tuple[np.ndarray, np.ndarray]], path: str | Path, min_recall: float = 0.5) -> None:
    """Line chart of precision against recall for recall in [min_recall, 1]."""
    width, height, pad = 480, 360, 48
    colors = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"]

    def sx(r):
        return pad + (r - min_recall) / (1 - min_recall) * (width - 2 * pad)

    def sy(p):
        return height - pad - p * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-size="12">Recall</text>',
        f'<text x="14" y="{height / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {height / 2})">Precision</text>',
    ]
    for k in range(6):
        r = min_recall + k * (1 - min_recall) / 5
        parts.append(f'<text x="{sx(r):.1f}" y="{height - pad + 16}" text-anchor="middle" font-size="10">{r:.1f}</text>')
        parts.append(f'<text x="{pad - 6}" y="{sy(k / 5) + 4:.1f}" text-anchor="end" font-size="10">{k / 5:.1f}</text>')
    for n, (label, (recall, precision)) in enumerate(curves.items()):
        keep = np.asarray(recall) >= min_recall
        pts = " ".join(f"{sx(r):.2f},{sy(p):.2f}" for r, p in zip(np.asarray(recall)[keep], np.asarray(precision)[keep]))
        color = colors[n % len(colors)]
        if pts:
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 14 * n}" text-anchor="end" font-size="11" fill="{color}">{label}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
