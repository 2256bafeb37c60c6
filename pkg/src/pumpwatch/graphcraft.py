"""Token graphs inferred from aggregated market series.

* static correlation graph (G1): one thresholded Pearson graph on the
  training hours;
* event-driven dynamic graph (G2): windows around training pump hours,
  edge weights kept as running means of the window correlations;
* self-adaptive graph (G3): softmax(relu(E1 E2^T)) from learnable node
  embeddings, sparsified at ``eps``.

Edge convention: a nonzero A[i, j] is an edge ``src=j -> dst=i``, i.e. node i
aggregates messages from its neighbours j.
"""

from __future__ import annotations

import bisect
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import TooFewSamples
from .numcore import Segments, Tensor, gather, relu, reshape, row_softmax
from .panel import Panel, SplitIndex, format_ts, format_value

log = logging.getLogger(__name__)

SIGNALS = ("num_trades", "volume")


@dataclass(frozen=True, eq=False)
class Adjacency:
    n: int
    src: np.ndarray
    dst: np.ndarray
    weights: np.ndarray
    directed: bool = False
    identity: bool = False  # no explicit edges; self information flows through the root term

    @property
    def edges(self) -> list[tuple[int, int]]:
        return list(zip(self.src.tolist(), self.dst.tolist()))

    @property
    def n_edges(self) -> int:
        return len(self.src)

    @classmethod
    def identity_graph(cls, n: int) -> "Adjacency":
        empty = np.array([], dtype=np.int64)
        return cls(n, empty, empty, np.array([], dtype=np.float64), directed=False, identity=True)

    @classmethod
    def from_dense(cls, A: np.ndarray, directed: bool = False) -> "Adjacency":
        dst, src = np.nonzero(A)
        return cls(A.shape[0], src.astype(np.int64), dst.astype(np.int64), A[dst, src].astype(np.float64), directed)

    def to_dense(self) -> np.ndarray:
        if self.identity:
            return np.eye(self.n)
        A = np.zeros((self.n, self.n))
        A[self.dst, self.src] = self.weights
        return A

    def same_as(self, other: "Adjacency") -> bool:
        return (
            self.n == other.n
            and self.identity == other.identity
            and np.array_equal(self.src, other.src)
            and np.array_equal(self.dst, other.dst)
            and self.weights.tobytes() == other.weights.tobytes()
        )


def signal_matrix(panel: Panel, kind: str, positions: Sequence[int]) -> np.ndarray:
    """log(1 + s) over the given grid positions, time × token; missing hours are 0."""
    if kind not in SIGNALS:
        raise ValueError(f"signal must be one of {SIGNALS}, got {kind!r}")
    pos = np.asarray(positions, dtype=np.int64)
    s = np.where(panel.present[:, pos], panel.field(kind)[:, pos], 0.0)
    return np.log1p(s).T


def pearson_matrix(S: np.ndarray) -> np.ndarray:
    """Column-wise Pearson correlation with a zero diagonal.

    Columns with (numerically) zero variance correlate 0 with every column.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] < 2:
        raise TooFewSamples(f"need >= 2 rows, got shape {S.shape}")
    Xc = S - S.mean(axis=0)
    ss = np.einsum("ij,ij->j", Xc, Xc)
    scale = np.maximum(np.abs(S).max(axis=0), 1.0)
    dead = ss <= (1e-12 * scale) ** 2 * S.shape[0]
    norm = np.sqrt(np.where(dead, 1.0, ss))
    C = (Xc.T @ Xc) / np.outer(norm, norm)
    C[dead, :] = 0.0
    C[:, dead] = 0.0
    np.fill_diagonal(C, 0.0)
    return np.clip(C, -1.0, 1.0)


def quantile_threshold(C: np.ndarray, rho: float, tau_min: float) -> float:
    """max(tau_min, linear-interpolation rho-quantile of the strict upper triangle)."""
    n = C.shape[0]
    if n < 2:
        raise ValueError("need at least two nodes")
    if not 0 < rho < 1:
        raise ValueError(f"rho must be in (0, 1), got {rho}")
    iu = np.triu_indices(n, k=1)
    return float(max(tau_min, np.quantile(C[iu], rho, method="linear")))


def _threshold_edges(C: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    i, j = np.nonzero(np.triu(C > tau, k=1))
    return i, j


def build_static_graph(panel: Panel, kind: str, train_idx: Sequence[int], rho: float = 0.90, tau_min: float = 0.15) -> Adjacency:
    if len(train_idx) == 0:
        raise ValueError("training positions are empty")
    C = pearson_matrix(signal_matrix(panel, kind, train_idx))
    tau = quantile_threshold(C, rho, tau_min)
    A = np.where(C > tau, C, 0.0)
    np.fill_diagonal(A, 0.0)
    return Adjacency.from_dense(A)


@dataclass(frozen=True)
class GraphTimeline:
    """Adjacency snapshots saved after each processed training event."""

    n: int
    positions: tuple[int, ...]
    snapshots: tuple[Adjacency, ...]
    fallback: Adjacency = field(default=None)  # identity
    skipped: tuple[int, ...] = ()

    def __post_init__(self):
        if self.fallback is None:
            object.__setattr__(self, "fallback", Adjacency.identity_graph(self.n))

    @property
    def last(self) -> Adjacency:
        return self.snapshots[-1] if self.snapshots else self.fallback


def build_dynamic_timeline(
    panel: Panel,
    kind: str,
    train_idx: Sequence[int],
    L: int = 12,
    rho: float = 0.95,
    tau_min: float = 0.15,
    event_positions: Sequence[int] | None = None,
) -> GraphTimeline:
    """Event-driven correlation graph over training pump hours.

    For each training hour p carrying at least one label (chronological), the
    correlation of the log signal over {p-L..p} ∩ train is thresholded; each
    selected pair accumulates a running sum and count, and the snapshot holds
    the mean correlation of every pair ever selected.
    """
    if L < 2:
        raise ValueError("L must be >= 2")
    train = np.asarray(train_idx, dtype=np.int64)
    train_set = set(train.tolist())
    if event_positions is None:
        event_positions = [int(k) for k in train if panel.labels[:, k].any()]
    events = sorted(p for p in event_positions if p in train_set)

    n = panel.n_tokens
    sums = np.zeros((n, n))
    counts = np.zeros((n, n), dtype=np.int64)
    positions, snapshots, skipped = [], [], []
    for p in events:
        window = [k for k in range(p - L, p + 1) if k in train_set]
        if len(window) < 2:
            log.warning("skipping event at %s: window has %d rows", format_ts(panel.timestamps[p]), len(window))
            skipped.append(p)
            continue
        C = pearson_matrix(signal_matrix(panel, kind, window))
        tau = quantile_threshold(C, rho, tau_min)
        i, j = _threshold_edges(C, tau)
        sums[i, j] += C[i, j]
        counts[i, j] += 1
        upper = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
        A = upper + upper.T
        positions.append(p)
        snapshots.append(Adjacency.from_dense(A))
    return GraphTimeline(n, tuple(positions), tuple(snapshots), skipped=tuple(skipped))


def graph_at(t: int, timeline: GraphTimeline, split: SplitIndex | None = None) -> Adjacency:
    """Graph in force at grid position ``t``: the snapshot of the latest event
    at or before ``t``; the last training snapshot from validation onwards;
    identity before the first event."""
    if split is not None and t >= split.val_start:
        return timeline.last
    k = bisect.bisect_right(timeline.positions, t)
    return timeline.snapshots[k - 1] if k else timeline.fallback


@dataclass
class AdaptiveGraph:
    dense: Tensor  # (N, N) row-stochastic, pre-sparsification
    src: np.ndarray
    dst: np.ndarray
    weights: Tensor  # (E,) gathered from dense

    def to_adjacency(self) -> Adjacency:
        return Adjacency(self.dense.shape[0], self.src, self.dst, self.weights.data.astype(np.float64).copy(), directed=True)


def adaptive_adjacency(E1: Tensor, E2: Tensor, eps: float = 0.005) -> AdaptiveGraph:
    """Row softmax of relu(E1 E2^T), keeping entries strictly above ``eps``.

    The mask is recomputed on every call; dropped entries receive no gradient.
    """
    n = E1.shape[0]
    dense = row_softmax(relu(E1 @ E2.T))
    dst, src = np.nonzero(dense.data > eps)
    flat = Segments(dst * n + src, n * n)
    weights = gather(reshape(dense, (n * n,)), flat)
    return AdaptiveGraph(dense, src.astype(np.int64), dst.astype(np.int64), weights)


def write_edges_csv(adj: Adjacency, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst", "weight"])
        for s, d, wt in zip(adj.src.tolist(), adj.dst.tolist(), adj.weights.tolist()):
            w.writerow([s, d, format_value(wt)])


def write_timeline_csv(timeline: GraphTimeline, timestamps: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["snapshot_ts", "src", "dst", "weight"])
        for p, adj in zip(timeline.positions, timeline.snapshots):
            ts = format_ts(timestamps[p])
            for s, d, wt in zip(adj.src.tolist(), adj.dst.tolist(), adj.weights.tolist()):
                w.writerow([ts, s, d, format_value(wt)])


def read_edges_csv(path: str | Path, n: int) -> Adjacency:
    src, dst, wts = [], [], []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            src.append(int(rec["src"]))
            dst.append(int(rec["dst"]))
            wts.append(float(rec["weight"]))
    return Adjacency(n, np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64), np.array(wts))
