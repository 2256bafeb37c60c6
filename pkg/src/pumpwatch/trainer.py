"""Training loop, validation threshold selection and the multi-seed protocol."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as cfgio
from .errors import NoPositivesInTrain, PumpwatchError
from .features import FeaturePanel, ScalingStats, build_feature_matrix, standardize, window_batch
from .graphcraft import Adjacency, GraphTimeline, build_dynamic_timeline, build_static_graph, graph_at
from .metrics import confusion, pr_curve, prf1
from .numcore import Adam, Tensor, bce_with_logits, no_grad, sigmoid
from .panel import Panel, SplitIndex, chronological_split
from .stgnn import STGNN, ModelConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    # graph
    strategy: str = "G1"
    signal: str = "num_trades"
    rho: float = 0.90
    tau_min: float = 0.15
    L: int = 12
    d_embed: int = 48
    epsilon: float = 0.005
    # model
    D: int = 64
    H: int = 2
    W: int = 5
    dropout: float = 0.3
    temporal_layers: int = 1
    dtype: str = "float32"
    # protocol
    embargo: int = 5
    train_frac: float = 0.6
    val_frac: float = 0.2
    # optimisation
    lr: float = 1e-3
    max_epochs: int = 100
    patience: int = 10
    batch_anchors: int = 32
    eval_batch: int = 256
    pos_weight_cap: float = 200.0
    neg_keep: float = 1.0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4, 5, 6, 7, 8)
    min_events: int = 5

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if not 0 < self.neg_keep <= 1:
            raise ValueError("neg_keep must be in (0, 1]")

    def model_config(self, n_nodes: int, n_features: int) -> ModelConfig:
        return ModelConfig(
            strategy=self.strategy,
            F=n_features,
            D=self.D,
            H=self.H,
            W=self.W,
            dropout=self.dropout,
            temporal_layers=self.temporal_layers,
            n_nodes=n_nodes,
            d_embed=self.d_embed,
            epsilon=self.epsilon,
            dtype=self.dtype,
        )


def bce_loss(logits: Tensor, y: np.ndarray, mask: np.ndarray, pos_weight: float = 1.0) -> Tensor:
    """Weighted binary cross-entropy on pre-sigmoid scores, averaged over valid cells."""
    return bce_with_logits(logits, y, mask, pos_weight)


@dataclass
class Prepared:
    """Everything fixed before the first seed: features, scaling, split and graphs."""

    panel: Panel
    features: FeaturePanel  # standardised
    scaling: ScalingStats
    split: SplitIndex
    static: Adjacency | None = None
    timeline: GraphTimeline | None = None
    anchors: dict[str, np.ndarray] = field(default_factory=dict)

    def graphs_for(self, strategy: str, anchors: Sequence[int], W: int):
        if strategy == "G1":
            return self.static
        if strategy == "G2":
            return [[graph_at(int(t) - W + 1 + u, self.timeline, self.split) for u in range(W)] for t in anchors]
        return None

    def batch(self, anchors: np.ndarray, W: int):
        X = window_batch(self.features, anchors, W)
        y = self.panel.labels[:, anchors].T.astype(np.float64)
        m = self.features.mask[:, anchors].T
        return X, y, m


def _block_anchors(block: np.ndarray, W: int, mask: np.ndarray) -> np.ndarray:
    anchors = block[W - 1 :]
    return anchors[mask[:, anchors].any(axis=0)]


def split_for(panel: Panel, cfg: TrainConfig) -> SplitIndex:
    return chronological_split(panel, (cfg.train_frac, cfg.val_frac, 1 - cfg.train_frac - cfg.val_frac), cfg.embargo)


def prepare(panel: Panel, cfg: TrainConfig) -> Prepared:
    split = split_for(panel, cfg)
    raw = build_feature_matrix(panel)
    fp, stats = standardize(raw, split.train)
    prep = Prepared(panel, fp, stats, split)
    if cfg.strategy == "G1":
        prep.static = build_static_graph(panel, cfg.signal, split.train, cfg.rho, cfg.tau_min)
    elif cfg.strategy == "G2":
        prep.timeline = build_dynamic_timeline(panel, cfg.signal, split.train, cfg.L, cfg.rho, cfg.tau_min)
    prep.anchors = {name: _block_anchors(getattr(split, name), cfg.W, fp.mask) for name in ("train", "val", "test")}
    return prep


def select_threshold(probs: np.ndarray, labels: np.ndarray) -> float:
    """F1-maximising cut among the midpoints of sorted distinct scores and 0.5;
    ties go to the larger threshold."""
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0:
        log.warning("no positives in validation; using gamma=0.5")
        return 0.5
    u = np.unique(p)
    cands = np.unique(np.r_[(u[1:] + u[:-1]) / 2.0, 0.5])
    cands = cands[(cands > 0) & (cands < 1)]
    pos = np.sort(p[y])
    neg = np.sort(p[~y])
    tp = len(pos) - np.searchsorted(pos, cands, side="left")
    fp = len(neg) - np.searchsorted(neg, cands, side="left")
    f1 = 2 * tp / np.maximum(2 * tp + fp + (n_pos - tp), 1)
    best = np.flatnonzero(f1 == f1.max())[-1]
    return float(cands[best])


@dataclass
class FitResult:
    state: dict[str, np.ndarray]
    gamma: float
    history: list[tuple[int, float, float, float]]
    seed: int
    best_epoch: int
    pos_weight: float
    model_config: ModelConfig

    def model(self) -> STGNN:
        m = STGNN(self.model_config, seed=self.seed)
        m.params.load_state(self.state)
        return m


def predict(model: STGNN, prep: Prepared, anchors: np.ndarray, batch: int = 256) -> np.ndarray:
    """Probabilities (len(anchors), N)."""
    out = []
    W = model.cfg.W
    for k in range(0, len(anchors), batch):
        a = anchors[k : k + batch]
        X, _, _ = prep.batch(a, W)
        out.append(model.predict_proba(X, prep.graphs_for(model.cfg.strategy, a, W)))
    return np.concatenate(out, axis=0) if out else np.zeros((0, prep.panel.n_tokens))


def _eval_loss(model: STGNN, prep: Prepared, anchors: np.ndarray, pos_weight: float, batch: int) -> tuple[float, np.ndarray]:
    W = model.cfg.W
    total, count, probs = 0.0, 0.0, []
    with no_grad():
        for k in range(0, len(anchors), batch):
            a = anchors[k : k + batch]
            X, y, m = prep.batch(a, W)
            logits = model.logits(X, prep.graphs_for(model.cfg.strategy, a, W))
            n = m.sum()
            if n:
                total += bce_loss(logits, y, m, pos_weight).item() * n
                count += n
            probs.append(sigmoid(logits).data)
    return total / max(count, 1.0), np.concatenate(probs, axis=0)


def fit(panel: Panel | None, cfg: TrainConfig, seed: int = 0, prep: Prepared | None = None) -> FitResult:
    """Train one model with early stopping on validation loss, restore the best
    epoch and pick the decision threshold on validation."""
    prep = prep or prepare(panel, cfg)
    train_a, val_a = prep.anchors["train"], prep.anchors["val"]
    y_tr = prep.panel.labels[:, train_a]
    m_tr = prep.features.mask[:, train_a]
    n_pos = int(y_tr[m_tr].sum())
    if n_pos == 0:
        raise NoPositivesInTrain("training block has no labelled pump hours")
    n_neg = int(m_tr.sum()) - n_pos
    pos_weight = float(min(n_neg / n_pos, cfg.pos_weight_cap))
    has_pos = y_tr.any(axis=0) & m_tr.any(axis=0)

    mcfg = cfg.model_config(prep.panel.n_tokens, prep.features.n_features)
    model = STGNN(mcfg, seed=seed)
    opt = Adam(model.params, lr=cfg.lr)
    rng = np.random.default_rng(seed)
    W = cfg.W

    history: list[tuple[int, float, float, float]] = []
    best_loss, best_state, best_epoch, bad = math.inf, model.params.state(), 0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        keep = has_pos | (rng.random(len(train_a)) < cfg.neg_keep)
        order = rng.permutation(train_a[keep])
        losses, weights = [], []
        for k in range(0, len(order), cfg.batch_anchors):
            a = order[k : k + cfg.batch_anchors]
            X, y, m = prep.batch(a, W)
            if not m.any():
                continue
            model.params.zero_grad()
            loss = bce_loss(model.logits(X, prep.graphs_for(cfg.strategy, a, W), training=True, rng=rng), y, m, pos_weight)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            weights.append(m.sum())
        train_loss = float(np.average(losses, weights=weights))
        val_loss, val_probs = _eval_loss(model, prep, val_a, pos_weight, cfg.eval_batch)
        y_val, m_val = prep.panel.labels[:, val_a].T, prep.features.mask[:, val_a].T
        gamma = select_threshold(val_probs[m_val], y_val[m_val])
        val_f1 = prf1(confusion(val_probs >= gamma, y_val, m_val))[2]
        history.append((epoch, train_loss, val_loss, val_f1))
        log.info("seed %d epoch %d train %.5f val %.5f f1 %.3f", seed, epoch, train_loss, val_loss, val_f1)
        if val_loss < best_loss:
            best_loss, best_state, best_epoch, bad = val_loss, model.params.state(), epoch, 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break

    model.params.load_state(best_state)
    _, val_probs = _eval_loss(model, prep, val_a, pos_weight, cfg.eval_batch)
    m_val = prep.features.mask[:, val_a].T
    gamma = select_threshold(val_probs[m_val], prep.panel.labels[:, val_a].T[m_val])
    return FitResult(best_state, gamma, history, seed, best_epoch, pos_weight, mcfg)


@dataclass
class TestEvaluation:
    __test__ = False  # not a pytest class

    seed: int
    gamma: float
    probs: np.ndarray  # (len(test anchors), N)
    labels: np.ndarray
    mask: np.ndarray
    anchors: np.ndarray
    metrics: dict[str, float]


class TestGate:
    """Counts test-block evaluations per seed."""

    __test__ = False

    def __init__(self):
        self.touches: dict[int, int] = {}

    def evaluate(self, result: FitResult, prep: Prepared, batch: int = 256) -> TestEvaluation:
        self.touches[result.seed] = self.touches.get(result.seed, 0) + 1
        return evaluate_block(result, prep, "test", batch)


def evaluate_block(result: FitResult, prep: Prepared, block: str, batch: int = 256) -> TestEvaluation:
    anchors = prep.anchors[block]
    probs = predict(result.model(), prep, anchors, batch)
    labels = prep.panel.labels[:, anchors].T
    mask = prep.features.mask[:, anchors].T
    p, r, f1 = prf1(confusion(probs >= result.gamma, labels, mask))
    try:
        auc = pr_curve(probs, labels, mask).auc
    except PumpwatchError:
        auc = float("nan")
    return TestEvaluation(result.seed, result.gamma, probs, labels, mask, anchors, {"precision": p, "recall": r, "f1": f1, "pr_auc": auc})


METRICS = ("precision", "recall", "f1", "pr_auc")


@dataclass
class ProtocolReport:
    seeds: list[int]
    per_seed: dict[int, dict[str, float]]
    gammas: dict[int, float]
    failed: dict[int, str]
    evaluations: dict[int, TestEvaluation] = field(default_factory=dict)
    fits: dict[int, FitResult] = field(default_factory=dict)

    def aggregate(self) -> dict[str, tuple[float, float]]:
        out = {}
        ok = [s for s in self.seeds if s in self.per_seed]
        for m in METRICS:
            vals = np.array([self.per_seed[s][m] for s in ok], dtype=np.float64)
            if len(vals) == 0:
                out[m] = (float("nan"), float("nan"))
                continue
            std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            out[m] = (float(np.mean(vals)), std)
        return out

    def write_csv(self, path: str | Path) -> None:
        ok = [s for s in self.seeds if s in self.per_seed]
        agg = self.aggregate()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "mean", "std", *(f"seed_{s}" for s in ok)])
            for m in METRICS:
                mean, std = agg[m]
                w.writerow([m, repr(mean), repr(std), *(repr(float(self.per_seed[s][m])) for s in ok)])
            w.writerow(["gamma", "", "", *(repr(self.gammas[s]) for s in ok)])


def run_protocol(panel: Panel, cfg: TrainConfig, seeds: Sequence[int] | None = None, gate: TestGate | None = None) -> ProtocolReport:
    """Fit once per seed, freeze that seed's threshold, then touch the test
    block exactly once."""
    seeds = list(cfg.seeds if seeds is None else seeds)
    gate = gate or TestGate()
    prep = prepare(panel, cfg)
    report = ProtocolReport(seeds, {}, {}, {})
    for seed in seeds:
        try:
            result = fit(None, cfg, seed, prep)
        except PumpwatchError as exc:
            log.error("seed %d failed: %s", seed, exc)
            report.failed[seed] = str(exc)
            continue
        ev = gate.evaluate(result, prep, cfg.eval_batch)
        report.per_seed[seed] = ev.metrics
        report.gammas[seed] = result.gamma
        report.evaluations[seed] = ev
        report.fits[seed] = result
    return report


def write_history_csv(history, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_f1"])
        for epoch, tl, vl, f1 in history:
            w.writerow([epoch, repr(float(tl)), repr(float(vl)), repr(float(f1))])


def load_train_config(path=None, overrides=None) -> TrainConfig:
    return cfgio.load(TrainConfig, path, overrides)
