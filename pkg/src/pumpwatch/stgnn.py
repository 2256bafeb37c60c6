"""Spatio-temporal GNN: per-hour graph attention, learnable positions, a
temporal Transformer encoder and a sigmoid head (one probability per node).

Batches are processed as one disjoint-union graph: slot ``s = b*W + u``
(anchor b, window step u) owns node ids ``s*N .. s*N + N-1``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BadEdgeIndex, ConfigError, ShapeMismatch
from .features import WindowTensor
from .graphcraft import Adjacency, adaptive_adjacency
from .numcore import (
    ParamStore,
    Segments,
    Tensor,
    dropout,
    gather,
    layer_norm,
    no_grad,
    relu,
    reshape,
    row_softmax,
    segment_softmax,
    segment_sum,
    sigmoid,
    transpose,
)

STRATEGIES = ("G1", "G2", "G3", "identity")


@dataclass(frozen=True)
class ModelConfig:
    strategy: str = "G1"
    F: int = 18
    D: int = 64
    H: int = 2
    W: int = 5
    dropout: float = 0.3
    temporal_layers: int = 1
    ff_mult: int = 4
    n_nodes: int = 0  # required for G3
    d_embed: int = 48
    epsilon: float = 0.005
    dtype: str = "float64"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if min(self.F, self.D, self.H, self.W, self.temporal_layers, self.ff_mult, self.d_embed) < 1:
            raise ConfigError("all model dimensions must be >= 1")
        if self.D % self.H:
            raise ConfigError(f"D={self.D} must be divisible by H={self.H}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.strategy == "G3" and self.n_nodes < 1:
            raise ConfigError("G3 needs n_nodes")

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in types:
                raise ConfigError(f"unknown model key {key!r}; valid keys: {', '.join(types)}")
            caster = {"int": int, "float": float}.get(types[key], str)
            kw[key] = caster(value.strip())
        return cls(**kw)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng(seed)
    D, H = cfg.D, cfg.H
    ps = ParamStore()

    def linear(name, fan_in, fan_out, bias=True):
        ps.add(f"{name}.W", _glorot(rng, fan_in, fan_out))
        if bias:
            ps.add(f"{name}.b", np.zeros(fan_out))

    linear("in", cfg.F, D)
    for layer in ("conv1", "conv2"):
        for proj in ("query", "key", "value", "root"):
            linear(f"{layer}.{proj}", D, H * D)
        linear(f"{layer}.edge", 1, H * D, bias=False)
        linear(f"{layer}.merge", H * D, D)
    ps.add("pos", rng.normal(0.0, 0.02, size=(cfg.W, D)))
    for k in range(cfg.temporal_layers):
        p = f"te{k}"
        ps.add(f"{p}.ln1.g", np.ones(D))
        ps.add(f"{p}.ln1.b", np.zeros(D))
        linear(f"{p}.attn.in", D, 3 * D)
        linear(f"{p}.attn.out", D, D)
        ps.add(f"{p}.ln2.g", np.ones(D))
        ps.add(f"{p}.ln2.b", np.zeros(D))
        linear(f"{p}.ff1", D, cfg.ff_mult * D)
        linear(f"{p}.ff2", cfg.ff_mult * D, D)
    ps.add("te.lnf.g", np.ones(D))
    ps.add("te.lnf.b", np.zeros(D))
    linear("head", D, 1)
    if cfg.strategy == "G3":
        scale = cfg.d_embed ** -0.25
        ps.add("E1", rng.normal(0.0, scale, size=(cfg.n_nodes, cfg.d_embed)))
        ps.add("E2", rng.normal(0.0, scale, size=(cfg.n_nodes, cfg.d_embed)))
    ps.astype(np.dtype(cfg.dtype))
    return ps


@dataclass
class EdgeBatch:
    """Edges of a disjoint-union graph over ``n_nodes`` nodes."""

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    weights: Tensor | np.ndarray  # (E,)

    def __post_init__(self):
        if len(self.src) != len(self.dst) or len(self.src) != self.weights.shape[0]:
            raise BadEdgeIndex("edge endpoints and weights are misaligned")
        if len(self.src) and (min(self.src.min(), self.dst.min()) < 0 or max(self.src.max(), self.dst.max()) >= self.n_nodes):
            raise BadEdgeIndex(f"edge endpoint outside [0, {self.n_nodes})")
        self.src_seg = Segments(self.src, self.n_nodes)
        self.dst_seg = Segments(self.dst, self.n_nodes)

    @property
    def n_edges(self) -> int:
        return len(self.src)


def union_edges(graphs: Sequence[Adjacency], n: int, dtype) -> EdgeBatch:
    srcs, dsts, wts = [], [], []
    for s, adj in enumerate(graphs):
        if adj.n != n:
            raise BadEdgeIndex(f"graph has {adj.n} nodes, expected {n}")
        if adj.n_edges:
            srcs.append(adj.src + s * n)
            dsts.append(adj.dst + s * n)
            wts.append(adj.weights)
    if not srcs:
        empty = np.array([], dtype=np.int64)
        return EdgeBatch(n * len(graphs), empty, empty, np.zeros(0, dtype=dtype))
    return EdgeBatch(n * len(graphs), np.concatenate(srcs), np.concatenate(dsts), np.concatenate(wts).astype(dtype))


def graph_attn_forward(h: Tensor, edges: EdgeBatch, params: ParamStore, prefix: str, heads: int) -> Tensor:
    """Multi-head attentive message passing with scalar edge weights.

    For edge j -> i and head k: logit = <q_i, k_j + e_ij> / sqrt(C) with
    e_ij = a_ij * W_edge; alpha is a softmax over i's incoming edges and
    out_i = W_root h_i + sum_j alpha (v_j + e_ij). Heads are concatenated
    and merged back to D. Nodes without incoming edges keep the root term.
    """
    P = lambda name: params[f"{prefix}.{name}"]  # noqa: E731
    hc = P("root.W").shape[1]
    c = hc // heads
    out = h @ P("root.W") + P("root.b")
    if edges.n_edges:
        q = h @ P("query.W") + P("query.b")
        k = h @ P("key.W") + P("key.b")
        v = h @ P("value.W") + P("value.b")
        w = edges.weights if isinstance(edges.weights, Tensor) else Tensor(edges.weights)
        e = reshape(w, (edges.n_edges, 1)) @ P("edge.W")
        k_j = gather(k, edges.src_seg) + e
        v_j = gather(v, edges.src_seg) + e
        q_i = gather(q, edges.dst_seg)
        logits = reshape(q_i * k_j, (edges.n_edges, heads, c)).sum(axis=-1) * (1.0 / math.sqrt(c))
        alpha = segment_softmax(logits, edges.dst_seg)
        msg = reshape(reshape(v_j, (edges.n_edges, heads, c)) * reshape(alpha, (edges.n_edges, heads, 1)), (edges.n_edges, hc))
        out = out + segment_sum(msg, edges.dst_seg)
    return out @ P("merge.W") + P("merge.b")


class STGNN:
    def __init__(self, cfg: ModelConfig, seed: int = 0, params: ParamStore | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        self.dtype = np.dtype(cfg.dtype)
        self._union_cache: dict = {}

    def param_count(self) -> int:
        return self.params.count()

    # graph plumbing -----------------------------------------------------

    def _edges(self, graphs, B: int, N: int) -> EdgeBatch:
        W = self.cfg.W
        slots = B * W
        if self.cfg.strategy == "identity" or graphs is None:
            return union_edges([Adjacency.identity_graph(N)] * slots, N, self.dtype)
        if self.cfg.strategy == "G3":
            ag = adaptive_adjacency(self.params["E1"], self.params["E2"], self.cfg.epsilon)
            e0 = len(ag.src)
            offs = np.repeat(np.arange(slots) * N, e0)
            tile = Segments(np.tile(np.arange(e0), slots), e0)
            w = gather(ag.weights, tile) if e0 else Tensor(np.zeros(0, dtype=self.dtype))
            return EdgeBatch(slots * N, np.tile(ag.src, slots) + offs, np.tile(ag.dst, slots) + offs, w)
        if isinstance(graphs, Adjacency):
            key = (id(graphs), slots)
            hit = self._union_cache.get(key)
            if hit is None or hit[0] is not graphs:
                hit = (graphs, union_edges([graphs] * slots, N, self.dtype))
                self._union_cache = {key: hit}
            return hit[1]
        flat = [g for per_anchor in graphs for g in per_anchor]
        if len(flat) != slots:
            raise BadEdgeIndex(f"expected {slots} per-step graphs, got {len(flat)}")
        return union_edges(flat, N, self.dtype)

    # stages -------------------------------------------------------------

    def spatial_encode(self, X: np.ndarray, graphs, training: bool = False, rng=None) -> Tensor:
        """(B, N, W, F) -> (B, N, W, D)."""
        B, N, W, F = X.shape
        cfg = self.cfg
        if W != cfg.W or F != cfg.F:
            raise ShapeMismatch(f"window shape (W={W}, F={F}) does not match config (W={cfg.W}, F={cfg.F})")
        edges = self._edges(graphs, B, N)
        x = Tensor(np.ascontiguousarray(np.transpose(X, (0, 2, 1, 3)).reshape(B * W * N, F), dtype=self.dtype))
        h = x @ self.params["in.W"] + self.params["in.b"]
        h = relu(graph_attn_forward(h, edges, self.params, "conv1", cfg.H))
        h = dropout(h, cfg.dropout, rng, training)
        h = relu(graph_attn_forward(h, edges, self.params, "conv2", cfg.H))
        return transpose(reshape(h, (B, W, N, cfg.D)), (0, 2, 1, 3))

    def temporal_encode(self, S: Tensor, training: bool = False, rng=None, trace: dict | None = None) -> Tensor:
        """Pre-norm Transformer encoder over the window axis; (M, W, D) -> (M, W, D)."""
        cfg = self.cfg
        M, W, D = S.shape
        H, dh = cfg.H, D // cfg.H
        P = self.params
        x = S + P["pos"]
        for k in range(cfg.temporal_layers):
            p = f"te{k}"
            y = layer_norm(x, P[f"{p}.ln1.g"], P[f"{p}.ln1.b"])
            qkv = y @ P[f"{p}.attn.in.W"] + P[f"{p}.attn.in.b"]

            def heads(t):
                return transpose(reshape(t, (M, W, H, dh)), (0, 2, 1, 3))

            q, kk, v = heads(qkv[..., :D]), heads(qkv[..., D : 2 * D]), heads(qkv[..., 2 * D :])
            att = row_softmax((q @ transpose(kk, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh)))
            if trace is not None:
                trace.setdefault("attention", []).append(att.data)
            ctx = reshape(transpose(att @ v, (0, 2, 1, 3)), (M, W, D))
            x = x + dropout(ctx @ P[f"{p}.attn.out.W"] + P[f"{p}.attn.out.b"], cfg.dropout, rng, training)
            y = layer_norm(x, P[f"{p}.ln2.g"], P[f"{p}.ln2.b"])
            f = relu(y @ P[f"{p}.ff1.W"] + P[f"{p}.ff1.b"]) @ P[f"{p}.ff2.W"] + P[f"{p}.ff2.b"]
            x = x + dropout(f, cfg.dropout, rng, training)
        return layer_norm(x, P["te.lnf.g"], P["te.lnf.b"])

    def logits(self, X: np.ndarray, graphs=None, training: bool = False, rng=None, trace: dict | None = None) -> Tensor:
        """Pre-sigmoid scores (B, N) for a batch of windows (B, N, W, F)."""
        B, N, W, _ = X.shape
        S = self.spatial_encode(X, graphs, training, rng)
        enc = self.temporal_encode(reshape(S, (B * N, W, self.cfg.D)), training, rng, trace)
        z = enc[:, W - 1, :]
        return reshape(z @ self.params["head.W"] + self.params["head.b"], (B, N))

    def predict_proba(self, X: np.ndarray, graphs=None) -> np.ndarray:
        with no_grad():
            return sigmoid(self.logits(X, graphs)).data

    def forward(self, window: WindowTensor, graphs=None) -> np.ndarray:
        """Event probabilities for one anchor window, shape (N,)."""
        return self.predict_proba(window.values[None], _one_anchor(graphs))[0]

    def save_config(self, path: str | Path) -> None:
        Path(path).write_text(self.cfg.to_text())


def _one_anchor(graphs):
    if graphs is None or isinstance(graphs, Adjacency):
        return graphs
    return [list(graphs)]


def classify(probs: np.ndarray, gamma: float) -> np.ndarray:
    """1 where p >= gamma."""
    if not 0 < gamma < 1:
        raise ValueError(f"gamma must be in (0, 1), got {gamma}")
    return (np.asarray(probs) >= gamma).astype(np.int8)
