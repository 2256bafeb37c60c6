"""Seeded synthetic hourly market with injected pump events.

Tokens are split into contiguous clusters that share a latent AR(1)
activity factor, so trade counts co-move inside a cluster. Each pump spikes
one token for 1-3 hours (label on the first hour only) and spills a weaker
spike onto its cluster partners. Optional cluster-wide shocks spike every
member of a cluster at once without a label; telling those apart from pumps
needs the neighbours' view.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigInfeasible
from .panel import FIELD_INDEX, HOUR, RAW_FIELDS, Panel, PumpEvent, format_ts, format_value, to_datetime

WARMUP = 13  # first hour with a full 12-hour rolling history
GAP = 4  # minimum spacing between two pumps on the same token
START_EPOCH = 1_640_995_200  # 2022-01-01T00:00:00Z


@dataclass(frozen=True)
class SynthConfig:
    n_tokens: int = 20
    n_hours: int = 4000
    n_pumps: int = 40
    n_clusters: int = 4
    seed: int = 0
    trade_spike_min: float = 4.0
    trade_spike_max: float = 10.0
    volume_spike_min: float = 5.0
    volume_spike_max: float = 15.0
    spillover: float = 0.3
    n_shocks: int = 40
    shock_factor: float = 4.0
    latent_phi: float = 0.9
    latent_sigma: float = 0.25
    idio_sigma: float = 0.2
    base_trades: float = 200.0
    price_drift: float = 0.0
    price_vol: float = 0.01
    start_epoch: int = START_EPOCH

    def __post_init__(self):
        if self.n_tokens < 1 or self.n_hours < 1 or self.n_clusters < 1:
            raise ValueError("n_tokens, n_hours and n_clusters must be positive")
        if self.n_clusters > self.n_tokens:
            raise ValueError("more clusters than tokens")
        if self.n_pumps < 0 or self.n_shocks < 0:
            raise ValueError("event counts must be non-negative")
        if min(self.trade_spike_min, self.volume_spike_min, self.shock_factor) <= 1:
            raise ValueError("spike multipliers must exceed 1")
        if self.trade_spike_max < self.trade_spike_min or self.volume_spike_max < self.volume_spike_min:
            raise ValueError("spike ranges must satisfy min <= max")
        if not 0 <= self.spillover < 1:
            raise ValueError("spillover must lie in [0, 1)")
        if self.start_epoch % HOUR:
            raise ValueError("start_epoch must be on an hour boundary")


@dataclass(frozen=True)
class GroundTruth:
    token: str
    hour: int
    timestamp: int
    cluster: int
    spike_factor: float
    duration: int


def cluster_of(cfg: SynthConfig) -> np.ndarray:
    return (np.arange(cfg.n_tokens) * cfg.n_clusters) // cfg.n_tokens


def token_names(n: int) -> tuple[str, ...]:
    return tuple(f"SYN{k:03d}USDT" for k in range(n))


def _ar1(rng: np.random.Generator, phi: float, sigma: float, shape: tuple[int, int]) -> np.ndarray:
    eps = rng.normal(0.0, sigma, size=shape)
    out = np.empty(shape)
    out[:, 0] = eps[:, 0] / np.sqrt(1 - phi**2)
    for t in range(1, shape[1]):
        out[:, t] = phi * out[:, t - 1] + eps[:, t]
    return out


def _pick_slots(rng: np.random.Generator, cfg: SynthConfig) -> list[tuple[int, int]]:
    """Distinct (token, hour) pairs, hour >= WARMUP, at least GAP hours apart per token."""
    last = cfg.n_hours - 1
    per_token = max(0, (last - WARMUP) // GAP + 1) if last >= WARMUP else 0
    if cfg.n_pumps > per_token * cfg.n_tokens:
        raise ConfigInfeasible(
            f"{cfg.n_pumps} pumps do not fit: {cfg.n_tokens} tokens x {per_token} slots spaced {GAP}h after hour {WARMUP}"
        )
    chosen: list[tuple[int, int]] = []
    taken: dict[int, list[int]] = {}
    while len(chosen) < cfg.n_pumps:
        i = int(rng.integers(cfg.n_tokens))
        h = int(rng.integers(WARMUP, cfg.n_hours))
        if any(abs(h - g) < GAP for g in taken.get(i, ())):
            continue
        taken.setdefault(i, []).append(h)
        chosen.append((i, h))
    return chosen


def generate(cfg: SynthConfig = SynthConfig()) -> tuple[Panel, list[GroundTruth]]:
    rng = np.random.default_rng(cfg.seed)
    n, t_len = cfg.n_tokens, cfg.n_hours
    clusters = cluster_of(cfg)

    latent = _ar1(rng, cfg.latent_phi, cfg.latent_sigma, (cfg.n_clusters, t_len))
    idio = _ar1(rng, 0.5, cfg.idio_sigma, (n, t_len))
    level = np.log(cfg.base_trades) + rng.normal(0.0, 0.5, size=(n, 1))
    log_trades = level + latent[clusters] + idio
    trade_size = np.exp(rng.normal(0.0, 0.3, size=(n, 1)) + rng.normal(0.0, 0.1, size=(n, t_len)))
    buy_frac = np.clip(rng.normal(0.5, 0.04, size=(n, t_len)), 0.05, 0.95)

    trade_mult = np.ones((n, t_len))
    vol_mult = np.ones((n, t_len))

    def spike(i, h, ft, fv, duration, buy):
        for k in range(duration):
            if h + k >= t_len:
                break
            decay = 0.5**k
            trade_mult[i, h + k] *= ft**decay
            vol_mult[i, h + k] *= fv**decay
            buy_frac[i, h + k] = max(buy_frac[i, h + k], 0.5 + (buy - 0.5) * decay)

    slots = _pick_slots(rng, cfg)
    truth: list[GroundTruth] = []
    names = token_names(n)
    labels = np.zeros((n, t_len), dtype=np.int8)
    for i, h in slots:
        ft = float(rng.uniform(cfg.trade_spike_min, cfg.trade_spike_max))
        fv = float(rng.uniform(cfg.volume_spike_min, cfg.volume_spike_max))
        duration = int(rng.integers(1, 4))
        spike(i, h, ft, fv, duration, 0.8)
        for j in np.flatnonzero(clusters == clusters[i]):
            if j != i:
                spike(j, h, 1 + cfg.spillover * (ft - 1), 1 + cfg.spillover * (fv - 1), duration, 0.5)
        labels[i, h] = 1
        truth.append(GroundTruth(names[i], h, cfg.start_epoch + h * HOUR, int(clusters[i]), ft, duration))

    for _ in range(cfg.n_shocks):
        c = int(rng.integers(cfg.n_clusters))
        h = int(rng.integers(WARMUP, t_len))
        members = np.flatnonzero(clusters == c)
        f = cfg.shock_factor * float(rng.uniform(0.8, 1.25))
        duration = int(rng.integers(1, 4))
        for j in members:
            spike(j, h, f, f * 1.2, duration, 0.6)

    trades = np.maximum(1.0, np.round(np.exp(log_trades) * trade_mult))
    volume = trades * trade_size * vol_mult / trade_mult

    log_ret = cfg.price_drift + cfg.price_vol * rng.standard_normal((n, t_len)) + 0.02 * (buy_frac - 0.5) * (vol_mult > 1)
    start_price = np.exp(rng.uniform(-3, 3, size=(n, 1)))
    close = start_price * np.exp(np.cumsum(log_ret, axis=1))
    open_ = np.concatenate([start_price, close[:, :-1]], axis=1)
    wick = np.abs(rng.normal(0.0, cfg.price_vol / 2, size=(2, n, t_len)))
    high = np.maximum(open_, close) * (1 + wick[0])
    low = np.minimum(open_, close) * (1 - wick[1])
    vwap = (open_ + close + high + low) / 4
    quote = volume * vwap

    values = np.zeros((n, t_len, len(RAW_FIELDS)))
    for name, arr in (
        ("open", open_),
        ("high", high),
        ("low", low),
        ("close", close),
        ("volume", volume),
        ("quote_asset_volume", quote),
        ("num_trades", trades),
        ("taker_buy_base", volume * buy_frac),
        ("taker_buy_quote", quote * buy_frac),
    ):
        values[:, :, FIELD_INDEX[name]] = arr
    timestamps = cfg.start_epoch + HOUR * np.arange(t_len, dtype=np.int64)
    panel = Panel(names, timestamps, values, np.ones((n, t_len), dtype=bool), labels)
    truth.sort(key=lambda g: (g.hour, g.token))
    return panel, truth


def events_of(truth: list[GroundTruth]) -> list[PumpEvent]:
    return [PumpEvent.at(g.token, to_datetime(g.timestamp)) for g in truth]


def write_ground_truth_csv(truth: list[GroundTruth], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["symbol", "timestamp_utc", "cluster", "spike_factor"])
        for g in truth:
            w.writerow([g.token, format_ts(g.timestamp), g.cluster, format_value(g.spike_factor)])
