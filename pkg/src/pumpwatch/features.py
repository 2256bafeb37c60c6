"""Per-(token, hour) feature vectors and lookback windows.

Undefined cells are carried as NaN while features are computed and replaced
by zeros at the end; ``FeaturePanel.mask`` records which observations are
usable (candle present and every 12-hour rolling window complete).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InsufficientHistory, WindowTooLarge
from .panel import FIELD_INDEX, RAW_FIELDS, Panel, format_ts, format_value

ROLL_WINDOW = 12
PCT_EPS = 1e-12
STD_FLOOR = 1e-8

ENGINEERED = (
    "std_rush_order",
    "avg_rush_order",
    "std_trades",
    "std_volume",
    "std_price",
    "avg_volume",
    "avg_price",
    "avg_price_max",
)
FEATURE_NAMES = (*RAW_FIELDS, *ENGINEERED, "hour_of_the_day")


def rolling_stat(series: np.ndarray, w: int, kind: str = "mean") -> np.ndarray:
    """Trailing rolling mean/std over ``series[t-w+1..t]``.

    The first ``w-1`` entries are NaN, as is any window containing a NaN.
    ``std`` uses the sample (w-1) denominator.
    """
    x = np.asarray(series, dtype=np.float64)
    if w < 1 or (kind == "std" and w < 2):
        raise ValueError(f"invalid window {w} for {kind}")
    if w > x.shape[-1]:
        raise WindowTooLarge(f"window {w} exceeds series length {x.shape[-1]}")
    windows = sliding_window_view(x, w, axis=-1)
    if kind == "mean":
        stat = windows.mean(axis=-1)
    elif kind == "std":
        # shifting by the window's first element keeps constant windows exactly 0
        stat = (windows - windows[..., :1]).std(axis=-1, ddof=1)
    else:
        raise ValueError(f"unknown rolling statistic {kind!r}")
    out = np.full(x.shape, np.nan)
    out[..., w - 1 :] = stat
    return out


def pct_change(series: np.ndarray) -> np.ndarray:
    """(s[t] - s[t-1]) / s[t-1]; NaN at t=0 and where |s[t-1]| <= 1e-12."""
    x = np.asarray(series, dtype=np.float64)
    out = np.full(x.shape, np.nan)
    prev, cur = x[..., :-1], x[..., 1:]
    ok = np.abs(prev) > PCT_EPS
    with np.errstate(invalid="ignore", divide="ignore"):
        out[..., 1:] = np.where(ok, (cur - prev) / np.where(ok, prev, 1.0), np.nan)
    return out


def buy_pressure(taker_buy_quote: np.ndarray, quote_asset_volume: np.ndarray) -> np.ndarray:
    """Share of quote volume bought by takers; NaN where quote volume is 0."""
    tbq = np.asarray(taker_buy_quote, dtype=np.float64)
    qav = np.asarray(quote_asset_volume, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(qav > 0, tbq / np.where(qav > 0, qav, 1.0), np.nan)


@dataclass(frozen=True, eq=False)
class FeaturePanel:
    feature_names: tuple[str, ...]
    values: np.ndarray  # (N, T, F), zeros in undefined cells
    mask: np.ndarray  # (N, T) bool
    tokens: tuple[str, ...]
    timestamps: np.ndarray

    @property
    def n_features(self) -> int:
        return len(self.feature_names)


def build_feature_matrix(panel: Panel, w: int = ROLL_WINDOW) -> FeaturePanel:
    raw = np.where(panel.present[..., None], panel.values, np.nan)

    def col(name):
        return raw[..., FIELD_INDEX[name]]

    bp = buy_pressure(col("taker_buy_quote"), col("quote_asset_volume"))
    eng = {
        "std_rush_order": pct_change(rolling_stat(bp, w, "std")),
        "avg_rush_order": pct_change(rolling_stat(bp, w, "mean")),
        "std_trades": pct_change(rolling_stat(col("num_trades"), w, "std")),
        "std_volume": pct_change(rolling_stat(col("volume"), w, "std")),
        "std_price": pct_change(rolling_stat(col("close"), w, "std")),
        "avg_volume": pct_change(rolling_stat(col("volume"), w, "mean")),
        "avg_price": pct_change(rolling_stat(col("close"), w, "mean")),
        "avg_price_max": pct_change(rolling_stat(col("high"), w, "mean")),
    }
    hours = ((panel.timestamps // 3600) % 24).astype(np.float64)
    hour = np.broadcast_to(hours, panel.present.shape)
    stacked = np.concatenate([raw, np.stack([eng[k] for k in ENGINEERED], axis=-1), hour[..., None]], axis=-1)

    # an observation needs its candle and the w+1 candles feeding pct_change of a w-window stat
    present = panel.present.astype(np.float64)
    complete = rolling_stat(present, w + 1, "mean") if panel.n_hours > w else np.full(present.shape, np.nan)
    mask = panel.present & (complete == 1.0)
    values = np.where(np.isfinite(stacked) & mask[..., None], stacked, 0.0)
    values.setflags(write=False)
    mask.setflags(write=False)
    return FeaturePanel(FEATURE_NAMES, values, mask, panel.tokens, panel.timestamps)


@dataclass(frozen=True)
class ScalingStats:
    mean: np.ndarray
    std: np.ndarray
    scaled: np.ndarray  # bool per feature; False where std < 1e-8


def fit_scaling(fp: FeaturePanel, train_idx: Sequence[int]) -> ScalingStats:
    idx = np.asarray(train_idx)
    sel = fp.mask[:, idx]
    cells = fp.values[:, idx][sel]
    if len(cells) == 0:
        raise ValueError("no valid training cells to fit scaling statistics")
    mean = cells.mean(axis=0)
    std = cells.std(axis=0)
    scaled = std >= STD_FLOOR
    return ScalingStats(mean, np.where(scaled, std, 1.0), scaled)


def standardize(fp: FeaturePanel, train_idx: Sequence[int] | None = None, stats: ScalingStats | None = None):
    """Z-score every feature with statistics from the training positions only.

    Returns ``(scaled FeaturePanel, ScalingStats)``. Constant features are
    centred but not divided. Masked cells stay at zero.
    """
    if stats is None:
        if train_idx is None:
            raise ValueError("need train_idx or precomputed stats")
        stats = fit_scaling(fp, train_idx)
    out = np.where(fp.mask[..., None], (fp.values - stats.mean) / stats.std, 0.0)
    out.setflags(write=False)
    return FeaturePanel(fp.feature_names, out, fp.mask, fp.tokens, fp.timestamps), stats


@dataclass(frozen=True)
class WindowTensor:
    values: np.ndarray  # (N, W, F)
    anchor: int  # grid position of the last slot
    valid_nodes: np.ndarray  # (N,) bool, False for fully-masked rows


def make_window(fp: FeaturePanel, t: int, W: int) -> WindowTensor:
    """Slice ``values[:, t-W+1 .. t, :]``; slot W-1 is the anchor hour."""
    if W < 1:
        raise ValueError("window length must be >= 1")
    if t - W + 1 < 0 or t >= fp.values.shape[1]:
        raise InsufficientHistory(f"anchor {t} needs {W - 1} predecessors")
    sl = slice(t - W + 1, t + 1)
    return WindowTensor(fp.values[:, sl, :].copy(), t, fp.mask[:, sl].any(axis=1))


def window_batch(fp: FeaturePanel, anchors: Sequence[int], W: int) -> np.ndarray:
    """Stack windows for several anchors: (B, N, W, F)."""
    anchors = np.asarray(anchors)
    if len(anchors) and anchors.min() - W + 1 < 0:
        raise InsufficientHistory(f"anchor {anchors.min()} needs {W - 1} predecessors")
    pos = anchors[:, None] + np.arange(-W + 1, 1)[None, :]  # (B, W)
    return np.transpose(fp.values[:, pos, :], (1, 0, 2, 3))


def write_feature_csv(fp: FeaturePanel, labels: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["symbol", "timestamp_utc", *fp.feature_names, "flag", "valid"])
        ts = [format_ts(t) for t in fp.timestamps]
        for i, tok in enumerate(fp.tokens):
            for k in range(len(ts)):
                w.writerow(
                    [tok, ts[k], *(format_value(x) for x in fp.values[i, k]), int(labels[i, k]), int(fp.mask[i, k])]
                )
