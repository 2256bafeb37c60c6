"""Hourly candle panel: kline parsing, pump-time alignment, grid assembly and
chronological splitting.

Timestamps are carried as int64 epoch seconds (UTC) inside arrays; the
public helpers :func:`to_datetime` / :func:`to_epoch` convert at the edges.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DuplicateTimestamp, EventOffGrid, MalformedRow, PanelTooShort

HOUR = 3600

RAW_FIELDS = (
    "open",
    "high",
    "low",
    "close",
    "volume",
    "quote_asset_volume",
    "num_trades",
    "taker_buy_base",
    "taker_buy_quote",
)
FIELD_INDEX = {name: k for k, name in enumerate(RAW_FIELDS)}

PANEL_HEADER = ("symbol", "timestamp_utc", *RAW_FIELDS, "flag")


def to_datetime(epoch_s: int) -> datetime:
    return datetime.fromtimestamp(int(epoch_s), tz=timezone.utc)


def to_epoch(ts: datetime) -> int:
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return int(ts.timestamp())


def format_ts(epoch_s: int) -> str:
    return to_datetime(epoch_s).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_ts(text: str) -> datetime:
    """Parse an ISO-8601 timestamp; naive values are taken as UTC."""
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_value(x: float) -> str:
    # repr() is the shortest round-tripping form; integral values drop the ".0"
    if math.isfinite(x) and float(x).is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))


@dataclass(frozen=True)
class Candle:
    open_time: datetime
    open: float
    high: float
    low: float
    close: float
    volume: float
    quote_asset_volume: float
    num_trades: float
    taker_buy_base: float
    taker_buy_quote: float

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, name) for name in RAW_FIELDS)


def _candle_problem(v: Sequence[float]) -> str | None:
    o, h, l, c = v[0], v[1], v[2], v[3]
    if not all(math.isfinite(x) for x in v):
        return "non-finite value"
    if l > min(o, c) or h < max(o, c):
        return "high/low inconsistent with open/close"
    if any(x < 0 for x in v[4:]):
        return "negative volume or count"
    return None


@dataclass(frozen=True)
class CandleSeries:
    """Time-sorted candles of one token, stored column-wise."""

    open_time: np.ndarray  # int64 epoch seconds, strictly increasing
    values: np.ndarray  # len × 9, columns in RAW_FIELDS order

    def __len__(self) -> int:
        return len(self.open_time)

    def __getitem__(self, k: int) -> Candle:
        return Candle(to_datetime(self.open_time[k]), *map(float, self.values[k]))

    @classmethod
    def from_candles(cls, candles: Iterable[Candle]) -> "CandleSeries":
        candles = sorted(candles, key=lambda c: c.open_time)
        times = np.array([to_epoch(c.open_time) for c in candles], dtype=np.int64)
        if len(times) > 1 and np.any(np.diff(times) == 0):
            raise DuplicateTimestamp("two candles share an open_time")
        vals = np.array([c.values() for c in candles], dtype=np.float64).reshape(-1, len(RAW_FIELDS))
        return cls(times, vals)


def parse_kline_rows(rows: Iterable[str | Sequence]) -> CandleSeries:
    """Parse exchange kline records into a sorted :class:`CandleSeries`.

    Each row is either a comma-delimited string or an already-split
    sequence with at least 11 fields in kline order (open_time_ms, open,
    high, low, close, volume, close_time_ms, quote_asset_volume, num_trades,
    taker_buy_base, taker_buy_quote, ...). Extra trailing fields are ignored.
    """
    times: list[int] = []
    vals: list[list[float]] = []
    for n, row in enumerate(rows, start=1):
        fields = row.strip().split(",") if isinstance(row, str) else list(row)
        if len(fields) < 11:
            raise MalformedRow(n, f"expected >= 11 fields, got {len(fields)}")
        try:
            open_ms = int(fields[0])
            v = [float(fields[k]) for k in (1, 2, 3, 4, 5, 7, 8, 9, 10)]
        except (TypeError, ValueError) as exc:
            raise MalformedRow(n, f"unparsable field ({exc})") from None
        if open_ms % (HOUR * 1000) != 0:
            raise MalformedRow(n, f"open_time {open_ms} is not an hour boundary")
        problem = _candle_problem(v)
        if problem:
            raise MalformedRow(n, problem)
        times.append(open_ms // 1000)
        vals.append(v)
    t = np.array(times, dtype=np.int64)
    order = np.argsort(t, kind="stable")
    t = t[order]
    if len(t) > 1 and np.any(np.diff(t) == 0):
        dup = int(t[np.flatnonzero(np.diff(t) == 0)[0]])
        raise DuplicateTimestamp(f"duplicate open_time {format_ts(dup)}")
    v_arr = np.array(vals, dtype=np.float64).reshape(-1, len(RAW_FIELDS))[order]
    return CandleSeries(t, v_arr)


def snap_pump_time(raw_time: datetime) -> datetime:
    """Round to the nearest hour; exactly :30:00 rounds up."""
    epoch = raw_time.timestamp() if raw_time.tzinfo else raw_time.replace(tzinfo=timezone.utc).timestamp()
    base = math.floor(epoch / HOUR) * HOUR
    snapped = base + HOUR if epoch - base >= HOUR / 2 else base
    return to_datetime(int(snapped))


@dataclass(frozen=True)
class PumpEvent:
    token: str
    raw_time: datetime
    snapped_time: datetime

    @classmethod
    def at(cls, token: str, raw_time: datetime) -> "PumpEvent":
        return cls(token, raw_time, snap_pump_time(raw_time))


def read_pump_schedule(path_or_text: str | Path) -> list[PumpEvent]:
    """Read a `symbol,timestamp_utc` CSV (path or literal text)."""
    text = Path(path_or_text).read_text() if isinstance(path_or_text, Path) else path_or_text
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or not {"symbol", "timestamp_utc"} <= set(reader.fieldnames):
        raise MalformedRow(1, "pump schedule header must contain symbol,timestamp_utc")
    events = []
    for n, rec in enumerate(reader, start=2):
        try:
            events.append(PumpEvent.at(rec["symbol"].strip(), parse_ts(rec["timestamp_utc"])))
        except (ValueError, AttributeError) as exc:
            raise MalformedRow(n, str(exc)) from None
    return events


@dataclass(frozen=True, eq=False)
class Panel:
    """Token × hour grid. Node index = position in ``tokens`` (sorted)."""

    tokens: tuple[str, ...]
    timestamps: np.ndarray  # (T,) int64 epoch seconds, 1h step
    values: np.ndarray  # (N, T, 9); zeros where missing
    present: np.ndarray  # (N, T) bool candle mask
    labels: np.ndarray  # (N, T) int8

    def __post_init__(self):
        for arr in (self.timestamps, self.values, self.present, self.labels):
            arr.setflags(write=False)

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)

    @property
    def n_hours(self) -> int:
        return len(self.timestamps)

    def field(self, name: str) -> np.ndarray:
        return self.values[:, :, FIELD_INDEX[name]]

    def index_of(self, ts: datetime | int) -> int:
        epoch = ts if isinstance(ts, (int, np.integer)) else to_epoch(ts)
        k = (int(epoch) - int(self.timestamps[0])) // HOUR
        if not (0 <= k < self.n_hours) or int(self.timestamps[k]) != int(epoch):
            raise KeyError(f"{format_ts(int(epoch))} not on the panel grid")
        return k

    def equals(self, other: "Panel") -> bool:
        return (
            self.tokens == other.tokens
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.present, other.present)
            and np.array_equal(self.labels, other.labels)
            and self.values.tobytes() == other.values.tobytes()
        )

    def with_values(self, values: np.ndarray) -> "Panel":
        return Panel(self.tokens, self.timestamps, np.array(values, dtype=np.float64), self.present.copy(), self.labels.copy())


def assemble_panel(series: Mapping[str, CandleSeries], events: Sequence[PumpEvent] = ()) -> Panel:
    """Align per-token candle series on the union hourly grid and attach labels.

    Raises EventOffGrid for an event whose snapped time falls outside the grid
    or whose token has no series.
    """
    if not series:
        raise ValueError("at least one token is required")
    tokens = tuple(sorted(series))
    for tok in tokens:
        if len(series[tok]) == 0:
            raise ValueError(f"token {tok} has an empty candle series")
    start = min(int(series[t].open_time[0]) for t in tokens)
    stop = max(int(series[t].open_time[-1]) for t in tokens)
    timestamps = np.arange(start, stop + HOUR, HOUR, dtype=np.int64)
    n, t_len = len(tokens), len(timestamps)
    values = np.zeros((n, t_len, len(RAW_FIELDS)))
    present = np.zeros((n, t_len), dtype=bool)
    for i, tok in enumerate(tokens):
        s = series[tok]
        pos = (s.open_time - start) // HOUR
        values[i, pos] = s.values
        present[i, pos] = True
    labels = np.zeros((n, t_len), dtype=np.int8)
    index = {tok: i for i, tok in enumerate(tokens)}
    for ev in events:
        if ev.token not in index:
            raise EventOffGrid(f"event for unknown token {ev.token!r}")
        epoch = to_epoch(ev.snapped_time)
        if not (start <= epoch <= stop):
            raise EventOffGrid(f"event {ev.token}@{format_ts(epoch)} outside grid {format_ts(start)}..{format_ts(stop)}")
        labels[index[ev.token], (epoch - start) // HOUR] = 1
    return Panel(tokens, timestamps, values, present, labels)


def write_panel_csv(panel: Panel, path: str | Path) -> None:
    """Write every grid cell; missing candles have empty value fields."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PANEL_HEADER)
        ts_text = [format_ts(t) for t in panel.timestamps]
        for i, tok in enumerate(panel.tokens):
            for k in range(panel.n_hours):
                if panel.present[i, k]:
                    vals = [format_value(x) for x in panel.values[i, k]]
                else:
                    vals = [""] * len(RAW_FIELDS)
                w.writerow([tok, ts_text[k], *vals, int(panel.labels[i, k])])


def read_panel_csv(path: str | Path) -> Panel:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != PANEL_HEADER:
            raise MalformedRow(1, f"panel header must be {','.join(PANEL_HEADER)}")
        rows = list(reader)
    cells: dict[str, list] = {}
    for n, rec in enumerate(rows, start=2):
        if len(rec) != len(PANEL_HEADER):
            raise MalformedRow(n, f"expected {len(PANEL_HEADER)} fields, got {len(rec)}")
        try:
            epoch = to_epoch(parse_ts(rec[1]))
            flag = int(rec[-1])
            vals = None if rec[2] == "" else [float(x) for x in rec[2:-1]]
        except ValueError as exc:
            raise MalformedRow(n, str(exc)) from None
        if flag not in (0, 1):
            raise MalformedRow(n, f"flag must be 0 or 1, got {flag}")
        if epoch % HOUR:
            raise MalformedRow(n, "timestamp is not an hour boundary")
        cells.setdefault(rec[0], []).append((epoch, vals, flag))
    if not cells:
        raise MalformedRow(1, "panel has no rows")
    tokens = tuple(sorted(cells))
    start = min(e for recs in cells.values() for e, _, _ in recs)
    stop = max(e for recs in cells.values() for e, _, _ in recs)
    timestamps = np.arange(start, stop + HOUR, HOUR, dtype=np.int64)
    values = np.zeros((len(tokens), len(timestamps), len(RAW_FIELDS)))
    present = np.zeros((len(tokens), len(timestamps)), dtype=bool)
    labels = np.zeros((len(tokens), len(timestamps)), dtype=np.int8)
    for i, tok in enumerate(tokens):
        for epoch, vals, flag in cells[tok]:
            k = (epoch - start) // HOUR
            if vals is not None:
                values[i, k] = vals
                present[i, k] = True
            labels[i, k] = flag
    return Panel(tokens, timestamps, values, present, labels)


@dataclass(frozen=True)
class SplitIndex:
    """Grid positions of the train/validation/test blocks after embargo."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    embargo_hours: int
    n_hours: int = field(default=0)

    @property
    def val_start(self) -> int:
        return int(self.val[0])

    def block_of(self, k: int) -> str | None:
        for name in ("train", "val", "test"):
            arr = getattr(self, name)
            if len(arr) and arr[0] <= k <= arr[-1]:
                return name
        return None


def chronological_split(
    n_hours: int | Panel, fractions: tuple[float, float, float] = (0.6, 0.2, 0.2), z: int = 5
) -> SplitIndex:
    """60/20/20 chronological blocks with the first ``z`` hours of the
    validation and test blocks discarded."""
    t_len = n_hours.n_hours if isinstance(n_hours, Panel) else int(n_hours)
    if abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions}")
    if z < 0:
        raise ValueError("embargo must be >= 0")
    if t_len <= 2 * z + 3:
        raise PanelTooShort(f"T={t_len} must exceed 2*z+3={2 * z + 3}")
    n_train = math.floor(fractions[0] * t_len + 1e-9)
    n_val = math.floor(fractions[1] * t_len + 1e-9)
    train = np.arange(0, n_train)
    val = np.arange(n_train + z, n_train + n_val)
    test = np.arange(n_train + n_val + z, t_len)
    if len(train) == 0 or len(val) == 0 or len(test) == 0:
        raise PanelTooShort(f"T={t_len} leaves an empty block after an embargo of {z}")
    return SplitIndex(train, val, test, z, t_len)
