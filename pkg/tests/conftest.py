import numpy as np
import pytest
from hypothesis import settings

from pumpwatch.panel import FIELD_INDEX, HOUR, RAW_FIELDS, Panel

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

T0 = 1_609_459_200  # 2021-01-01T00:00:00Z


def random_panel(rng, n=4, t_len=60, labels=None, present=None, start=T0):
    """Panel of valid random candles; every field strictly positive."""
    close = np.exp(np.cumsum(rng.normal(0, 0.02, (n, t_len)), axis=1))
    open_ = np.concatenate([np.ones((n, 1)), close[:, :-1]], axis=1)
    high = np.maximum(open_, close) * (1 + rng.uniform(0, 0.01, (n, t_len)))
    low = np.minimum(open_, close) * (1 - rng.uniform(0, 0.01, (n, t_len)))
    trades = rng.integers(10, 500, (n, t_len)).astype(float)
    volume = trades * rng.uniform(0.5, 2, (n, t_len))
    quote = volume * close
    frac = rng.uniform(0.2, 0.8, (n, t_len))
    vals = np.stack([open_, high, low, close, volume, quote, trades, volume * frac, quote * frac], axis=-1)
    assert vals.shape[-1] == len(RAW_FIELDS)
    pres = np.ones((n, t_len), bool) if present is None else np.asarray(present, bool)
    vals = np.where(pres[..., None], vals, 0.0)
    lab = np.zeros((n, t_len), np.int8) if labels is None else np.asarray(labels, np.int8)
    tokens = tuple(f"TK{i:02d}" for i in range(n))
    ts = start + HOUR * np.arange(t_len, dtype=np.int64)
    return Panel(tokens, ts, vals, pres, lab)


def six_token_panel():
    """Six tokens, 100 hours; tokens 0-2 share a trade-count driver."""
    rng = np.random.default_rng(42)
    n, T = 6, 100
    labels = np.zeros((n, T), np.int8)
    labels[0, 20] = labels[3, 35] = labels[5, 50] = 1  # three training events
    labels[2, 80] = 1  # validation/test event: must not shape the graph
    p = random_panel(rng, n, T, labels=labels)
    vals = p.values.copy()
    base = rng.normal(size=T)
    for i in (0, 1, 2):
        vals[i, :, FIELD_INDEX["num_trades"]] = np.round(np.exp(4 + base + 0.3 * rng.normal(size=T)))
    return p.with_values(vals)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0].split("-")[1])):
            terminalreporter.write_line(line)
