import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_panel
from pumpwatch.errors import InsufficientHistory, WindowTooLarge
from pumpwatch.features import (
    ENGINEERED,
    FEATURE_NAMES,
    build_feature_matrix,
    buy_pressure,
    make_window,
    pct_change,
    rolling_stat,
    standardize,
    window_batch,
    write_feature_csv,
)
from pumpwatch.panel import FIELD_INDEX, chronological_split


def naive_rolling(x, w, kind):
    out = np.full(len(x), np.nan)
    for t in range(w - 1, len(x)):
        win = x[t - w + 1 : t + 1]
        m = sum(win) / w
        out[t] = m if kind == "mean" else (sum((v - m) ** 2 for v in win) / (w - 1)) ** 0.5
    return out


class TestRolling:
    def test_mean_enumeration(self):
        out = rolling_stat(np.array([1.0, 2, 3, 4]), 2, "mean")
        assert np.isnan(out[0]) and out[1:].tolist() == [1.5, 2.5, 3.5]

    def test_constant_std(self):
        out = rolling_stat(np.full(30, 4.2), 12, "std")
        assert np.all(out[11:] == 0) and np.all(np.isnan(out[:11]))

    @pytest.mark.parametrize("kind", ["mean", "std"])
    def test_naive_oracle_len500(self, kind):
        x = np.random.default_rng(3).normal(size=500) * 100
        got = rolling_stat(x, 12, kind)
        want = naive_rolling(x, 12, kind)
        assert np.all(np.isnan(got[:11]))
        assert np.max(np.abs(got[11:] - want[11:])) < 1e-10

    def test_too_large(self):
        with pytest.raises(WindowTooLarge):
            rolling_stat(np.ones(5), 6)

    def test_std_needs_two(self):
        with pytest.raises(ValueError):
            rolling_stat(np.ones(5), 1, "std")


class TestPctChange:
    def test_basic(self):
        out = pct_change(np.array([2.0, 3.0]))
        assert np.isnan(out[0]) and out[1] == 0.5

    def test_constant(self):
        assert np.all(pct_change(np.full(5, 3.0))[1:] == 0)

    @given(arrays(np.float64, 40, elements=st.floats(-1e3, 1e3)), st.lists(st.integers(0, 39), max_size=8))
    def test_zero_denominator_never_inf(self, x, zeros):
        x = x.copy()
        x[zeros] = 0.0
        out = pct_change(x)
        assert not np.any(np.isinf(out))
        for t in range(1, 40):
            if abs(x[t - 1]) <= 1e-12:
                assert np.isnan(out[t])
            else:
                assert out[t] == pytest.approx((x[t] - x[t - 1]) / x[t - 1], rel=1e-12, abs=1e-12)


class TestBuyPressure:
    def test_examples(self):
        assert buy_pressure(np.array([5.0]), np.array([5.0]))[0] == 1.0
        assert buy_pressure(np.array([0.0]), np.array([5.0]))[0] == 0.0
        assert buy_pressure(np.array([30.0]), np.array([300.0]))[0] == pytest.approx(0.1)
        assert np.isnan(buy_pressure(np.array([1.0]), np.array([0.0]))[0])


class TestFeatureMatrix:
    def test_shape_and_names(self, rng):
        fp = build_feature_matrix(random_panel(rng, 3, 40))
        assert fp.n_features == 18 == len(FEATURE_NAMES)
        assert fp.values.shape == (3, 40, 18)
        assert not fp.mask[:, :12].any() and fp.mask[:, 12:].all()
        assert np.all(np.isfinite(fp.values))

    def test_hour_of_day(self, rng):
        p = random_panel(rng, 2, 50)
        fp = build_feature_matrix(p)
        hours = (p.timestamps // 3600) % 24
        for i in range(2):
            m = fp.mask[i]
            assert np.array_equal(fp.values[i, m, -1], hours[m])
        assert set(np.unique(fp.values[..., -1])) <= set(range(24))

    def test_constant_candles(self, rng):
        p = random_panel(rng, 1, 40)
        const = np.broadcast_to(p.values[0, :1], p.values.shape).copy()
        fp = build_feature_matrix(p.with_values(const))
        eng = fp.values[0, fp.mask[0], 9:17]
        assert np.all(eng == 0)

    def test_engineered_against_recomputation(self, rng):
        p = random_panel(rng, 2, 60)
        fp = build_feature_matrix(p)
        i, t = 1, 40
        trades = p.field("num_trades")[i]
        std_now = naive_rolling(trades, 12, "std")
        want = (std_now[t] - std_now[t - 1]) / std_now[t - 1]
        assert fp.values[i, t, FEATURE_NAMES.index("std_trades")] == pytest.approx(want, rel=1e-10)
        bp = p.field("taker_buy_quote")[i] / p.field("quote_asset_volume")[i]
        m = naive_rolling(bp, 12, "mean")
        assert fp.values[i, t, FEATURE_NAMES.index("avg_rush_order")] == pytest.approx((m[t] - m[t - 1]) / m[t - 1], rel=1e-10)
        hi = naive_rolling(p.field("high")[i], 12, "mean")
        assert fp.values[i, t, FEATURE_NAMES.index("avg_price_max")] == pytest.approx((hi[t] - hi[t - 1]) / hi[t - 1], rel=1e-10)

    def test_spike_peaks_std_trades(self, rng):
        p = random_panel(rng, 1, 80)
        vals = p.values.copy()
        vals[0, :, FIELD_INDEX["num_trades"]] = 100 + rng.normal(0, 1, 80)
        t0 = 40
        vals[0, t0, FIELD_INDEX["num_trades"]] = 5000
        fp = build_feature_matrix(p.with_values(vals))
        col = fp.values[0, :, FEATURE_NAMES.index("std_trades")]
        assert t0 <= int(np.argmax(col)) <= t0 + 11

    def test_missing_candle_masks_following_window(self, rng):
        present = np.ones((2, 60), bool)
        present[0, 30] = False
        fp = build_feature_matrix(random_panel(rng, 2, 60, present=present))
        assert not fp.mask[0, 30:43].any()
        assert fp.mask[0, 43] and fp.mask[1, 30:43].all() and fp.mask[0, 29]
        assert np.all(fp.values[0, 30] == 0)

    @given(st.integers(14, 58), st.integers(0, 2**32 - 1))
    def test_no_lookahead(self, t, seed):
        r = np.random.default_rng(seed)
        p = random_panel(r, 2, 60)
        base = build_feature_matrix(p)
        vals = p.values.copy()
        vals[:, t + 1 :, :] *= r.uniform(0.5, 2.0, size=vals[:, t + 1 :, :].shape)
        vals[:, t + 1 :, 1] = np.maximum(vals[:, t + 1 :, 1], vals[:, t + 1 :, 0:4].max(axis=-1))
        vals[:, t + 1 :, 2] = np.minimum(vals[:, t + 1 :, 2], vals[:, t + 1 :, 0:4].min(axis=-1))
        other = build_feature_matrix(p.with_values(vals))
        assert np.array_equal(base.values[:, : t + 1], other.values[:, : t + 1])
        assert np.array_equal(base.mask[:, : t + 1], other.mask[:, : t + 1])


class TestStandardize:
    def test_train_moments(self, rng):
        p = random_panel(rng, 3, 200)
        fp = build_feature_matrix(p)
        split = chronological_split(p)
        std, stats = standardize(fp, split.train)
        cells = std.values[:, split.train][fp.mask[:, split.train]]
        assert np.all(np.abs(cells.mean(axis=0)) < 1e-9)
        scaled = stats.scaled
        assert np.allclose(cells.std(axis=0)[scaled], 1.0)

    def test_constant_feature_centred_only(self, rng):
        p = random_panel(rng, 2, 60)
        vals = p.values.copy()
        vals[:, :, FIELD_INDEX["num_trades"]] = 7.0
        fp = build_feature_matrix(p.with_values(vals))
        std, stats = standardize(fp, np.arange(40))
        k = FIELD_INDEX["num_trades"]
        assert not stats.scaled[k] and stats.mean[k] == 7.0
        assert np.all(std.values[:, :, k][fp.mask] == 0)

    def test_val_mutation_leaves_stats(self, rng):
        p = random_panel(rng, 3, 120)
        split = chronological_split(p)
        _, s1 = standardize(build_feature_matrix(p), split.train)
        vals = p.values.copy()
        vals[:, split.val[0] :, 4:] *= 10
        _, s2 = standardize(build_feature_matrix(p.with_values(vals)), split.train)
        assert s1.mean.tobytes() == s2.mean.tobytes() and s1.std.tobytes() == s2.std.tobytes()

    def test_reuse_stats(self, rng):
        fp = build_feature_matrix(random_panel(rng, 2, 60))
        a, stats = standardize(fp, np.arange(40))
        b, _ = standardize(fp, stats=stats)
        assert np.array_equal(a.values, b.values)
        with pytest.raises(ValueError):
            standardize(fp)

    def test_masked_cells_stay_zero(self, rng):
        fp = build_feature_matrix(random_panel(rng, 2, 60))
        std, _ = standardize(fp, np.arange(40))
        assert np.all(std.values[~fp.mask] == 0)


class TestWindow:
    def test_consistency(self, rng):
        fp = build_feature_matrix(random_panel(rng, 3, 40))
        win = make_window(fp, 20, 5)
        assert win.values.shape == (3, 5, 18)
        assert np.array_equal(win.values[:, 4], fp.values[:, 20])
        for u in range(5):
            assert np.array_equal(win.values[:, u], fp.values[:, 16 + u])

    def test_w1(self, rng):
        fp = build_feature_matrix(random_panel(rng, 2, 30))
        assert np.array_equal(make_window(fp, 17, 1).values[:, 0], fp.values[:, 17])

    def test_insufficient(self, rng):
        fp = build_feature_matrix(random_panel(rng, 2, 30))
        with pytest.raises(InsufficientHistory):
            make_window(fp, 3, 5)
        with pytest.raises(InsufficientHistory):
            window_batch(fp, [3, 10], 5)

    def test_valid_nodes(self, rng):
        fp = build_feature_matrix(random_panel(rng, 2, 30))
        assert not make_window(fp, 8, 5).valid_nodes.any()
        assert make_window(fp, 12, 5).valid_nodes.all()

    def test_batch_matches_single(self, rng):
        fp = build_feature_matrix(random_panel(rng, 2, 40))
        batch = window_batch(fp, [15, 22, 39], 4)
        for b, t in enumerate([15, 22, 39]):
            assert np.array_equal(batch[b], make_window(fp, t, 4).values)


def test_feature_csv(tmp_path, rng):
    p = random_panel(rng, 2, 20)
    fp = build_feature_matrix(p)
    write_feature_csv(fp, p.labels, tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == ",".join(["symbol", "timestamp_utc", *FEATURE_NAMES, "flag", "valid"])
    assert len(lines) == 1 + 2 * 20
    assert len(ENGINEERED) == 8
