from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import T0, random_panel
from oracles import split_positions
from pumpwatch.errors import DuplicateTimestamp, EventOffGrid, MalformedRow, PanelTooShort
from pumpwatch.panel import (
    HOUR,
    CandleSeries,
    Panel,
    PumpEvent,
    assemble_panel,
    chronological_split,
    format_ts,
    parse_kline_rows,
    parse_ts,
    read_panel_csv,
    read_pump_schedule,
    snap_pump_time,
    to_datetime,
    write_panel_csv,
)

UTC = timezone.utc


def kline(open_ms, o=1.0, h=1.2, l=0.9, c=1.1, v=500, qav=50, n=50, tbb=300, tbq=30):
    return f"{open_ms},{o},{h},{l},{c},{v},{open_ms + 3599999},{qav},{n},{tbb},{tbq},0"


def series_for(hours, start=T0):
    return parse_kline_rows([kline((start + k * HOUR) * 1000) for k in hours])


class TestParse:
    def test_field_mapping(self):
        s = parse_kline_rows(["1609459200000,1.0,1.2,0.9,1.1,500,1609462799999,50,50,300,30,0"])
        c = s[0]
        assert (c.open, c.close, c.num_trades) == (1.0, 1.1, 50.0)
        assert (c.volume, c.quote_asset_volume, c.taker_buy_base, c.taker_buy_quote) == (500, 50, 300, 30)
        assert c.open_time == datetime(2021, 1, 1, tzinfo=UTC)

    def test_empty(self):
        assert len(parse_kline_rows([])) == 0

    def test_duplicate(self):
        with pytest.raises(DuplicateTimestamp):
            parse_kline_rows([kline(T0 * 1000), kline(T0 * 1000)])

    def test_sorted_output(self):
        s = parse_kline_rows([kline((T0 + 2 * HOUR) * 1000), kline(T0 * 1000), kline((T0 + HOUR) * 1000)])
        assert list(np.diff(s.open_time)) == [HOUR, HOUR]

    def test_sequence_rows(self):
        s = parse_kline_rows([[T0 * 1000, "1", "2", "0.5", "1.5", "10", 0, "20", 3, "4", "5"]])
        assert s[0].num_trades == 3

    @pytest.mark.parametrize(
        "row,needle",
        [
            ("1,2,3", "fields"),
            ("abc,1,1.2,0.9,1.1,5,0,5,5,3,3", "unparsable"),
            (kline(T0 * 1000 + 1), "hour boundary"),
            (kline(T0 * 1000, l=1.5), "high/low"),
            (kline(T0 * 1000, v=-1), "negative"),
        ],
    )
    def test_malformed_reports_row(self, row, needle):
        with pytest.raises(MalformedRow) as exc:
            parse_kline_rows([kline(T0 * 1000 - HOUR * 1000), row])
        assert exc.value.row_number == 2
        assert needle in str(exc.value)


class TestSnap:
    @pytest.mark.parametrize(
        "minute,second,expected_hour",
        [(0, 0, 15), (29, 59, 15), (30, 0, 16), (30, 1, 16), (31, 0, 16), (59, 0, 16)],
    )
    def test_enumeration(self, minute, second, expected_hour):
        raw = datetime(2024, 3, 1, 15, minute, second, tzinfo=UTC)
        assert snap_pump_time(raw) == datetime(2024, 3, 1, expected_hour, tzinfo=UTC)

    @given(st.integers(0, 10**9))
    def test_nearest(self, secs):
        raw = to_datetime(T0 + secs)
        snapped = snap_pump_time(raw)
        assert snapped.minute == snapped.second == 0
        assert abs((snapped - raw).total_seconds()) <= HOUR / 2

    def test_naive_is_utc(self):
        assert snap_pump_time(datetime(2024, 1, 1, 0, 45)) == datetime(2024, 1, 1, 1, tzinfo=UTC)


class TestAssemble:
    def test_union_grid(self):
        p = assemble_panel({"B": series_for(range(2, 8)), "A": series_for(range(0, 6))})
        assert p.tokens == ("A", "B")
        assert p.n_hours == 8
        assert p.present[0].tolist() == [True] * 6 + [False] * 2
        assert p.present[1].tolist() == [False] * 2 + [True] * 6
        assert np.all(p.values[1, :2] == 0)

    def test_event_label(self):
        ev = PumpEvent.at("A", to_datetime(T0 + 3 * HOUR + 600))
        p = assemble_panel({"A": series_for(range(6)), "B": series_for(range(6))}, [ev])
        assert p.labels.sum() == 1 and p.labels[0, 3] == 1

    def test_event_off_grid(self):
        with pytest.raises(EventOffGrid):
            assemble_panel({"A": series_for(range(3))}, [PumpEvent.at("A", to_datetime(T0 + 10 * HOUR))])
        with pytest.raises(EventOffGrid):
            assemble_panel({"A": series_for(range(3))}, [PumpEvent.at("Z", to_datetime(T0))])

    def test_permutation_invariant(self):
        a, b, c = series_for(range(0, 5)), series_for(range(1, 7)), series_for(range(3, 9))
        p1 = assemble_panel({"A": a, "B": b, "C": c})
        p2 = assemble_panel({"C": c, "A": a, "B": b})
        assert p1.equals(p2)

    def test_timestamps_step(self):
        p = assemble_panel({"A": series_for([0, 5])})
        assert np.all(np.diff(p.timestamps) == HOUR)

    def test_immutable(self, rng):
        p = random_panel(rng)
        with pytest.raises(ValueError):
            p.values[0, 0, 0] = 1.0


class TestCsvRoundTrip:
    def test_bit_exact(self, tmp_path, rng):
        present = rng.random((3, 30)) > 0.1
        labels = (rng.random((3, 30)) > 0.9).astype(np.int8)
        p = random_panel(rng, 3, 30, labels=labels, present=present)
        path = tmp_path / "panel.csv"
        write_panel_csv(p, path)
        q = read_panel_csv(path)
        assert p.equals(q)
        write_panel_csv(q, tmp_path / "again.csv")
        assert path.read_bytes() == (tmp_path / "again.csv").read_bytes()

    def test_header(self, tmp_path, rng):
        write_panel_csv(random_panel(rng, 1, 2), tmp_path / "p.csv")
        head = (tmp_path / "p.csv").read_text().splitlines()[0]
        assert head == "symbol,timestamp_utc,open,high,low,close,volume,quote_asset_volume,num_trades,taker_buy_base,taker_buy_quote,flag"

    def test_bad_header(self, tmp_path):
        (tmp_path / "p.csv").write_text("a,b\n")
        with pytest.raises(MalformedRow):
            read_panel_csv(tmp_path / "p.csv")


def test_schedule_reader(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("symbol,timestamp_utc\nAAA,2021-01-01T03:40:00Z\nBBB,2021-01-01 05:10:00\n")
    evs = read_pump_schedule(path)
    assert [(e.token, format_ts(int(e.snapped_time.timestamp()))) for e in evs] == [
        ("AAA", "2021-01-01T04:00:00Z"),
        ("BBB", "2021-01-01T05:00:00Z"),
    ]
    with pytest.raises(MalformedRow):
        read_pump_schedule("symbol,timestamp_utc\nAAA,not-a-date\n")


class TestSplit:
    def test_t100_z5(self):
        s = chronological_split(100, z=5)
        # 1-based ts[k] is grid position k-1
        assert (s.train + 1).tolist() == list(range(1, 61))
        assert (s.val + 1).tolist() == list(range(66, 81))
        assert (s.test + 1).tolist() == list(range(86, 101))

    def test_z0_contiguous(self):
        s = chronological_split(50, z=0)
        assert np.array_equal(np.concatenate([s.train, s.val, s.test]), np.arange(50))

    def test_too_short(self):
        with pytest.raises(PanelTooShort):
            chronological_split(12, z=5)

    @given(st.integers(14, 3000), st.integers(0, 6))
    def test_matches_enumeration(self, T, z):
        try:
            s = chronological_split(T, z=z)
        except PanelTooShort:
            tr, va, te = split_positions(T, z)
            assert T <= 2 * z + 3 or not (tr and va and te)
            return
        tr, va, te = split_positions(T, z)
        assert (s.train + 1).tolist() == tr
        assert (s.val + 1).tolist() == va
        assert (s.test + 1).tolist() == te
        assert s.train[-1] < s.val[0] < s.test[0]
        assert len(s.train) + len(s.val) + len(s.test) + 2 * z == T

    def test_accepts_panel(self, rng):
        p = random_panel(rng, 2, 100)
        assert np.array_equal(chronological_split(p).test, chronological_split(100).test)

    def test_block_of(self):
        s = chronological_split(100, z=5)
        assert s.block_of(0) == "train" and s.block_of(62) is None and s.block_of(70) == "val" and s.block_of(99) == "test"


def test_parse_ts_forms():
    assert parse_ts("2021-01-01T00:00:00Z") == parse_ts("2021-01-01 00:00:00") == datetime(2021, 1, 1, tzinfo=UTC)
    assert format_ts(T0) == "2021-01-01T00:00:00Z"


def test_candleseries_duplicate():
    c = series_for([0])[0]
    with pytest.raises(DuplicateTimestamp):
        CandleSeries.from_candles([c, c])
