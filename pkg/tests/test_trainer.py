import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import bce_direct, best_f1_exhaustive, f1_at
from pumpwatch import trainer
from pumpwatch.errors import ConfigError, NoPositivesInTrain, UnknownKey
from pumpwatch.numcore import Tensor
from pumpwatch.panel import Panel
from pumpwatch.synthmarket import SynthConfig, generate
from pumpwatch.trainer import (
    ProtocolReport,
    TestGate,
    TrainConfig,
    bce_loss,
    fit,
    load_train_config,
    prepare,
    run_protocol,
    select_threshold,
    write_history_csv,
)

TINY = dict(D=8, H=2, W=3, dtype="float64", lr=5e-3, dropout=0.0, rho=0.5, batch_anchors=32)


@pytest.fixture(scope="module")
def panel():
    p, _ = generate(SynthConfig(n_tokens=6, n_hours=500, n_pumps=24, n_clusters=2, n_shocks=6))
    return p


class TestLoss:
    def test_ln2(self):
        z = Tensor(np.zeros((3, 4)))
        y = np.zeros((3, 4))
        y[0, 0] = 1
        assert bce_loss(z, y, np.ones((3, 4), bool)).item() == pytest.approx(math.log(2), abs=1e-15)

    @given(st.integers(0, 2**32 - 1), st.floats(1.0, 200.0))
    def test_oracle(self, seed, pw):
        r = np.random.default_rng(seed)
        z = r.normal(scale=4, size=(5, 7))
        y = (r.random((5, 7)) > 0.7).astype(float)
        m = r.random((5, 7)) > 0.2
        m[0, 0] = True
        got = bce_loss(Tensor(z), y, m, pw).item()
        assert abs(got - bce_direct(z, y, m, pw)) < 1e-10

    def test_unit_weight_is_plain(self, rng):
        z = rng.normal(size=20)
        y = (rng.random(20) > 0.5).astype(float)
        p = 1 / (1 + np.exp(-z))
        plain = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
        assert bce_loss(Tensor(z), y, np.ones(20, bool), 1.0).item() == pytest.approx(plain, rel=1e-12)


class TestThreshold:
    def test_separated_takes_upper_gap(self):
        p = np.array([0.1, 0.2, 0.3, 0.8, 0.9])
        y = np.array([0, 0, 0, 1, 1])
        # 0.5 and 0.55 both separate perfectly; the larger wins
        assert select_threshold(p, y) == pytest.approx(0.55)

    def test_single_positive(self):
        assert select_threshold(np.array([0.2, 0.4, 0.7]), np.array([0, 1, 0])) == pytest.approx(0.3)

    def test_no_positives(self, caplog):
        assert select_threshold(np.array([0.1, 0.9]), np.array([0, 0])) == 0.5
        assert "no positives" in caplog.text

    @given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=25).filter(lambda xs: any(b for _, b in xs)))
    def test_exhaustive(self, pairs):
        p = np.array([a for a, _ in pairs])
        y = np.array([b for _, b in pairs])
        g = select_threshold(p, y)
        u = sorted(set(p.tolist()))
        cands = sorted({(a + b) / 2 for a, b in zip(u, u[1:])} | {0.5})
        cands = [c for c in cands if 0 < c < 1]
        scores = [f1_at(p, y, c) for c in cands]
        want = max(c for c, f in zip(cands, scores) if f == max(scores))
        assert g == want
        assert f1_at(p, y, g) <= best_f1_exhaustive(p, y)


class TestFit:
    def test_deterministic(self, panel):
        cfg = TrainConfig(max_epochs=2, **TINY)
        prep = prepare(panel, cfg)
        a, b = fit(None, cfg, 3, prep), fit(None, cfg, 3, prep)
        assert a.history == b.history and a.gamma == b.gamma
        assert all(a.state[k].tobytes() == b.state[k].tobytes() for k in a.state)

    def test_loss_halves(self, panel):
        r = fit(panel, TrainConfig(max_epochs=8, patience=8, **TINY), 0)
        assert r.history[-1][1] <= 0.5 * r.history[0][1]
        assert 0 < r.gamma < 1

    def test_pos_weight(self, panel):
        cfg = TrainConfig(max_epochs=1, **TINY)
        prep = prepare(panel, cfg)
        a = prep.anchors["train"]
        y, m = panel.labels[:, a], prep.features.mask[:, a]
        pos = y[m].sum()
        assert fit(None, cfg, 0, prep).pos_weight == pytest.approx(min((m.sum() - pos) / pos, 200.0))
        capped = TrainConfig(max_epochs=1, pos_weight_cap=10.0, **TINY)
        assert fit(None, capped, 0, prep).pos_weight == 10.0

    def test_patience_and_restore(self, panel, monkeypatch):
        seen = []
        real = trainer._eval_loss

        def rising(model, prep, anchors, pw, batch):
            _, probs = real(model, prep, anchors, pw, batch)
            seen.append(model.params.state())
            return float(len(seen)), probs

        monkeypatch.setattr(trainer, "_eval_loss", rising)
        r = fit(panel, TrainConfig(max_epochs=10, patience=1, **TINY), 0)
        assert [h[0] for h in r.history] == [1, 2] and r.best_epoch == 1
        assert all(np.array_equal(seen[-1][k], seen[0][k]) for k in seen[0])
        assert not all(np.array_equal(seen[1][k], seen[0][k]) for k in seen[0])

    def test_no_positives(self, panel):
        empty = Panel(panel.tokens, panel.timestamps, panel.values, panel.present, np.zeros_like(panel.labels))
        with pytest.raises(NoPositivesInTrain):
            fit(empty, TrainConfig(max_epochs=1, **TINY))

    def test_dynamic_graph_runs(self, panel):
        r = fit(panel, TrainConfig(max_epochs=1, strategy="G2", **TINY))
        assert len(r.history) == 1 and math.isfinite(r.history[0][2])

    def test_history_csv(self, panel, tmp_path):
        r = fit(panel, TrainConfig(max_epochs=2, **TINY))
        write_history_csv(r.history, tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,val_f1" and len(lines) == 3


class TestProtocol:
    def test_gate_once_per_seed(self, panel):
        gate = TestGate()
        rep = run_protocol(panel, TrainConfig(max_epochs=1, **TINY), seeds=[0, 1, 2], gate=gate)
        assert gate.touches == {0: 1, 1: 1, 2: 1}
        assert sorted(rep.per_seed) == [0, 1, 2] and not rep.failed

    def test_failed_seeds_listed(self, panel, monkeypatch):
        real = trainer.fit

        def flaky(p, cfg, seed=0, prep=None):
            if seed == 1:
                raise NoPositivesInTrain("boom")
            return real(p, cfg, seed, prep)

        monkeypatch.setattr(trainer, "fit", flaky)
        rep = run_protocol(panel, TrainConfig(max_epochs=1, **TINY), seeds=[0, 1])
        assert rep.failed == {1: "boom"} and list(rep.per_seed) == [0]

    def test_aggregate_arithmetic(self, tmp_path):
        vals = [0.5, 0.7, 0.9]
        per = {s: {m: v for m in trainer.METRICS} for s, v in enumerate(vals)}
        rep = ProtocolReport([0, 1, 2], per, {0: 0.4, 1: 0.5, 2: 0.6}, {})
        mean, std = rep.aggregate()["f1"]
        assert mean == pytest.approx(0.7) and std == pytest.approx(0.2)
        rep.write_csv(tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "metric,mean,std,seed_0,seed_1,seed_2"
        assert lines[-1].startswith("gamma,,,")

    def test_single_seed_std_zero(self):
        rep = ProtocolReport([4], {4: {m: 0.3 for m in trainer.METRICS}}, {4: 0.5}, {})
        assert rep.aggregate()["recall"] == (0.3, 0.0)


class TestConfig:
    def test_validation(self):
        for kw in (dict(patience=0), dict(seeds=()), dict(neg_keep=0.0)):
            with pytest.raises(ValueError):
                TrainConfig(**kw)

    def test_load_with_overrides(self, tmp_path):
        (tmp_path / "c.cfg").write_text("strategy = G2\nseeds = 1,2\n")
        cfg = load_train_config(tmp_path / "c.cfg", {"lr": "0.01"})
        assert (cfg.strategy, cfg.seeds, cfg.lr) == ("G2", (1, 2), 0.01)

    def test_unknown_key(self):
        with pytest.raises(UnknownKey) as exc:
            load_train_config(None, {"learning_rate": "1"})
        assert isinstance(exc.value, ConfigError) and "lr" in str(exc.value)


def test_train_anchors_stay_in_block(panel):
    prep = prepare(panel, TrainConfig(**TINY))
    s = prep.split
    for name, block in (("train", s.train), ("val", s.val), ("test", s.test)):
        a = prep.anchors[name]
        assert np.all(np.isin(a, block)) and np.all(a - 2 >= block[0])
    assert set(itertools.chain(prep.anchors["train"])).isdisjoint(prep.anchors["test"])
