import math

import numpy as np
import pytest

from charctc.ctc import Vocabulary
from charctc.encoders import CnnConfig, Encoder, LstmConfig
from charctc.tensor import Tensor
from charctc.trainer import (
    AdamState,
    EpochRecord,
    TrainConfig,
    Utterance,
    adam_step,
    batch_loss,
    epochs_since_best,
    evaluate,
    fit,
    format_log,
    lr_schedule,
    make_batches,
    read_log,
    should_stop,
    train_epoch,
)

TINY_CNN = CnnConfig(filter_width=3, num_resblocks=1, channels=8, fc_width=16)
TINY_LSTM = LstmConfig(layers=2, hidden=8, dropout=0.1)


def toy_data(rng, n=6, infeasible=0):
    vocab = Vocabulary()
    out = []
    for i in range(n):
        T = int(rng.integers(10, 30))
        text = "".join(rng.choice(list("abc"), size=int(rng.integers(1, 4))))
        out.append(Utterance(f"u{i}", rng.normal(size=(T, 80)), vocab.encode(text)))
    for i in range(infeasible):
        out.append(Utterance(f"x{i}", rng.normal(size=(6, 80)), vocab.encode("abcdefgh")))
    return out


class TestAdam:
    def test_first_step_is_signed_lr(self, rng):
        p = {"w": Tensor(rng.normal(size=(4, 3)))}
        w0 = p["w"].data.copy()
        g = rng.normal(size=(4, 3))
        adam_step(p, {"w": g}, AdamState(), lr=0.01)
        np.testing.assert_allclose(p["w"].data - w0, -0.01 * np.sign(g), rtol=1e-6)

    def test_zero_gradient(self, rng):
        p = {"w": Tensor(rng.normal(size=3))}
        st = AdamState()
        adam_step(p, {"w": np.ones(3)}, st, lr=0.01)
        w1, m1, v1 = p["w"].data.copy(), st.m["w"].copy(), st.v["w"].copy()
        # lr 0 isolates the moment update from the parameter update
        adam_step(p, {"w": np.zeros(3)}, st, lr=0.0)
        np.testing.assert_array_equal(p["w"].data, w1)
        np.testing.assert_allclose(st.m["w"], 0.9 * m1)
        np.testing.assert_allclose(st.v["w"], 0.999 * v1)

    def test_zero_gradient_from_scratch(self):
        p = {"w": Tensor(np.array([1.0, -2.0]))}
        adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])

    def test_quadratic(self):
        p = {"w": Tensor(np.zeros(1))}
        st = AdamState()
        # independent scalar recurrence
        w, m, v = 0.0, 0.0, 0.0
        for t in range(1, 501):
            g = 2 * (w - 3)
            m, v = 0.9 * m + 0.1 * g, 0.999 * v + 0.001 * g * g
            w -= 0.1 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
            adam_step(p, {"w": 2 * (p["w"].data - 3)}, st, lr=0.1)
        assert abs(p["w"].item() - 3) < 1e-3
        assert p["w"].item() == pytest.approx(w, abs=1e-12)

    def test_nan_names_tensor(self):
        p = {"fc1.w": Tensor(np.zeros(2))}
        with pytest.raises(FloatingPointError, match="fc1.w"):
            adam_step(p, {"fc1.w": np.array([0.0, np.nan])}, AdamState(), 0.1)


class TestSchedule:
    def test_improving(self):
        assert lr_schedule([10, 9, 8], 1.0) == 1.0

    def test_stagnation(self):
        assert lr_schedule([10, 10.1, 10.2], 1.0) == pytest.approx(0.95)

    def test_one_bad_epoch(self):
        assert lr_schedule([10, 10.1], 1.0) == 1.0

    @pytest.mark.parametrize("k", [1, 2, 3, 5])
    def test_geometric(self, k):
        hist, lr = [5.0], 1.0
        for e in range(2 * k):
            hist.append(6.0 + e)
            lr = lr_schedule(hist, lr)
        assert lr == pytest.approx(0.95**k, rel=1e-12)

    def test_tie_is_not_improvement(self):
        assert epochs_since_best([3.0, 3.0, 3.0]) == 2

    def test_stop(self):
        assert not should_stop([3, 2, 2.5], 2)
        assert should_stop([3, 2, 2.5, 2.1], 2)

    def test_config_defaults(self):
        c = TrainConfig()
        assert c.resolved("lstm").batch_size == 64 and c.resolved("lstm").learning_rate == 1e-3
        assert c.resolved("cnn").batch_size == 32 and c.resolved("cnn").learning_rate == 2e-4
        assert c.resolved("cnn").stop_patience == 2

    @pytest.mark.parametrize("kw", [{"decay_factor": 1.0}, {"batch_size": 0}, {"learning_rate": -1}, {"max_epochs": 0}])
    def test_config_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestBatches:
    def test_bucketing(self):
        lengths = [5, 50, 6, 49, 7, 48]
        batches = make_batches(lengths, 2, seed=0, epoch=0)
        assert sorted(map(sorted, batches)) == [[0, 2], [1, 3], [4, 5]]

    def test_seeded_order(self):
        a = make_batches(list(range(40)), 4, 1, 3)
        assert a == make_batches(list(range(40)), 4, 1, 3)
        assert a != make_batches(list(range(40)), 4, 1, 4)

    @pytest.mark.parametrize("config", [TINY_CNN, TINY_LSTM])
    def test_batch_invariance(self, config, rng):
        enc = Encoder(config, seed=2)
        data = toy_data(rng, 5)
        enc.forward([d.frames for d in data], mode="train")
        mean, per = batch_loss(enc, data, "infer")
        singles = [batch_loss(enc, [d], "infer")[0].item() for d in data]
        assert abs(mean.item() - np.mean(singles)) < 1e-9
        np.testing.assert_allclose(per, singles, atol=1e-9)


class TestTraining:
    @pytest.mark.parametrize("seed", range(20))
    def test_step_reduces_batch_loss(self, seed):
        r = np.random.default_rng(seed)
        config = TINY_CNN if seed % 2 else TINY_LSTM
        enc = Encoder(config, seed=seed)
        data = toy_data(r, 4)
        cfg = TrainConfig(batch_size=4, learning_rate=1e-4, seed=seed)
        before = batch_loss(enc, data, "train", 0)[0].item()
        train_epoch(enc, data, cfg, AdamState(), 1e-4, 0)
        after = batch_loss(enc, data, "train", 0)[0].item()
        assert after <= before

    def test_infeasible_skipped(self, rng):
        enc = Encoder(TINY_CNN)
        data = toy_data(rng, 3, infeasible=2)
        _, skipped = train_epoch(enc, data, TrainConfig(batch_size=2), AdamState(), 1e-3, 0)
        assert skipped == 2

    def test_all_infeasible(self, rng):
        enc = Encoder(TINY_CNN)
        with pytest.raises(ValueError, match="every"):
            train_epoch(enc, toy_data(rng, 0, infeasible=2), TrainConfig(), AdamState(), 1e-3, 0)

    def test_deterministic(self, rng):
        data = toy_data(rng, 6)
        runs = []
        for _ in range(2):
            enc = Encoder(TINY_LSTM, seed=3)
            runs.append(train_epoch(enc, data, TrainConfig(batch_size=2, seed=4), AdamState(), 1e-3, 0)[0])
        assert runs[0] == runs[1]

    def test_validation_in_infer_mode(self, rng):
        enc = Encoder(TINY_LSTM, seed=1)
        data = toy_data(rng, 3)
        # dropout would make repeated evaluations differ
        assert evaluate(enc, data) == evaluate(enc, data)
        assert evaluate(enc, data) == pytest.approx(np.mean(batch_loss(enc, data, "infer")[1]))

    def test_early_stopping(self, rng, monkeypatch):
        import charctc.trainer as tr

        losses = iter([5.0, 4.0, 4.5, 4.2, 3.0, 3.1])
        monkeypatch.setattr(tr, "evaluate", lambda *a, **k: next(losses))
        data = toy_data(rng, 2)
        res = fit(Encoder(TINY_CNN), data, data, TrainConfig(batch_size=2, max_epochs=10))
        assert [r.epoch for r in res.records] == [0, 1, 2, 3]
        assert res.stopped_early and res.best_epoch == 1
        assert res.records[-1].learning_rate == res.records[0].learning_rate
        assert all(r.wall_seconds >= 0 and r.cpu_seconds >= 0 for r in res.records)


class TestResume:
    def test_interrupted_run_matches(self, rng, tmp_path):
        train, valid = toy_data(rng, 6), toy_data(rng, 2)
        cfg = TrainConfig(batch_size=2, learning_rate=1e-3, max_epochs=4, seed=5)
        full = fit(Encoder(TINY_CNN, seed=1), train, valid, cfg, tmp_path / "a")
        fit(Encoder(TINY_CNN, seed=1), train, valid, cfg, tmp_path / "b", stop_after=2)
        resumed = fit(Encoder(TINY_CNN, seed=1), train, valid, cfg, tmp_path / "b")
        assert [r.train_loss for r in full.records] == [r.train_loss for r in resumed.records]
        assert [r.valid_loss for r in full.records] == [r.valid_loss for r in resumed.records]
        assert len(read_log(tmp_path / "b" / "train_log.tsv")) == 4
        assert (tmp_path / "b" / "best" / "config.txt").exists()

    def test_config_mismatch(self, rng, tmp_path):
        data = toy_data(rng, 2)
        fit(Encoder(TINY_CNN), data, None, TrainConfig(batch_size=2, max_epochs=1), tmp_path)
        with pytest.raises(ValueError, match="differs"):
            fit(Encoder(CnnConfig(3, 1, 4, 16)), data, None, TrainConfig(batch_size=2, max_epochs=2), tmp_path)

    def test_log_roundtrip(self, tmp_path):
        recs = [EpochRecord(0, 1.5, math.nan, 1e-3, 0.25, 0.5, 1), EpochRecord(1, 0.1 + 0.2, 2.0, 1e-3, 1.0, 1.0)]
        (tmp_path / "log.tsv").write_text(format_log(recs), encoding="utf-8")
        back = read_log(tmp_path / "log.tsv")
        assert back[1] == recs[1] and math.isnan(back[0].valid_loss)

    def test_negative_time_rejected(self):
        with pytest.raises(ValueError):
            EpochRecord(0, 1.0, 1.0, 1e-3, -1.0, 0.0)

