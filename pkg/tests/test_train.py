import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import earlybird.train as train_mod
from earlybird.errors import ConfigError, NumericError, TrainingError
from earlybird.model import Conv, GlobalAvgPool, Linear, MaxPool, NetworkSpec, build_network
from earlybird.pruning import apply_mask
from earlybird.train import (
    LRSchedule, TrainConfig, baseline_lt, eb_search, eb_train, epoch_permutation, evaluate,
    lr_at_epoch, new_phase, quantize_sim, run_phase, train_epoch,
)

from conftest import blob_splits

TINY = NetworkSpec((1, 8, 8), (Conv(4), MaxPool(), Conv(8), GlobalAvgPool(), Linear(4)), 4)


def tiny_config(**kw):
    base = dict(search_epochs=8, retrain_epochs=2, batch_size=32, window=2, epsilon=0.2, p=0.3)
    base.update(kw)
    return TrainConfig(**base)


def params_equal(a, b):
    return all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


class TestSchedule:
    def test_published_schedule(self):
        s = LRSchedule(0.1, (80, 120), 0.1)
        assert lr_at_epoch(s, 0) == 0.1
        assert lr_at_epoch(s, 79) == 0.1
        assert lr_at_epoch(s, 80) == pytest.approx(0.01, rel=1e-12)
        assert lr_at_epoch(s, 120) == pytest.approx(0.001, rel=1e-12)

    def test_scaling(self):
        assert LRSchedule.scaled(160).milestones == (80, 120)
        assert LRSchedule.scaled(20).milestones == (10, 15)

    def test_constant(self):
        s = LRSchedule(0.05, ())
        assert {lr_at_epoch(s, t) for t in range(50)} == {0.05}

    @pytest.mark.parametrize("kw", [dict(milestones=(5, 5)), dict(milestones=(9, 3)), dict(factor=1.0),
                                    dict(factor=0.0), dict(initial=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            LRSchedule(**kw)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(1, 200), max_size=5, unique=True), st.floats(0.01, 0.99))
    def test_non_increasing(self, ms, factor):
        s = LRSchedule(0.1, tuple(sorted(ms)), factor)
        lrs = [lr_at_epoch(s, t) for t in range(0, 220)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))


class TestQuantize:
    def test_example(self):
        q = quantize_sim(np.array([1.0, -0.5, 0.25]))
        np.testing.assert_allclose(q, [1.0, -63 / 127, 32 / 127], rtol=1e-15)
        assert q[1] == pytest.approx(-0.49606299212598425) and q[2] == pytest.approx(0.25196850393700787)

    def test_zero(self):
        np.testing.assert_array_equal(quantize_sim(np.zeros(4)), np.zeros(4))

    def test_non_finite(self):
        with pytest.raises(NumericError):
            quantize_sim(np.array([1.0, np.nan]))

    def test_bits(self):
        with pytest.raises(ConfigError):
            quantize_sim(np.ones(2), bits=1)
        np.testing.assert_array_equal(quantize_sim(np.array([0.9, -0.2, 0.4]), bits=2), [0.9, 0.0, 0.0])

    def test_subnormal_peak_passes_through(self):
        x = np.array([0.0, 5e-324])
        np.testing.assert_array_equal(quantize_sim(x, 3), x)

    def test_dtype_preserved(self):
        assert quantize_sim(np.ones(3, np.float32)).dtype == np.float32

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.floats(-1e4, 1e4, allow_subnormal=False), min_size=1, max_size=50), st.integers(2, 12))
    def test_idempotent_and_bounded(self, values, bits):
        x = np.array(values)
        q = quantize_sim(x, bits)
        np.testing.assert_array_equal(quantize_sim(q, bits), q)
        peak = np.abs(x).max()
        if peak:
            s = peak / (2 ** (bits - 1) - 1)
            assert np.all(np.abs(q - x) <= s / 2 * (1 + 1e-9))
            assert np.abs(q).max() == pytest.approx(peak, rel=1e-12)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(p=0.0), dict(p=1.0), dict(window=0), dict(search_epochs=5, window=5),
                                    dict(batch_size=1), dict(lr=-0.1), dict(precision="fp16"),
                                    dict(weight_mode="rewind"), dict(retrain_epochs=-1), dict(epsilon=-1)])
    def test_rejected(self, kw):
        with pytest.raises(ConfigError):
            tiny_config(**kw).validate()

    def test_defaults(self):
        c = TrainConfig()
        assert (c.lr, c.momentum, c.weight_decay, c.epsilon, c.window) == (0.1, 0.9, 1e-4, 0.1, 5)
        assert c.schedule(20).milestones == (10, 15)


class TestEpoch:
    def test_permutation_keyed(self):
        a = epoch_permutation(100, 0, "dense", 3)
        np.testing.assert_array_equal(a, epoch_permutation(100, 0, "dense", 3))
        assert not np.array_equal(a, epoch_permutation(100, 0, "dense", 4))
        assert not np.array_equal(a, epoch_permutation(100, 0, "retrain-inherit", 3))

    def test_zero_lr_leaves_params(self, blobs):
        cfg = tiny_config(lr=0.0, weight_decay=0.0, l1_gamma=0.0)
        net = build_network(TINY, 0)
        state = new_phase("dense", net.copy(), cfg, 1)
        train_epoch(state, blobs, cfg, cfg.schedule(1))
        assert params_equal(state.network, net)

    def test_single_batch_one_step(self, blobs, monkeypatch):
        calls = []
        real = train_mod.sgd_step
        monkeypatch.setattr(train_mod, "sgd_step", lambda *a, **k: calls.append(1) or real(*a, **k))
        splits = blob_splits(n_train=32)
        cfg = tiny_config(batch_size=32)
        state = new_phase("dense", build_network(TINY, 0), cfg, 1)
        train_epoch(state, splits, cfg, cfg.schedule(1))
        assert len(calls) == 1
        assert set(state.optimizer.buffers) == set(state.network.params)

    def test_loss_drops_below_uniform(self):
        splits = blob_splits(n_train=64)
        cfg = tiny_config(batch_size=16)
        state = new_phase("dense", build_network(TINY, 0), cfg, 1)
        train_epoch(state, splits, cfg, cfg.schedule(1))
        # batch statistics: four steps are too few for the running averages to settle
        logits = state.network.forward(splits.train.x, train=True)
        loss, _ = train_mod.ops.softmax_cross_entropy(logits, splits.train.y)
        assert loss < math.log(4)

    def test_metrics_row(self, blobs):
        cfg = tiny_config()
        state = new_phase("dense", build_network(TINY, 0), cfg, 2, detector=True)
        run_phase(state, blobs, cfg)
        rows = state.metrics
        assert [r["epoch"] for r in rows] == [1, 2]
        assert set(rows[0]) == set(train_mod.METRIC_COLUMNS)
        assert rows[0]["mask_distance"] is None and 0 <= rows[1]["mask_distance"] <= 1
        per_epoch = train_mod.count_flops(state.network).train_flops * len(blobs.train)
        assert [r["cumulative_flops"] for r in rows] == [per_epoch, 2 * per_epoch]

    def test_batch_larger_than_split(self, blobs):
        cfg = tiny_config(batch_size=1024)
        state = new_phase("dense", build_network(TINY, 0), cfg, 1)
        with pytest.raises(ConfigError):
            train_epoch(state, blobs, cfg, cfg.schedule(1))

    def test_divergence(self, blobs):
        cfg = tiny_config(lr=1e12)
        state = new_phase("dense", build_network(TINY, 0), cfg, 3)
        with pytest.raises(TrainingError) as err:
            run_phase(state, blobs, cfg)
        assert err.value.epoch is not None

    def test_sim8_trains_differently(self, blobs):
        cfg = tiny_config()
        a = new_phase("dense", build_network(TINY, 0), cfg, 1, "fp32")
        b = new_phase("dense", build_network(TINY, 0), cfg, 1, "sim8")
        run_phase(a, blobs, cfg)
        run_phase(b, blobs, cfg)
        assert not params_equal(a.network, b.network)
        assert math.isfinite(b.metrics[-1]["train_loss"])
        assert a.flops == b.flops  # 8-bit steps are counted like fp32 ones


class TestSearch:
    def test_detector_does_not_change_trajectory(self, blobs):
        cfg = tiny_config()
        a = new_phase("dense", build_network(TINY, 0), cfg, 4, detector=True)
        b = new_phase("dense", build_network(TINY, 0), cfg, 4, detector=False)
        run_phase(a, blobs, cfg)
        run_phase(b, blobs, cfg)
        assert params_equal(a.network, b.network)
        assert [r["train_loss"] for r in a.metrics] == [r["train_loss"] for r in b.metrics]

    def test_epsilon_above_one_fires_at_l_plus_one(self, blobs):
        cfg = tiny_config(epsilon=1.1, window=3)
        result, state = eb_search(blobs, TINY, cfg)
        assert result.triggered and result.epoch == 4 and state.epoch == 4

    def test_epsilon_zero_falls_back(self, blobs):
        cfg = tiny_config(epsilon=0.0, search_epochs=4)
        result, state = eb_search(blobs, TINY, cfg)
        assert not result.triggered and result.fallback
        assert result.epoch == 4 and result.mask == state.masks[-1]

    def test_continue_past_trigger_snapshots(self, blobs):
        cfg = tiny_config(epsilon=1.1, window=2, search_epochs=5)
        stopped, _ = eb_search(blobs, TINY, cfg)
        full, state = eb_search(blobs, TINY, cfg, stop_on_trigger=False)
        assert state.epoch == 5 and full.epoch == stopped.epoch == 3
        assert params_equal(full.network, stopped.network)

    def test_deterministic(self, blobs):
        cfg = tiny_config()
        a = eb_train(blobs, TINY, cfg)
        b = eb_train(blobs, TINY, cfg)
        assert a.metrics == b.metrics
        assert a.summary()["cost"] == b.summary()["cost"]


class TestPipeline:
    def test_eb_train_cost(self, blobs):
        cfg = tiny_config(epsilon=1.1, window=2)
        report = eb_train(blobs, TINY, cfg)
        assert report.ticket.epoch == 3
        cost = report.cost
        assert set(cost.phases) == {"search", "retrain"}
        assert cost.total == sum(f for _, f in cost.epoch_flops)
        dense_epoch = cost.train_flops * len(blobs.train)
        assert cost.phases["search"] == 3 * dense_epoch
        assert cost.phases["retrain"] < 2 * dense_epoch
        assert report.retrain.network.total_channels < 12

    def test_cheaper_than_baseline(self, blobs):
        cfg = tiny_config(epsilon=1.1, window=2)
        eb = eb_train(blobs, TINY, cfg)
        lt = baseline_lt(blobs, TINY, cfg)
        assert eb.cost.total < lt.cost.total
        assert lt.cost.phases["baseline_train"] == cfg.search_epochs * lt.cost.train_flops * len(blobs.train)

    def test_shared_prefix(self, blobs):
        cfg = tiny_config(epsilon=1.1, window=2)
        eb = eb_train(blobs, TINY, cfg)
        lt = baseline_lt(blobs, TINY, cfg)
        n = eb.ticket.epoch
        assert eb.search.metrics == lt.search.metrics[:n]

    def test_zero_retrain_equals_masked_dense(self, blobs):
        cfg = tiny_config(retrain_epochs=0)
        lt = baseline_lt(blobs, TINY, cfg)
        pruned = apply_mask(lt.search.network, lt.ticket.mask)
        assert lt.final_accuracy == evaluate(pruned, blobs.test)[1]
        assert lt.retrain.metrics == []

    def test_reinit_differs(self, blobs):
        cfg = tiny_config(epsilon=1.1, window=2)
        search = eb_search(blobs, TINY, cfg)
        a = eb_train(blobs, TINY, cfg, search=search)
        cfg_r = tiny_config(epsilon=1.1, window=2, weight_mode="reinit")
        b = eb_train(blobs, TINY, cfg_r, search=search)
        assert a.retrain.phase == "retrain-inherit" and b.retrain.phase == "retrain-reinit"
        assert a.pruned_accuracy_before_retrain != b.pruned_accuracy_before_retrain or \
            not params_equal(a.retrain.network, b.retrain.network)

    def test_overhead_reported(self, blobs):
        report = eb_train(blobs, TINY, tiny_config(epsilon=1.1, window=2))
        o = report.overhead
        assert 0 < o["mask_flops_fraction"] < 1e-3
        assert o["mask_ops_per_epoch"] == 12 * 4 + 12
