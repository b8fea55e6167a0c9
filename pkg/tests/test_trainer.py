import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from complexqa import model as M
from complexqa import numcore as nc
from complexqa import trainer as T
from complexqa.errors import DataEmpty, FormatError, NumericError
from complexqa.trainer import Example, OptimState, TrainConfig

import oracles
from conftest import random_graph

SMALL = M.ModelConfig(hidden_dim=16, num_heads=2, num_layers=1, readout_hidden=8)


def dataset(n, seed, sizes=(6, 10)):
    r = np.random.default_rng(seed)
    return [Example(random_graph(int(r.integers(*sizes)), 4, r, decoy_id=f"g{i}"), float(r.uniform()))
            for i in range(n)]


def scalar_store(value):
    store = nc.ParamStore(dtype=np.float64)
    store.add("p", np.array([value]))
    return store


class TestAdamW:
    def test_zero_gradient_no_decay(self, rng):
        store = nc.ParamStore(dtype=np.float64)
        store.add("w", rng.normal(size=(3, 2)))
        before = store["w"].data.copy()
        cfg = TrainConfig(weight_decay=0.0)
        T.adamw_step(store, {"w": np.zeros((3, 2))}, OptimState(), cfg)
        np.testing.assert_array_equal(store["w"].data, before)

    def test_first_step_closed_form(self):
        store = scalar_store(1.0)
        T.adamw_step(store, {"p": np.array([1.0])}, OptimState(), TrainConfig(weight_decay=0.0))
        assert store["p"].data[0] == pytest.approx(1 - 0.005 / (1 + 1e-8), abs=1e-15)

    @pytest.mark.parametrize("wd", [0.0, 0.002, 0.1])
    def test_quadratic_trajectory(self, wd):
        grad = lambda p: 2 * (p - 3.0)  # noqa: E731
        cfg = TrainConfig(lr=0.05, weight_decay=wd)
        ref = oracles.scalar_adamw(0.5, grad, 10, lr=0.05, wd=wd)
        store, state = scalar_store(0.5), OptimState()
        got = [0.5]
        for _ in range(10):
            T.adamw_step(store, {"p": grad(store["p"].data)}, state, cfg)
            got.append(float(store["p"].data[0]))
        np.testing.assert_allclose(got, ref, atol=1e-10, rtol=0)
        assert state.step == 10

    def test_weight_decay_is_decoupled(self):
        # with a zero gradient only the decay term moves the parameter
        store = scalar_store(2.0)
        T.adamw_step(store, {"p": np.array([0.0])}, OptimState(), TrainConfig(lr=0.1, weight_decay=0.5))
        assert store["p"].data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_non_finite_update_changes_nothing(self):
        store = nc.ParamStore(dtype=np.float64)
        store.add("a", np.array([1.0]))
        store.add("b", np.array([1.0]))
        state = OptimState()
        with pytest.raises(NumericError):
            T.adamw_step(store, {"a": np.array([1.0]), "b": np.array([np.nan])}, state, TrainConfig())
        assert store["a"].data[0] == 1.0 and state.step == 0 and not state.m


class TestSchedule:
    @pytest.mark.parametrize("epoch,lr", [(0, 0.005), (15, 0.005), (16, 0.0025), (33, 0.00125)])
    def test_halving(self, epoch, lr):
        assert T.lr_schedule(epoch, TrainConfig()) == pytest.approx(lr, abs=1e-15)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.lr, c.betas, c.weight_decay, c.lr_halve_every, c.early_stop_patience) == (
            0.005, (0.9, 0.999), 0.002, 16, 15)
        assert (c.batch_size, c.grad_accum_steps) == (8, 4)

    @pytest.mark.parametrize("kw", [dict(lr=-1), dict(early_stop_patience=0), dict(batch_size=0),
                                    dict(betas=(0.9, 1.0)), dict(eps=0)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_round_trip(self):
        c = TrainConfig(lr=0.01, betas=[0.8, 0.99], seed=4)
        assert TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c

    def test_toml_sections_and_top_level(self, tmp_path, monkeypatch):
        monkeypatch.delenv("COMPLEXQA_SEED", raising=False)
        p = tmp_path / "c.toml"
        p.write_text('max_epochs = 7\n[model]\nhidden_dim = 32\nnum_heads = 4\n[train]\nlr = 0.001\nseed = 3\n')
        mc, tc, _ = T.load_config(p)
        assert (mc.hidden_dim, mc.num_heads, tc.lr, tc.seed, tc.max_epochs) == (32, 4, 0.001, 3, 7)

    def test_json_and_env_seed(self, tmp_path, monkeypatch):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"gate_mode": "none", "seed": 1}))
        monkeypatch.setenv("COMPLEXQA_SEED", "42")
        mc, tc, _ = T.load_config(p)
        assert mc.gate_mode == "none" and tc.seed == 42

    @pytest.mark.parametrize("text", ["lr = 0.1\nlearning_rate = 2\n", "[train]\nfoo = 1\n", "lr = \n",
                                      "[model]\nhidden_dim = 30\n"])
    def test_bad_files(self, tmp_path, text):
        p = tmp_path / "c.toml"
        p.write_text(text)
        with pytest.raises(FormatError):
            T.load_config(p)


class TestAccumulation:
    def test_micro_batches_match_one_batch(self):
        # four copies of the same eight graphs: batch statistics coincide, so
        # accumulated gradients must equal the single-batch gradient
        config = M.ModelConfig(hidden_dim=16, num_heads=2, num_layers=1, readout_hidden=8,
                               ggt_dropout=0.0, readout_dropout=0.0)
        data = dataset(8, 0)
        params = M.init_params(config, seed=1, dtype=np.float64)
        params.zero_grad()
        T.accumulate_gradients([data] * 4, params, config, update_stats=False)
        split = {k: v.copy() for k, v in params.grads().items()}
        params.zero_grad()
        T.accumulate_gradients([data * 4], params, config, update_stats=False)
        whole = params.grads()
        for name in whole:
            np.testing.assert_allclose(split[name], whole[name], atol=1e-5, rtol=0, err_msg=name)

    def test_uneven_chunks_weighted_by_size(self):
        config = M.ModelConfig(hidden_dim=16, num_heads=2, num_layers=1, readout_hidden=8,
                               ggt_dropout=0.0, readout_dropout=0.0)
        data = dataset(6, 1)
        params = M.init_params(config, seed=2, dtype=np.float64)
        a, b = data[:4], data[4:]
        params.zero_grad()
        losses = T.accumulate_gradients([a, b], params, config, update_stats=False)
        got = params.grads()
        refs = []
        for chunk in (a, b):
            params.zero_grad()
            refs.append((T.accumulate_gradients([chunk], params, config, update_stats=False),
                         {k: v.copy() for k, v in params.grads().items()}))
        assert losses[0] == pytest.approx((4 * refs[0][0][0] + 2 * refs[1][0][0]) / 6)
        for name in got:
            np.testing.assert_allclose(got[name], (4 * refs[0][1][name] + 2 * refs[1][1][name]) / 6, atol=1e-12)


@pytest.fixture(scope="module")
def data_splits():
    return dataset(12, 10), dataset(6, 11)


class TestTrain:
    def test_zero_lr_frozen_bn_keeps_validation_constant(self, data_splits):
        tr, va = data_splits
        res = T.train(tr, va, SMALL, TrainConfig(lr=0.0, freeze_bn=True, max_epochs=4, batch_size=4,
                                                 grad_accum_steps=1))
        vals = [h["val_L"] for h in res.history]
        assert len(set(vals)) == 1

    def test_zero_lr_bn_drift_only(self, data_splits):
        tr, va = data_splits
        res = T.train(tr, va, SMALL, TrainConfig(lr=0.0, max_epochs=3, batch_size=4, grad_accum_steps=1))
        before = M.init_params(SMALL, seed=0)
        for name, p in before:
            np.testing.assert_array_equal(p.data, res.params[name].data)

    def test_early_stop_after_patience(self, data_splits):
        tr, va = data_splits
        res = T.train(tr, va, SMALL, TrainConfig(lr=0.0, freeze_bn=True, max_epochs=100, batch_size=6))
        assert res.stopped_early
        assert res.best_epoch == 0
        assert len(res.history) == 1 + 15

    def test_deterministic(self, data_splits):
        tr, va = data_splits
        cfg = TrainConfig(max_epochs=3, batch_size=4, grad_accum_steps=2, seed=5)
        a = T.train(tr, va, SMALL, cfg)
        b = T.train(tr, va, SMALL, cfg)
        assert a.history == b.history
        for name, p in a.params:
            assert p.data.tobytes() == b.params[name].data.tobytes()

    def test_seed_changes_run(self, data_splits):
        tr, va = data_splits
        a = T.train(tr, va, SMALL, TrainConfig(max_epochs=2, batch_size=4, seed=1))
        b = T.train(tr, va, SMALL, TrainConfig(max_epochs=2, batch_size=4, seed=2))
        assert a.history != b.history

    def test_outputs_and_checkpoint_round_trip(self, data_splits, tmp_path):
        tr, va = data_splits
        res = T.train(tr, va, SMALL, TrainConfig(max_epochs=4, batch_size=4, grad_accum_steps=2), out_dir=tmp_path)
        rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
        assert tuple(rows[0]) == T.METRIC_COLUMNS and len(rows) == len(res.history)
        assert [int(r["epoch"]) for r in rows] == list(range(len(rows)))
        assert int(rows[0]["optimizer_steps"]) == 2  # 3 micro-batches, accumulation 2
        params, config, header = M.load_checkpoint(tmp_path / "best.ckpt")
        assert config == SMALL and header["extra"]["epoch"] == res.best_epoch
        val = T.evaluate_loss(va, params, config)[0]
        assert val == pytest.approx(res.best_val_loss, abs=1e-6)
        assert res.best_val_loss == min(h["val_L"] for h in res.history)

    def test_selection_without_validation(self, data_splits):
        tr, _ = data_splits
        res = T.train(tr, [], SMALL, TrainConfig(max_epochs=3, batch_size=6))
        assert all(h["val_L"] is None for h in res.history)
        assert res.best_val_loss == min(h["train_eval_L"] for h in res.history)

    def test_target_loss_stops(self, data_splits):
        tr, va = data_splits
        res = T.train(tr, va, SMALL, TrainConfig(max_epochs=10, batch_size=6, target_train_loss=10.0))
        assert len(res.history) == 1

    def test_numeric_error_keeps_last_good(self, data_splits, tmp_path, monkeypatch):
        tr, va = data_splits
        real = T.adamw_step

        def failing(params, grads, state, config, lr=None):
            if state.step >= 5:
                raise NumericError("injected")
            return real(params, grads, state, config, lr=lr)

        monkeypatch.setattr(T, "adamw_step", failing)
        res = T.train(tr, va, SMALL, TrainConfig(max_epochs=10, batch_size=4, grad_accum_steps=1),
                      out_dir=tmp_path)
        assert res.aborted and "injected" in res.error
        assert len(res.history) == 1 and res.best_epoch == 0
        saved, _, _ = M.load_checkpoint(tmp_path / "best.ckpt")
        for name, p in res.params:
            np.testing.assert_array_equal(saved[name].data, p.data)

    def test_empty_training_set(self):
        with pytest.raises(DataEmpty):
            T.train([], [], SMALL, TrainConfig())
        with pytest.raises(DataEmpty):
            T.evaluate_loss([], M.init_params(SMALL), SMALL)

    def test_training_reduces_loss(self, data_splits):
        tr, _ = data_splits
        res = T.train(tr, [], SMALL, TrainConfig(max_epochs=15, batch_size=4, grad_accum_steps=1))
        first, last = res.history[0]["train_eval_L"], res.best_val_loss
        assert last < first


@given(st.integers(0, 200), st.integers(1, 40))
def test_schedule_is_nonincreasing(epoch, every):
    cfg = TrainConfig(lr_halve_every=every)
    assert T.lr_schedule(epoch + 1, cfg) <= T.lr_schedule(epoch, cfg)
    assert T.lr_schedule(epoch, cfg) == pytest.approx(0.005 / 2 ** (epoch // every))


@given(st.floats(-5, 5), st.floats(-5, 5))
def test_adamw_first_step_moves_against_gradient(p, g):
    store = scalar_store(p)
    T.adamw_step(store, {"p": np.array([g])}, OptimState(), TrainConfig(weight_decay=0.0))
    step = store["p"].data[0] - p
    if abs(g) > 1e-6:
        assert math.copysign(1, step) == -math.copysign(1, g)
        assert abs(step) == pytest.approx(0.005, rel=1e-3)
