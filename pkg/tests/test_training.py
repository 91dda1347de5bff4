import itertools

import numpy as np
import pytest

from rulforge import tensor as T
from rulforge.dataset import Sample, apply_scaler, fit_scaler, make_dataset
from rulforge.errors import ConfigError, ContractError
from rulforge.model import BLOCKS, ModelConfig, block_of, init_params, predict
from rulforge.preprocess import PrepConfig
from rulforge.synth import SynthConfig, synthesize_cells
from rulforge.tensor import ParamStore, Tape, Tensor
from rulforge.training import (TRANSFER_CASES, AdamW, DatasetSplit, FreezeMask, SampleCache, TrainConfig,
                               check_trainable, ensemble_predict, finetune_cells, get_case, max_workers,
                               mse_loss, run_case, train_ensemble, train_one, transfer_finetune)

PREP = PrepConfig(sample_stride=6)


def learnable_samples(n, seed=0):
    # the label is a fixed function of the inputs
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        x = rng.uniform(0, 1, (10, 4, 6))
        out.append(Sample(x, int(2400 * x[:, 0, :].mean() ** 2), "c", k + 37, 2500))
    return out


def random_samples(n, seed=0, cell="c"):
    rng = np.random.default_rng(seed)
    return [Sample(rng.uniform(0, 1, (10, 4, 6)), int(rng.integers(10, 2000)), cell, k + 37, 2500)
            for k in range(n)]


@pytest.fixture(scope="module")
def two_datasets():
    a = synthesize_cells(SynthConfig(n_cells=4, seed=11, life_min=60, life_max=90))
    b = synthesize_cells(SynthConfig(n_cells=5, seed=12, life_min=55, life_max=95, variant="multi_discharge"))
    return DatasetSplit(a[:3], a[3:]), DatasetSplit(b[:4], b[4:])


class TestLoss:
    def test_hand_value(self):
        assert mse_loss(Tensor(np.array([0.1, 0.2])), [0.4, 0.2]).item() == pytest.approx(0.045)
        assert mse_loss(Tensor(np.zeros(2)), [0.1, 0.3]).item() == pytest.approx(0.05, abs=1e-15)

    def test_gradient(self):
        p, y = np.array([0.3, 0.9, 0.1]), np.array([0.5, 0.5, 0.5])
        ps = ParamStore()
        ps.add("p", p)
        with Tape():
            loss = mse_loss(ps["p"], y)
        np.testing.assert_allclose(T.backward(loss, ps)["p"], 2 * (p - y) / 3)

    def test_contract(self):
        with pytest.raises(ContractError):
            mse_loss(Tensor(np.zeros(3)), np.zeros(2))
        with pytest.raises(ContractError):
            mse_loss(Tensor(np.zeros(0)), np.zeros(0))


class TestAdamW:
    def _store(self, value=1.0, trainable=True):
        ps = ParamStore()
        ps.add("w", np.array([value]), trainable=trainable)
        return ps

    @pytest.mark.parametrize("wd,expect", [(0.0, 0.9995), (0.01, 0.999495)])
    def test_first_step(self, wd, expect):
        ps = self._store()
        AdamW(TrainConfig(weight_decay=wd)).step(ps, {"w": np.array([3.7])})
        assert ps["w"].data[0] == pytest.approx(expect, abs=1e-10)   # eps leaves ~1e-12

    def test_zero_gradient_no_decay_is_noop(self):
        ps = self._store(0.42)
        AdamW(TrainConfig(weight_decay=0.0)).step(ps, {"w": np.zeros(1)})
        assert ps["w"].data[0] == 0.42

    def test_decay_is_decoupled(self):
        # zero gradient still shrinks the weight by lr * wd
        ps = self._store(2.0)
        AdamW(TrainConfig(weight_decay=0.1, learning_rate=0.01)).step(ps, {"w": np.zeros(1)})
        assert ps["w"].data[0] == pytest.approx(2.0 * (1 - 0.001))

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            AdamW().step(self._store(), {"w": np.zeros(2)})

    def test_frozen_never_gets_state(self):
        ps = self._store(trainable=False)
        opt = AdamW()
        opt.step(ps, {"w": np.ones(1)})
        assert ps["w"].data[0] == 1.0 and opt.state == {}

    def test_bias_correction_over_steps(self):
        ps = self._store()
        opt = AdamW(TrainConfig(weight_decay=0.0))
        for _ in range(5):
            opt.step(ps, {"w": np.array([0.2])})
        # a constant gradient moves by exactly lr per step after bias correction
        assert ps["w"].data[0] == pytest.approx(1 - 5 * 5e-4, abs=1e-9)


class TestConfigs:
    @pytest.mark.parametrize("kw", [dict(epochs=-1), dict(batch_size=0), dict(learning_rate=0),
                                    dict(betas=(0.9, 1.0)), dict(n_runs=0), dict(eps=0)])
    def test_train_config_rejects(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_seeds(self):
        assert TrainConfig(n_runs=3, base_seed=5).seeds == [5, 6, 7]

    def test_freeze_parse(self):
        assert FreezeMask.parse("alstm, cnn").blocks == {"alstm", "cnn"}
        assert str(FreezeMask.parse("odelstm,cnn")) == "cnn,odelstm"
        assert FreezeMask.parse("").blocks == frozenset()
        for bad in ("head", "lstm", "cnn,head"):
            with pytest.raises(ConfigError):
                FreezeMask.parse(bad)

    def test_all_blocks_frozen(self):
        with pytest.raises(ConfigError):
            check_trainable(frozenset(BLOCKS))
        check_trainable(frozenset({"cnn", "alstm", "odelstm"}))

    def test_threads_env(self, monkeypatch):
        monkeypatch.setenv("RULFORGE_THREADS", "3")
        assert max_workers() == 3
        monkeypatch.setenv("RULFORGE_THREADS", "zero")
        with pytest.raises(ConfigError):
            max_workers()


class TestTrainOne:
    def test_deterministic(self, tiny_cfg, fast_train):
        data = random_samples(40)
        a = train_one(data, (), tiny_cfg, fast_train, seed=4)
        b = train_one(data, (), tiny_cfg, fast_train, seed=4)
        for name in a.params.names():
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
        assert a.losses == b.losses

    def test_seed_matters(self, tiny_cfg, fast_train):
        data = random_samples(40)
        a = train_one(data, (), tiny_cfg, fast_train, seed=0)
        b = train_one(data, (), tiny_cfg, fast_train, seed=1)
        assert not np.array_equal(a.params["head.weight"].data, b.params["head.weight"].data)

    def test_head_starts_at_mean_label(self, tiny_cfg):
        data = random_samples(20, seed=2)
        res = train_one(data, (), tiny_cfg, TrainConfig(epochs=0, n_runs=1))
        mean = np.mean([s.label_scaled for s in data])
        assert 1 / (1 + np.exp(-res.params["head.bias"].data[0])) == pytest.approx(mean, rel=1e-5)

    def test_loss_history(self, tiny_cfg):
        data = learnable_samples(64, seed=1)
        res = train_one(data, learnable_samples(16, seed=9), tiny_cfg,
                        TrainConfig(epochs=10, batch_size=16, learning_rate=5e-3))
        assert len(res.losses) == 10 and len(res.val_losses) == 10
        assert res.losses[-1] < res.losses[0]

    def test_overfits_micro_set(self, tiny_cfg):
        data = random_samples(32, seed=5)
        cfg = ModelConfig(H=2, alstm_hidden=4, odelstm_hidden=8, dropout=0.0)
        res = train_one(data, (), cfg, TrainConfig(epochs=200, batch_size=32, learning_rate=1e-2, weight_decay=0.0))
        assert res.final_loss < 0.01 * res.initial_loss

    @pytest.mark.parametrize("frozen", [frozenset(c) for r in (1, 2, 3) for c in itertools.combinations(
        ("cnn", "alstm", "odelstm"), r)])
    def test_freeze_contract(self, tiny_cfg, frozen):
        data = random_samples(20)
        init = init_params(tiny_cfg, seed=1)
        res = train_one(data, (), tiny_cfg, TrainConfig(epochs=1, batch_size=8), init=init, frozen=frozen)
        for name in init.param_names():
            same = np.array_equal(res.params[name].data, init[name].data)
            assert same == (block_of(name) in frozen), name
        for name in init.names():
            if init.is_buffer(name) and block_of(name) in frozen:
                np.testing.assert_array_equal(res.params[name].data, init[name].data)
        assert all(res.params.is_trainable(n) for n in res.params.param_names())

    def test_init_not_mutated(self, tiny_cfg):
        init = init_params(tiny_cfg, seed=1)
        before = init["head.weight"].data.copy()
        train_one(random_samples(10), (), tiny_cfg, TrainConfig(epochs=1), init=init)
        np.testing.assert_array_equal(init["head.weight"].data, before)

    def test_empty(self, tiny_cfg):
        with pytest.raises(ContractError):
            train_one([], (), tiny_cfg)


class TestEnsemble:
    def test_single_run_equals_train_one(self, tiny_cfg, fast_train):
        train, test = random_samples(30), random_samples(5, seed=3)
        single = train_one(train, (), tiny_cfg, fast_train, seed=0).params
        np.testing.assert_array_equal(ensemble_predict(train, test, tiny_cfg, fast_train),
                                      predict(single, np.stack([s.features for s in test]), tiny_cfg))

    def test_threads_do_not_change_results(self, tiny_cfg, monkeypatch):
        cfg = TrainConfig(epochs=1, batch_size=16, n_runs=2)
        train = random_samples(20)
        serial = train_ensemble(train, (), tiny_cfg, cfg)
        monkeypatch.setenv("RULFORGE_THREADS", "2")
        threaded = train_ensemble(train, (), tiny_cfg, cfg)
        for a, b in zip(serial, threaded):
            np.testing.assert_array_equal(a.params["head.weight"].data, b.params["head.weight"].data)


class TestTransfer:
    def test_table_complete(self):
        assert sorted(TRANSFER_CASES) == ["1", "2", "3.1", "3.2", "4", "5", "6", "7.1", "7.2", "8"]
        assert [c for c, v in TRANSFER_CASES.items() if v.direct] == ["1", "5"]
        assert get_case(3.1).finetune == "upper"
        with pytest.raises(ConfigError):
            get_case("9")

    def test_finetune_subsets(self, small_cells):
        split = DatasetSplit(list(small_cells), [])
        lives = sorted(c.cycle_life for c in small_cells)
        upper = finetune_cells(get_case("7.1"), split)
        lower = finetune_cells(get_case("7.2"), split)
        assert sorted(c.cycle_life for c in upper) == lives[2:]
        assert sorted(c.cycle_life for c in lower) == lives[:2]
        assert finetune_cells(get_case("8"), split) == split.train
        assert finetune_cells(get_case("6"), split) == []

    def test_zero_epoch_finetune_is_identity(self, tiny_cfg):
        pre = init_params(tiny_cfg, seed=2)
        scaler = fit_scaler(random_samples(5))
        params, sc = transfer_finetune(pre, scaler, random_samples(5, seed=1), FreezeMask(alstm=True),
                                       tiny_cfg, TrainConfig(epochs=0))
        assert sc is scaler
        for name in pre.names():
            np.testing.assert_array_equal(params[name].data, pre[name].data)

    def test_finetune_refits_scaler_and_keeps_frozen(self, tiny_cfg):
        pre = init_params(tiny_cfg, seed=2)
        target = random_samples(12, seed=4)
        params, sc = transfer_finetune(pre, fit_scaler(random_samples(5)), target, FreezeMask(alstm=True),
                                       tiny_cfg, TrainConfig(epochs=1, batch_size=4))
        np.testing.assert_array_equal(sc.min_, fit_scaler(target).min_)
        for name in pre.param_names():
            assert np.array_equal(params[name].data, pre[name].data) == (block_of(name) == "alstm")

    def test_every_case_runs(self, two_datasets, tiny_cfg):
        first, second = two_datasets
        cache = SampleCache(PREP)
        cfg = TrainConfig(epochs=1, batch_size=16, n_runs=1)
        for cid in TRANSFER_CASES:
            rep = run_case(cid, first, second, PREP, tiny_cfg, cfg, samples=cache)
            test = first.test if get_case(cid).test == "first" else second.test
            assert len(rep.predictions) == len(cache(test))
            assert set(rep.metrics) == {"rmse", "r2", "mape_percent"}
            assert all(0 < p < 3000 for *_, p in rep.predictions)

    def test_case8_without_finetune_equals_case6(self, two_datasets, tiny_cfg):
        first, second = two_datasets
        cache = SampleCache(PREP)
        cfg = TrainConfig(epochs=1, batch_size=16, n_runs=1)
        six = run_case("6", first, second, PREP, tiny_cfg, cfg, samples=cache)
        eight = run_case("8", first, second, PREP, tiny_cfg, cfg, TrainConfig(epochs=0), samples=cache)
        assert six.predictions == eight.predictions and six.metrics == eight.metrics

    def test_sample_cache_reuses(self, small_cells):
        cache = SampleCache(PREP)
        a = cache(small_cells[:1])
        assert cache(small_cells[:1])[0] is a[0]
        assert len(a) == len(make_dataset(small_cells[:1], PREP))
