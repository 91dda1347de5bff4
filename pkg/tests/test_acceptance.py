"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary lines are
printed at the end of the session.
"""
import itertools
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, TINY_CONFIG
from oracles import plain_lstm, savgol_reference
from rulforge import tensor as T
from rulforge.cli import main
from rulforge.dataset import (RUL_SCALE, CellHistory, MinMaxScaler, Sample, apply_scaler, fit_scaler,
                              load_cells, make_dataset, stack_features, stack_labels, write_cells)
from rulforge.errors import ConfigError, ContractError, ParseError, WindowBoundsError
from rulforge.metrics import evaluate, mape, r2, records_from_arrays, rmse
from rulforge.model import GATES, ModelConfig, block_of, init_params, model_forward, ode_evolve, odelstm_block, predict
from rulforge.preprocess import (PrepConfig, capacity_derivative_tracking, savgol_smooth, selected_cycles,
                                 statistical_features)
from rulforge.synth import SynthConfig, synthesize_cells
from rulforge.tensor import Tensor, grad_check, grad_check_params
from rulforge.training import (TRANSFER_CASES, DatasetSplit, FreezeMask, SampleCache, TrainConfig, check_trainable,
                               run_case, train_one, transfer_finetune)


class Verdict:
    def __init__(self):
        self.failures = []
        self.notes = []

    def check(self, ok, message):
        if not ok:
            self.failures.append(message)
        return ok

    def note(self, text):
        self.notes.append(text)


@contextmanager
def criterion(number, title, budget_s=None):
    v = Verdict()
    t0 = time.perf_counter()
    try:
        yield v
    except Exception as exc:
        v.failures.append(f"{type(exc).__name__}: {exc}")
    elapsed = time.perf_counter() - t0
    if budget_s is not None:
        v.check(elapsed < budget_s, f"took {elapsed:.1f}s, budget {budget_s}s")
    status = "FAIL" if v.failures else "PASS"
    detail = "; ".join(v.failures or v.notes)
    line = f"criterion {number}: {status} {title} ({elapsed:.1f}s) {detail}".rstrip()
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert not v.failures, line


TINY = ModelConfig(H=2, alstm_hidden=4, odelstm_hidden=8)


def test_criterion_1_gradients():
    with criterion(1, "gradient correctness", budget_s=60) as v:
        worst_prim, worst_model = 0.0, 0.0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            x = rng.normal(size=(2, 3, 4))
            y = Tensor(rng.normal(size=(2, 3, 4)))
            pos = rng.uniform(0.5, 2.0, (2, 3, 4))
            kinked = rng.uniform(0.1, 2.0, (2, 3, 4)) * rng.choice([-1.0, 1.0], (2, 3, 4))
            w = rng.normal(size=(5, 3, 3))
            b = rng.normal(size=5)
            g, beta = rng.uniform(0.5, 2, 3), rng.normal(size=3)
            B = Tensor(rng.normal(size=(4, 2)))
            stats = (np.zeros(3), np.ones(3))
            checks = [
                (lambda v_: v_ + y, x), (lambda v_: v_ - y, x), (lambda v_: v_ * y, x),
                (lambda v_: y / (T.square(v_) + 1.0), x), (T.neg, x), (T.square, x), (T.exp, x),
                (T.log, pos), (T.sqrt, pos), (lambda v_: v_ @ B, x),
                (lambda v_: T.tensor_sum(v_, axis=1), x), (lambda v_: T.mean(v_, axis=0), x),
                (lambda v_: T.reshape(v_, (4, 6)), x), (lambda v_: T.transpose(v_, (2, 0, 1)), x),
                (lambda v_: v_[:, 1:, ::2], x), (lambda v_: T.concat([v_, y], axis=2), x),
                (lambda v_: T.stack([v_, y], axis=0), x), (T.sigmoid, x), (T.tanh, x), (T.gelu, x),
                (T.relu, kinked), (T.leaky_relu, kinked), (T.hardswish, kinked),
                (lambda v_: T.softmax(v_, axis=-1), x),
                (lambda v_: T.dropout(v_, 0.3, True, np.random.default_rng(seed)), x),
                (lambda v_: T.conv1d(v_, Tensor(w), Tensor(b)), x),
                (lambda v_: T.conv1d(Tensor(x), v_, Tensor(b)), w),
                (lambda v_: T.batchnorm1d(v_, Tensor(g), Tensor(beta), *stats, True)[0], x),
                (lambda v_: T.batchnorm1d(Tensor(x), v_, Tensor(beta), *stats, True)[0], g),
            ]
            for f, arg in checks:
                worst_prim = max(worst_prim, grad_check(f, arg))

            xs = rng.uniform(0, 1, (3, 10, 24))
            weights = Tensor(rng.uniform(0.5, 1.5, 3))
            # default LeakyReLU at a step small enough not to straddle its kink,
            # and a smooth activation at the larger step
            for act, step, entries in (("leaky_relu", 1e-5, 2), ("gelu", 1e-4, 1)):
                cfg = ModelConfig(H=2, alstm_hidden=4, odelstm_hidden=8, activation=act)

                def loss(ps, cfg=cfg):
                    out = model_forward(ps, xs, cfg, training=True, rng=np.random.default_rng(seed))
                    return T.tensor_sum(out * weights)

                report = grad_check_params(loss, init_params(cfg, seed, np.float64), step=step,
                                           entries_per_param=entries, rng=np.random.default_rng(seed))
                worst_model = max(worst_model, max(report.values()))
        v.check(worst_prim < 1e-3, f"primitive rel err {worst_prim:.2e}")
        v.check(worst_model < 1e-3, f"full-model rel err {worst_model:.2e}")
        v.note(f"20 seeds, primitive max {worst_prim:.1e}, model max {worst_model:.1e}")


def test_criterion_2_savitzky_golay():
    with criterion(2, "Savitzky-Golay oracle", budget_s=10) as v:
        rng = np.random.default_rng(2)
        worst = 0.0
        for k in range(100):
            n = int(rng.integers(150, 600))
            window = 191 if k < 60 else int(rng.choice([5, 11, 31, 101]))
            x = np.cumsum(rng.normal(size=n)) + rng.normal(0, 0.5, n)
            got = savgol_smooth(x, window, 3)
            ref = savgol_reference(x, window, 3)
            worst = max(worst, np.max(np.abs(got - ref)) / max(1.0, np.max(np.abs(x))))
        v.check(worst <= 1e-9, f"oracle error {worst:.2e}")
        cubic_err = 0.0
        for k in range(20):
            n = int(rng.integers(200, 800))
            t = np.linspace(-1, 1, n)
            poly = np.polynomial.Polynomial(rng.normal(size=int(rng.integers(1, 5))))
            cubic_err = max(cubic_err, np.max(np.abs(savgol_smooth(poly(t), 191, 3) - poly(t))))
        v.check(cubic_err <= 1e-8, f"polynomial reproduction error {cubic_err:.2e}")
        v.note(f"oracle {worst:.1e}, degree<=3 {cubic_err:.1e}")


def test_criterion_3_odelstm_reduction_and_integrators():
    with criterion(3, "ODE-LSTM reduction and integrator orders") as v:
        cfg = ModelConfig()
        p = init_params(cfg, seed=3, dtype=np.float64)
        for k in (0, 1):
            for part in ("weight", "bias"):
                name = f"odelstm.{k}.f_theta.{part}"
                p.set_data(name, np.zeros(p[name].shape))
        hidden = cfg.odelstm_hidden
        wts = [{g: p[f"odelstm.{k}.W_{g}"].data for g in GATES} for k in (0, 1)]
        rng = np.random.default_rng(3)
        mismatched = 0
        for _ in range(50):
            x = rng.normal(size=(int(rng.integers(1, 4)), 10, 24))
            got = odelstm_block(p, Tensor(x), cfg).data
            ref = plain_lstm(plain_lstm([x[:, t] for t in range(10)], wts[0], hidden), wts[1], hidden)[-1]
            mismatched += not np.array_equal(got, ref)
        v.check(mismatched == 0, f"{mismatched}/50 inputs differ from the plain LSTM")

        h = Tensor(np.ones(1))
        field = lambda state, t: state
        err = {n: abs(ode_evolve(h, 0.0, 1.0, field, "euler", n).item() - (math.e - 1)) for n in (16, 32)}
        ratio = err[16] / err[32]
        v.check(1.8 <= ratio <= 2.2, f"Euler error ratio {ratio:.3f}")
        rk4 = abs(ode_evolve(h, 0.0, 1.0, field, "rk4", 16).item() - (math.e - 1))
        v.check(rk4 < 1e-3, f"RK4 error {rk4:.2e}")
        v.check(ode_evolve(h, 0.0, 1.0, field, "euler", 1).item() == 1.0, "Euler single step")
        v.check(abs(ode_evolve(h, 0.0, 1.0, field, "rk4", 1).item() - 41 / 24) < 1e-15, "RK4 single step")
        v.note(f"50/50 bitwise, Euler ratio {ratio:.3f}, RK4@16 err {rk4:.1e}")


def test_criterion_4_preprocessing():
    with criterion(4, "preprocessing determinism and invariants") as v:
        rng = np.random.default_rng(4)
        for _ in range(20):
            I = rng.normal(size=50)
            Q = rng.normal(size=50)
            base = capacity_derivative_tracking(I, Q, 64)
            perm = rng.permutation(50)
            again = capacity_derivative_tracking(I[perm], Q[perm], 64)
            v.check(np.array_equal(base.Qdot, again.Qdot) and np.array_equal(base.grid_I, again.grid_I),
                    "derivative tracking depends on sample order")
            x = rng.normal(size=40)
            a, b = float(rng.uniform(0.1, 5)), float(rng.normal() * 10)
            f, g = np.array(statistical_features(x)), np.array(statistical_features(a * x + b))
            expect = np.array([a * f[0] + b, a * f[1], a * f[2] + b, a * f[3] + b, a * a * f[4], a * f[5] + b])
            v.check(np.allclose(g, expect, rtol=1e-9, atol=1e-9), "statistical features break affine laws")
            g_shift = np.array(statistical_features(x + b))
            v.check(np.allclose(g_shift[[1, 4]], f[[1, 4]], rtol=1e-9, atol=1e-9), "spread changes under shift")

        prep = PrepConfig()
        v.check(prep.min_valid_index == 37, f"minimum valid index {prep.min_valid_index}")
        v.check(selected_cycles(37, prep) == [10, 13, 16, 19, 22, 25, 28, 31, 34, 37], "cycle selection at 37")
        try:
            selected_cycles(36, prep)
            v.check(False, "cycle 36 accepted")
        except WindowBoundsError:
            pass

        cells = synthesize_cells(SynthConfig(n_cells=2, seed=4, life_min=50, life_max=60))
        small = PrepConfig(sample_stride=4)
        s1, s2 = make_dataset(cells, small), make_dataset(cells, small)
        v.check(all(np.array_equal(a.features, b.features) for a, b in zip(s1, s2)), "samples not deterministic")
        v.check(min(s.cycle_index for s in s1) == 37, "first sample is not at cycle 37")

        X = stack_features(s1)
        scaler = MinMaxScaler().fit(X)
        back = scaler.inverse_transform(scaler.transform(X))
        live = scaler.max_ > scaler.min_    # constant dims map to 0 and cannot be inverted
        err = np.max(np.abs(back - X).reshape(-1, 24)[:, live])
        restored = MinMaxScaler.from_dict(scaler.to_dict())
        v.check(err <= 1e-9, f"scaler round trip error {err:.2e}")
        v.check(np.array_equal(restored.transform(X), scaler.transform(X)), "serialised scaler differs")
        v.note(f"min i = 37, scaler round trip {err:.1e}")


@pytest.mark.slow
def test_criterion_5_end_to_end_learning():
    with criterion(5, "end-to-end learning sanity", budget_s=600) as v:
        cells = synthesize_cells(SynthConfig(n_cells=12, seed=0))
        samples = make_dataset(cells, PrepConfig())
        scaler = fit_scaler(samples)
        scaled = apply_scaler(scaler, samples)
        cfg = ModelConfig()
        res = train_one(scaled, (), cfg, TrainConfig(epochs=10, n_runs=1), seed=0)
        pred = predict(res.params, stack_features(scaled), cfg).astype(np.float64)
        y = np.array([s.label_rul for s in samples], dtype=np.float64)
        life = np.array([s.cycle_life for s in samples], dtype=np.float64)
        score = r2(records_from_arrays(y, pred, life))
        drop = 1 - res.final_loss / res.initial_loss
        v.check(score >= 0.9, f"train R2 {score:.4f}")
        v.check(drop >= 0.9, f"train MSE reduction {100 * drop:.1f}%")
        v.check(bool(np.all((pred > 0) & (pred < 3000))), "predictions leave (0, 3000)")
        v.note(f"{len(samples)} samples, R2 {score:.4f}, MSE reduction {100 * drop:.1f}%, "
               f"pred range [{pred.min():.1f}, {pred.max():.1f}]")


def test_criterion_6_transfer_contract():
    with criterion(6, "transfer-learning contract") as v:
        a = synthesize_cells(SynthConfig(n_cells=4, seed=21, life_min=60, life_max=90, prefix="a"))
        b = synthesize_cells(SynthConfig(n_cells=5, seed=22, life_min=55, life_max=95, prefix="b",
                                         variant="multi_discharge"))
        v.check(not ({c.cell_id for c in a} & {c.cell_id for c in b}), "datasets share cells")
        first, second = DatasetSplit(a[:3], a[3:]), DatasetSplit(b[:4], b[4:])
        prep = PrepConfig(sample_stride=6)
        cache = SampleCache(prep)
        quick = TrainConfig(epochs=1, batch_size=16, n_runs=1)
        for cid in TRANSFER_CASES:
            rep = run_case(cid, first, second, prep, TINY, quick, samples=cache)
            v.check(all(np.isfinite(list(rep.metrics.values()))), f"case {cid} metrics not finite")

        pre = init_params(TINY, seed=6)
        target = cache(second.train)
        combos = [frozenset(c) for r in (1, 2, 3) for c in itertools.combinations(("cnn", "alstm", "odelstm"), r)]
        for frozen in combos:
            mask = FreezeMask(**{name: True for name in frozen})
            params, _ = transfer_finetune(pre, fit_scaler(cache(first.train)), target, mask, TINY,
                                          TrainConfig(epochs=2, batch_size=16), seed=1)
            for name in pre.names():
                same = np.array_equal(params[name].data, pre[name].data)
                if block_of(name) in frozen:
                    v.check(same, f"{name} changed with {sorted(frozen)} frozen")
                elif not pre.is_buffer(name) and block_of(name) == "head":
                    v.check(not same, f"head did not train with {sorted(frozen)} frozen")
        for bad in (lambda: FreezeMask.parse("cnn,alstm,odelstm,head"),
                    lambda: check_trainable(frozenset({"cnn", "alstm", "odelstm", "head"}))):
            try:
                bad()
                v.check(False, "freezing every block including the head was accepted")
            except ConfigError:
                pass
        v.note(f"{len(TRANSFER_CASES)} cases, {len(combos)} freeze combinations")


def test_criterion_7_metric_formulas():
    with criterion(7, "metric formulas") as v:
        def near(a, b):
            return abs(a - b) <= 1e-9

        v.check(near(rmse(records_from_arrays([10, 20], [13, 24], [100, 100])), math.sqrt(12.5)), "rmse example")
        v.check(near(mape(records_from_arrays([500, 200], [600, 100], [1000, 1000])), 10.0), "mape example")
        v.check(near(mape(records_from_arrays([0, 0], [5, 15], [100, 100])), 10.0), "mape at end of life")
        v.check(near(r2(records_from_arrays([1, 2, 3], [1, 2, 5], [10, 10, 10])), -1.0), "r2 example")
        v.check(near(r2(records_from_arrays([1, 2, 6], [3, 3, 3], [10, 10, 10])), 0.0), "mean predictor r2")
        # per-record denominator is that record's cycle life, not its true RUL
        m = evaluate(records_from_arrays([100, 50], [150, 0], [200, 500]))
        v.check(near(m["mape_percent"], 100 * (50 / 200 + 50 / 500) / 2), "mape denominator")
        v.note("hand examples within 1e-9")


def test_criterion_8_cli_reproducible(tmp_path):
    with criterion(8, "CLI reproducibility") as v:
        for name in ("d1", "d2"):
            seed = "1" if name == "d1" else "2"
            for rep in ("a", "b"):
                main(["synth", "--cells", "4", "--seed", seed, "--out", str(tmp_path / rep / name),
                      "--life-min", "60", "--life-max", "90", "--prefix", name])
        (tmp_path / "tiny.cfg").write_text(TINY_CONFIG)
        compared = 0
        for rep in ("a", "b"):
            base = tmp_path / rep
            cfg = str(tmp_path / "tiny.cfg")
            commands = [
                ["train", "--data", str(base / "d1"), "--config", cfg, "--out", str(base / "train"), "--seed", "5"],
                ["transfer", "--case", "7.1", "--source", str(base / "d1"), "--target", str(base / "d2"),
                 "--config", cfg, "--out", str(base / "transfer")],
                ["sweep", "--data", str(base / "d1"), "--config", cfg, "--axis", "activation",
                 "--values", "gelu,relu", "--out", str(base / "sweep")],
            ]
            for cmd in commands:
                v.check(main(cmd) == 0, f"{cmd[0]} exited non-zero")
        for rel in ("train/metrics.json", "train/predictions.csv", "transfer/metrics.json",
                    "transfer/predictions.csv", "sweep/sweep.csv", "sweep/activation_gelu/predictions.csv"):
            same = (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
            v.check(same, f"{rel} differs between runs")
            compared += 1
        v.note(f"{compared} output files byte-identical")


def test_criterion_9_scale_bound(tmp_path):
    with criterion(9, "scale-factor bound") as v:
        for life in (3000, 3001, 10_000):
            try:
                CellHistory("x", [], life)
                v.check(False, f"cycle life {life} accepted")
            except ContractError:
                pass
        cells = synthesize_cells(SynthConfig(n_cells=1, seed=9, life_min=50, life_max=60))
        write_cells(cells, tmp_path)
        meta = next(tmp_path.glob("*.meta.csv"))
        header, row = meta.read_text().splitlines()
        fields = row.split(",")
        fields[1] = "3000"
        meta.write_text(f"{header}\n{','.join(fields)}\n")
        try:
            load_cells(tmp_path)
            v.check(False, "loader accepted cycle life 3000")
        except ParseError:
            pass
        labels = stack_labels(make_dataset(synthesize_cells(SynthConfig(n_cells=3, seed=9)),
                                           PrepConfig(sample_stride=7)))
        top = Sample(np.zeros((10, 4, 6)), 2999, "edge", 37, 2999).label_scaled
        v.check(bool(np.all((labels >= 0) & (labels < 1))), "scaled label outside [0, 1)")
        v.check(0 <= top < 1 and top == 2999 / RUL_SCALE, "largest label scales outside [0, 1)")
        v.note(f"{labels.size} labels in [{labels.min():.4f}, {labels.max():.4f}]")
