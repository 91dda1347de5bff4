"""MSE/AdamW training loop, ensemble averaging and the transfer-learning cases."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .dataset import (CellHistory, MinMaxScaler, Sample, apply_scaler, fit_scaler,
                      make_dataset, split_by_median, stack_features, stack_labels)
from .errors import ConfigError, ContractError
from .metrics import evaluate, records_from_arrays
from .model import BLOCKS, ModelConfig, block_of, check_compatible, forward_scaled, init_params, predict
from .preprocess import PrepConfig
from .tensor import ParamStore, Tape, Tensor

logger = logging.getLogger(__name__)

FREEZABLE = ("cnn", "alstm", "odelstm")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 5e-4
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    n_runs: int = 10
    base_seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("weight_decay must be >= 0 and eps > 0")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError("betas must be two values in [0, 1)")
        if self.n_runs < 1:
            raise ConfigError("n_runs must be >= 1")

    @property
    def seeds(self) -> list[int]:
        return [self.base_seed + r for r in range(self.n_runs)]


@dataclass(frozen=True)
class FreezeMask:
    """Blocks excluded from updates. The head cannot be frozen."""

    cnn: bool = False
    alstm: bool = False
    odelstm: bool = False

    @classmethod
    def parse(cls, text: str) -> "FreezeMask":
        names = [n.strip() for n in text.split(",") if n.strip()]
        for n in names:
            if n == "head":
                raise ConfigError("the head block is always trainable and cannot be frozen")
            if n not in FREEZABLE:
                raise ConfigError(f"unknown block {n!r}; freezable blocks are {FREEZABLE}")
        return cls(**{n: True for n in names})

    @property
    def blocks(self) -> frozenset:
        return frozenset(b for b in FREEZABLE if getattr(self, b))

    def __str__(self):
        return ",".join(sorted(self.blocks))


def check_trainable(frozen: frozenset) -> None:
    unknown = set(frozen) - set(BLOCKS)
    if unknown:
        raise ConfigError(f"unknown blocks {sorted(unknown)}")
    if set(BLOCKS) <= set(frozen):
        raise ConfigError("every block is frozen; nothing left to train")


# ---------------------------------------------------------------------------
# loss and optimizer


def mse_loss(pred: Tensor, label) -> Tensor:
    label = label if isinstance(label, Tensor) else Tensor(np.asarray(label, dtype=pred.dtype))
    if pred.shape != label.shape:
        raise ContractError(f"pred shape {pred.shape} != label shape {label.shape}")
    if pred.size == 0:
        raise ContractError("mse of an empty batch")
    return T.mean(T.square(pred - label))


class AdamW:
    """AdamW with decoupled weight decay. State is allocated lazily, per
    parameter, on its first update, so frozen parameters never get any."""

    def __init__(self, cfg: TrainConfig = TrainConfig()):
        self.lr = cfg.learning_rate
        self.wd = cfg.weight_decay
        self.b1, self.b2 = cfg.betas
        self.eps = cfg.eps
        self.state: dict[str, dict] = {}

    def step(self, params: ParamStore, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if not params.is_trainable(name):
                continue
            p = params[name].data
            if g.shape != p.shape:
                raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {"step": 0, "m": np.zeros_like(p), "v": np.zeros_like(p)}
            st["step"] += 1
            t = st["step"]
            st["m"] = self.b1 * st["m"] + (1.0 - self.b1) * g
            st["v"] = self.b2 * st["v"] + (1.0 - self.b2) * g * g
            m_hat = st["m"] / (1.0 - self.b1 ** t)
            v_hat = st["v"] / (1.0 - self.b2 ** t)
            new = p - self.lr * self.wd * p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            params.set_data(name, new.astype(p.dtype, copy=False))


def adamw_step(params: ParamStore, grads: dict, opt: AdamW) -> None:
    opt.step(params, grads)


# ---------------------------------------------------------------------------
# single run


@dataclass
class TrainResult:
    params: ParamStore
    seed: int
    initial_loss: float           # eval-mode train MSE before any update
    losses: list[float] = field(default_factory=list)      # mean train batch loss per epoch
    val_losses: list[float] = field(default_factory=list)  # eval-mode val MSE per epoch
    final_loss: float = float("nan")                       # eval-mode train MSE after training


def _eval_mse(params: ParamStore, X: np.ndarray, y: np.ndarray, cfg: ModelConfig) -> float:
    pred = predict(params, X, cfg) / cfg.output_scale
    return float(np.mean((pred.astype(np.float64) - y) ** 2))


def _arrays(samples: Sequence[Sample], dtype) -> tuple[np.ndarray, np.ndarray]:
    return stack_features(samples).astype(dtype), stack_labels(samples).astype(dtype)


def train_one(train: Sequence[Sample], val: Sequence[Sample] = (), model_cfg: ModelConfig = ModelConfig(),
              train_cfg: TrainConfig = TrainConfig(), seed: int = 0, init: ParamStore | None = None,
              frozen: frozenset = frozenset(), dtype=np.float32) -> TrainResult:
    """Train one model on already scaled samples."""
    if not train:
        raise ContractError("empty training set")
    frozen = frozenset(frozen)
    check_trainable(frozen)
    init_seq, shuffle_seq, drop_seq = np.random.SeedSequence(seed).spawn(3)
    X, y = _arrays(train, dtype if init is None else init["head.weight"].dtype)
    if init is None:
        params = init_params(model_cfg, int(init_seq.generate_state(1)[0]), dtype)
        # start the output at the mean label so early updates do not
        # overshoot into the flat tail of the sigmoid
        m = float(np.clip(y.astype(np.float64).mean(), 1e-4, 1 - 1e-4))
        params.set_data("head.bias", np.full(params["head.bias"].shape, np.log(m / (1 - m))))
    else:
        check_compatible(init, model_cfg)
        params = init.copy()
    for name in params.param_names():
        params.set_trainable(name, block_of(name) not in frozen)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    drop_rng = np.random.default_rng(drop_seq)

    Xv, yv = _arrays(val, X.dtype) if val else (None, None)
    result = TrainResult(params, seed, _eval_mse(params, X, y, model_cfg))
    opt = AdamW(train_cfg)
    n, bs = len(X), train_cfg.batch_size
    for epoch in range(train_cfg.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            with Tape():
                pred = forward_scaled(params, X[idx], model_cfg, training=True, rng=drop_rng, frozen=frozen)
                loss = mse_loss(pred, y[idx])
                grads = T.backward(loss, params)
            opt.step(params, grads)
            total += float(loss.data) * len(idx)
        result.losses.append(total / n)
        if Xv is not None:
            result.val_losses.append(_eval_mse(params, Xv, yv, model_cfg))
        logger.info("seed %d epoch %d/%d: train loss %.6g%s", seed, epoch + 1, train_cfg.epochs,
                    result.losses[-1],
                    f", val loss {result.val_losses[-1]:.6g}" if result.val_losses else "")
    result.final_loss = _eval_mse(params, X, y, model_cfg)
    for name in params.param_names():
        params.set_trainable(name, True)
    return result


# ---------------------------------------------------------------------------
# ensembles


def max_workers() -> int:
    raw = os.environ.get("RULFORGE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"RULFORGE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("RULFORGE_THREADS must be >= 1")
    return n


def _parallel_map(fn, items: list) -> list:
    workers = min(max_workers(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def train_ensemble(train: Sequence[Sample], val: Sequence[Sample] = (), model_cfg: ModelConfig = ModelConfig(),
                   train_cfg: TrainConfig = TrainConfig()) -> list[TrainResult]:
    return _parallel_map(lambda s: train_one(train, val, model_cfg, train_cfg, s), train_cfg.seeds)


def average_predictions(runs: Sequence[ParamStore], features: np.ndarray, model_cfg: ModelConfig) -> np.ndarray:
    if not runs:
        raise ContractError("no runs to average")
    preds = np.stack([predict(p, features, model_cfg).astype(np.float64) for p in runs])
    return preds.mean(axis=0)


def ensemble_predict(train: Sequence[Sample], test: Sequence[Sample], model_cfg: ModelConfig = ModelConfig(),
                     train_cfg: TrainConfig = TrainConfig()) -> np.ndarray:
    """Mean eval-mode prediction (in cycles) of ``n_runs`` independently seeded models."""
    runs = train_ensemble(train, (), model_cfg, train_cfg)
    return average_predictions([r.params for r in runs], stack_features(test), model_cfg)


# ---------------------------------------------------------------------------
# transfer learning


def transfer_finetune(pretrained: ParamStore, scaler: MinMaxScaler, target_train: Sequence[Sample],
                      freeze: FreezeMask = FreezeMask(alstm=True), model_cfg: ModelConfig = ModelConfig(),
                      train_cfg: TrainConfig = TrainConfig(), seed: int = 0) -> tuple[ParamStore, MinMaxScaler]:
    """Fine-tune a pretrained model on unscaled target samples.

    A fresh scaler is fitted on the target data. With zero epochs nothing is
    trained and the pretrained parameters and scaler are returned as-is.
    """
    check_compatible(pretrained, model_cfg)
    frozen = freeze.blocks
    check_trainable(frozen)
    if train_cfg.epochs == 0:
        return pretrained.copy(), scaler
    target_scaler = fit_scaler(target_train)
    result = train_one(apply_scaler(target_scaler, target_train), (), model_cfg, train_cfg, seed,
                       init=pretrained, frozen=frozen)
    return result.params, target_scaler


@dataclass(frozen=True)
class TransferCase:
    case_id: str
    test: str          # "first" | "second"
    pretrain: str      # dataset whose full training split is used first
    finetune: str      # "none" | "upper" | "lower" | "all" (of the test dataset's training split)

    @property
    def direct(self) -> bool:
        return self.pretrain == self.test and self.finetune == "none"


TRANSFER_CASES = {c.case_id: c for c in (
    TransferCase("1", "first", "first", "none"),
    TransferCase("2", "first", "second", "none"),
    TransferCase("3.1", "first", "second", "upper"),
    TransferCase("3.2", "first", "second", "lower"),
    TransferCase("4", "first", "second", "all"),
    TransferCase("5", "second", "second", "none"),
    TransferCase("6", "second", "first", "none"),
    TransferCase("7.1", "second", "first", "upper"),
    TransferCase("7.2", "second", "first", "lower"),
    TransferCase("8", "second", "first", "all"),
)}


def get_case(case_id) -> TransferCase:
    key = str(case_id)
    if key not in TRANSFER_CASES:
        raise ConfigError(f"unknown case {case_id!r}; choose from {sorted(TRANSFER_CASES)}")
    return TRANSFER_CASES[key]


@dataclass
class DatasetSplit:
    train: list[CellHistory]
    test: list[CellHistory]


def finetune_cells(case: TransferCase, target: DatasetSplit) -> list[CellHistory]:
    if case.finetune == "none":
        return []
    if case.finetune == "all":
        return list(target.train)
    lower, upper = split_by_median(target.train)
    return upper if case.finetune == "upper" else lower


class SampleCache:
    """Memoizes per-cell samples so repeated cases skip preprocessing."""

    def __init__(self, prep: PrepConfig):
        self.prep = prep
        self._cache: dict[int, list[Sample]] = {}

    def __call__(self, cells: Sequence[CellHistory]) -> list[Sample]:
        out = []
        for cell in cells:
            if id(cell) not in self._cache:
                self._cache[id(cell)] = make_dataset([cell], self.prep)
            out.extend(self._cache[id(cell)])
        return out


@dataclass
class CaseReport:
    case_id: str
    metrics: dict
    predictions: list[tuple]    # (cell_id, cycle, rul_true, rul_pred)
    seeds: list[int]
    losses: list[list[float]]

    def to_dict(self, config: dict | None = None) -> dict:
        d = {"case_id": self.case_id, **self.metrics, "n_test_samples": len(self.predictions),
             "seeds": self.seeds}
        if config is not None:
            d["config"] = config
        return d


def evaluate_samples(test: Sequence[Sample], pred: np.ndarray) -> tuple[dict, list[tuple]]:
    y = np.array([s.label_rul for s in test], dtype=np.float64)
    life = np.array([s.cycle_life for s in test], dtype=np.float64)
    metrics = evaluate(records_from_arrays(y, pred, life, [s.cell_id for s in test]))
    rows = [(s.cell_id, s.cycle_index, int(s.label_rul), float(p)) for s, p in zip(test, pred)]
    return metrics, rows


def run_direct(train_cells: Sequence[CellHistory], test_cells: Sequence[CellHistory],
               prep: PrepConfig = PrepConfig(), model_cfg: ModelConfig = ModelConfig(),
               train_cfg: TrainConfig = TrainConfig(), samples: SampleCache | None = None,
               val_cells: Sequence[CellHistory] = ()):
    """Train an ensemble on ``train_cells`` and evaluate it on ``test_cells``.

    Validation cells only feed the logged validation loss.
    Returns ``(metrics, prediction rows, runs, scaler)``.
    """
    samples = samples or SampleCache(prep)
    train, test = samples(train_cells), samples(test_cells)
    if not train or not test:
        raise ContractError("training and test sets must both yield samples")
    scaler = fit_scaler(train)
    val = apply_scaler(scaler, samples(val_cells))
    runs = train_ensemble(apply_scaler(scaler, train), val, model_cfg, train_cfg)
    pred = average_predictions([r.params for r in runs], stack_features(apply_scaler(scaler, test)), model_cfg)
    metrics, rows = evaluate_samples(test, pred)
    return metrics, rows, runs, scaler


def run_case(case, first: DatasetSplit, second: DatasetSplit, prep: PrepConfig = PrepConfig(),
             model_cfg: ModelConfig = ModelConfig(), train_cfg: TrainConfig = TrainConfig(),
             finetune_cfg: TrainConfig | None = None, freeze: FreezeMask = FreezeMask(alstm=True),
             samples: SampleCache | None = None) -> CaseReport:
    case = case if isinstance(case, TransferCase) else get_case(case)
    check_trainable(freeze.blocks)
    finetune_cfg = finetune_cfg or train_cfg
    datasets = {"first": first, "second": second}
    source, target = datasets[case.pretrain], datasets[case.test]
    samples = samples or SampleCache(prep)

    src_train = samples(source.train)
    ft_train = samples(finetune_cells(case, target))
    test = samples(target.test)
    if not src_train or not test:
        raise ContractError(f"case {case.case_id}: pretraining and test sets must both yield samples")
    if case.finetune != "none" and not ft_train:
        raise ContractError(f"case {case.case_id}: fine-tuning set yields no samples")

    src_scaler = fit_scaler(src_train)
    src_scaled = apply_scaler(src_scaler, src_train)

    def one_run(seed: int):
        res = train_one(src_scaled, (), model_cfg, train_cfg, seed)
        params, scaler, losses = res.params, src_scaler, list(res.losses)
        if case.finetune != "none":
            params, scaler = transfer_finetune(params, src_scaler, ft_train, freeze, model_cfg,
                                               finetune_cfg, seed + 7919)
        feats = stack_features(apply_scaler(scaler, test))
        return predict(params, feats, model_cfg).astype(np.float64), losses

    outs = _parallel_map(one_run, train_cfg.seeds)
    pred = np.stack([p for p, _ in outs]).mean(axis=0)
    metrics, rows = evaluate_samples(test, pred)
    logger.info("case %s: rmse %.3f r2 %.4f mape %.3f%%", case.case_id, metrics["rmse"],
                metrics["r2"], metrics["mape_percent"])
    return CaseReport(case.case_id, metrics, rows, train_cfg.seeds, [l for _, l in outs])
