"""Hybrid RUL network: CNN -> attentional LSTM branch, ODE-LSTM branch, fused head.

Parameter names::

    cnn.{0,1,2}.weight / .bias / .bn.gamma / .bn.beta
    cnn.{0,1,2}.bn.running_mean / .bn.running_var        (buffers)
    alstm.{0,1}.W_{i,f,o,c} / .b_{i,f,o,c} / .W_a / .U_a / .b_a / .v
    odelstm.{0,1}.W_{i,f,o,c} / .f_theta.weight / .f_theta.bias
    head.weight / head.bias

Inputs are ``(B, seq_len, 4, 6)`` or ``(B, seq_len, 24)`` arrays of scaled
features; the output is the predicted RUL in cycles, ``sigmoid(.) * output_scale``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import ParamStore, Tensor

BLOCKS = ("cnn", "alstm", "odelstm", "head")
INTEGRATORS = ("euler", "midpoint", "heun2", "heun3", "rk4")
RT_MODES = ("first", "all", "none")
GATES = ("i", "f", "o", "c")


@dataclass(frozen=True)
class ModelConfig:
    H: int = 64
    kernel: int = 5
    alstm_hidden: int = 128
    odelstm_hidden: int = 256
    dropout: float = 0.3
    activation: str = "leaky_relu"
    integrator: str = "euler"
    ode_substeps: int = 1
    rt_mode: str = "first"
    output_scale: float = 3000.0
    seq_len: int = 10
    feat_dim: int = 24

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be a positive odd integer, got {self.kernel}")
        if min(self.H, self.alstm_hidden, self.odelstm_hidden, self.seq_len, self.feat_dim) < 1:
            raise ConfigError("sizes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.activation not in T.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.integrator not in INTEGRATORS:
            raise ConfigError(f"unknown integrator {self.integrator!r}; choose from {INTEGRATORS}")
        if self.ode_substeps < 1:
            raise ConfigError("ode_substeps must be >= 1")
        if self.rt_mode not in RT_MODES:
            raise ConfigError(f"unknown rt_mode {self.rt_mode!r}; choose from {RT_MODES}")
        if self.output_scale <= 0:
            raise ConfigError("output_scale must be positive")

    @property
    def cnn_channels(self) -> tuple[int, int, int]:
        return (self.H, 2 * self.H, 4 * self.H)

    def alstm_inputs(self) -> tuple[int, int]:
        extra1 = 1 if self.rt_mode in ("first", "all") else 0
        extra2 = 1 if self.rt_mode == "all" else 0
        return 4 * self.H + extra1, self.alstm_hidden + extra2


def block_of(name: str) -> str:
    return name.split(".", 1)[0]


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Shapes of all trainable parameters with their initialisation fan-in."""
    shapes = {}
    c_in = cfg.feat_dim
    for k, c_out in enumerate(cfg.cnn_channels):
        fan = c_in * cfg.kernel
        shapes[f"cnn.{k}.weight"] = ((c_out, c_in, cfg.kernel), fan)
        shapes[f"cnn.{k}.bias"] = ((c_out,), fan)
        c_in = c_out
    hid = cfg.alstm_hidden
    for k, n_in in enumerate(cfg.alstm_inputs()):
        fan = n_in + 2 * hid
        for g in GATES:
            shapes[f"alstm.{k}.W_{g}"] = ((hid, fan), fan)
            shapes[f"alstm.{k}.b_{g}"] = ((hid,), fan)
        shapes[f"alstm.{k}.W_a"] = ((hid, hid), hid)
        shapes[f"alstm.{k}.U_a"] = ((hid, n_in), n_in)
        shapes[f"alstm.{k}.b_a"] = ((hid,), n_in)
        shapes[f"alstm.{k}.v"] = ((hid,), hid)
    hid = cfg.odelstm_hidden
    for k, n_in in enumerate((cfg.feat_dim, hid)):
        for g in GATES:
            shapes[f"odelstm.{k}.W_{g}"] = ((hid, n_in + hid), n_in + hid)
        shapes[f"odelstm.{k}.f_theta.weight"] = ((hid, hid + 1), hid + 1)
        shapes[f"odelstm.{k}.f_theta.bias"] = ((hid,), hid + 1)
    fan = cfg.alstm_hidden + cfg.odelstm_hidden
    shapes["head.weight"] = ((1, fan), fan)
    shapes["head.bias"] = ((1,), fan)
    return shapes


def init_params(cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32) -> ParamStore:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, identity batch norm."""
    rng = np.random.default_rng(seed)
    params = ParamStore()
    for name, (shape, fan) in sorted(param_shapes(cfg).items()):
        bound = 1.0 / np.sqrt(fan)
        params.add(name, rng.uniform(-bound, bound, shape).astype(dtype))
    for k, c in enumerate(cfg.cnn_channels):
        params.add(f"cnn.{k}.bn.gamma", np.ones(c, dtype=dtype))
        params.add(f"cnn.{k}.bn.beta", np.zeros(c, dtype=dtype))
        params.add(f"cnn.{k}.bn.running_mean", np.zeros(c, dtype=dtype), buffer=True)
        params.add(f"cnn.{k}.bn.running_var", np.ones(c, dtype=dtype), buffer=True)
    return params


def check_compatible(params: ParamStore, cfg: ModelConfig) -> None:
    for name, (shape, _) in param_shapes(cfg).items():
        if name not in params:
            raise DimensionError(f"parameter {name} missing for this configuration")
        if params[name].shape != shape:
            raise DimensionError(f"{name}: shape {params[name].shape} != expected {shape}")


# ---------------------------------------------------------------------------
# ODE evolution


def linear_field(weight: Tensor, bias: Tensor) -> Callable[[Tensor, float], Tensor]:
    """``f(h, t) = W [h; t] + b`` with the time column split off once."""
    hid = weight.shape[0]
    w_h = T.transpose(weight[:, :hid])
    w_t = weight[:, hid]

    def field(h: Tensor, t: float) -> Tensor:
        return h @ w_h + (w_t * t + bias)

    return field


def ode_evolve(h: Tensor, t0: float, t1: float, field: Callable[[Tensor, float], Tensor],
               integrator: str = "euler", substeps: int = 1) -> Tensor:
    """Increment of ``dh/dt = field(h, t)`` from ``t0`` to ``t1``."""
    if integrator not in INTEGRATORS:
        raise ConfigError(f"unknown integrator {integrator!r}; choose from {INTEGRATORS}")
    if t1 < t0:
        raise ContractError(f"ode_evolve needs t1 >= t0, got {t0} -> {t1}")
    dt = (t1 - t0) / substeps
    total = None
    state = h
    t = t0
    for s in range(substeps):
        k1 = field(state, t)
        if integrator == "euler":
            step = k1 * dt
        elif integrator == "midpoint":
            k2 = field(state + k1 * (dt / 2), t + dt / 2)
            step = k2 * dt
        elif integrator == "heun2":
            k2 = field(state + k1 * dt, t + dt)
            step = (k1 + k2) * (dt / 2)
        elif integrator == "heun3":
            k2 = field(state + k1 * (dt / 3), t + dt / 3)
            k3 = field(state + k2 * (2 * dt / 3), t + 2 * dt / 3)
            step = (k1 + k3 * 3.0) * (dt / 4)
        else:
            k2 = field(state + k1 * (dt / 2), t + dt / 2)
            k3 = field(state + k2 * (dt / 2), t + dt / 2)
            k4 = field(state + k3 * dt, t + dt)
            step = (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6)
        total = step if total is None else total + step
        state = h + total
        t = t0 + dt * (s + 1)
    return total


# ---------------------------------------------------------------------------
# blocks


def _zeros(batch: int, width: int, like: Tensor) -> Tensor:
    return Tensor(np.zeros((batch, width), dtype=like.dtype))


def cnn_block(params: ParamStore, x: Tensor, cfg: ModelConfig, training: bool = False,
              rng=None, update_stats: bool | None = None) -> Tensor:
    """``(B, L, feat)`` -> ``(B, L, 4H)``: three conv/BN/activation stages and dropout.

    ``update_stats=False`` keeps batch norm on its running statistics even in
    training mode (used when the block is frozen).
    """
    if x.ndim != 3 or x.shape[2] != cfg.feat_dim:
        raise DimensionError(f"cnn_block expects (B, L, {cfg.feat_dim}), got {x.shape}")
    bn_train = training if update_stats is None else (training and update_stats)
    h = T.transpose(x, (0, 2, 1))
    for k in range(3):
        p = f"cnn.{k}"
        h = T.conv1d(h, params[f"{p}.weight"], params[f"{p}.bias"])
        h, rm, rv = T.batchnorm1d(h, params[f"{p}.bn.gamma"], params[f"{p}.bn.beta"],
                                  params[f"{p}.bn.running_mean"].data,
                                  params[f"{p}.bn.running_var"].data, bn_train)
        if bn_train:
            params.set_data(f"{p}.bn.running_mean", rm)
            params.set_data(f"{p}.bn.running_var", rv)
        h = T.activation(h, cfg.activation)
    h = T.dropout(h, cfg.dropout, training, rng)
    return T.transpose(h, (0, 2, 1))


def _with_rt(xs: list[Tensor], append: bool) -> list[Tensor]:
    if not append:
        return xs
    n = len(xs)
    out = []
    for t, x in enumerate(xs):
        r = t / (n - 1) if n > 1 else 0.0
        col = Tensor(np.full((x.shape[0], 1), r, dtype=x.dtype))
        out.append(T.concat([x, col], axis=1))
    return out


def alstm_layer(params: ParamStore, prefix: str, xs: list[Tensor], hidden: int,
                trace: list | None = None) -> list[Tensor]:
    """One attentional LSTM over a list of ``(B, n_in)`` steps.

    At step t the cell attends over its own earlier hidden states:
    ``score_j = v . tanh(W_a h_j + U_a x_t + b_a)``, ``context = sum softmax(score)_j h_j``
    (zero at the first step), and runs a standard LSTM on ``[x_t; context]``.
    """
    W = {g: T.transpose(params[f"{prefix}.W_{g}"]) for g in GATES}
    b = {g: params[f"{prefix}.b_{g}"] for g in GATES}
    W_a = T.transpose(params[f"{prefix}.W_a"])
    U_a = T.transpose(params[f"{prefix}.U_a"])
    b_a = params[f"{prefix}.b_a"]
    v = T.reshape(params[f"{prefix}.v"], (hidden, 1))
    B = xs[0].shape[0]
    h = c = _zeros(B, hidden, xs[0])
    hs, keys, outputs = [], [], []
    for t, x in enumerate(xs):
        if hs:
            n = len(hs)
            query = T.reshape(x @ U_a + b_a, (B, 1, hidden))
            energy = T.tanh(T.stack(keys, axis=1) + query)
            alpha = T.softmax(T.reshape(energy @ v, (B, n)), axis=1)
            if trace is not None:
                trace.append(alpha.data)
            ctx = T.reshape(T.reshape(alpha, (B, 1, n)) @ T.stack(hs, axis=1), (B, hidden))
        else:
            ctx = _zeros(B, hidden, x)
        z = T.concat([x, ctx, h], axis=1)
        i = T.sigmoid(z @ W["i"] + b["i"])
        f = T.sigmoid(z @ W["f"] + b["f"])
        o = T.sigmoid(z @ W["o"] + b["o"])
        g = T.tanh(z @ W["c"] + b["c"])
        c = f * c + i * g
        h = o * T.tanh(c)
        hs.append(h)
        keys.append(h @ W_a)
        outputs.append(h)
    return outputs


def alstm_block(params: ParamStore, x: Tensor, cfg: ModelConfig, training: bool = False,
                rng=None, trace: list | None = None) -> Tensor:
    """``(B, L, 4H)`` -> ``(B, alstm_hidden)``, last hidden state of the second cell."""
    if x.ndim != 3 or x.shape[2] != 4 * cfg.H:
        raise DimensionError(f"alstm_block expects (B, L, {4 * cfg.H}), got {x.shape}")
    xs = [x[:, t, :] for t in range(x.shape[1])]
    xs = _with_rt(xs, cfg.rt_mode in ("first", "all"))
    hs = alstm_layer(params, "alstm.0", xs, cfg.alstm_hidden, trace)
    hs = _with_rt(hs, cfg.rt_mode == "all")
    hs = alstm_layer(params, "alstm.1", hs, cfg.alstm_hidden, trace)
    return T.dropout(hs[-1], cfg.dropout, training, rng)


def default_times(seq_len: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, seq_len)


def odelstm_layer(params: ParamStore, prefix: str, xs: list[Tensor], times, hidden: int,
                  integrator: str = "euler", substeps: int = 1) -> list[Tensor]:
    """LSTM whose hidden state drifts along a learned linear ODE between steps.

    The first step integrates over ``[t_0 - dt, t_0]`` with ``dt`` the spacing
    of the first two time points, so every step sees one interval.
    """
    W = {g: T.transpose(params[f"{prefix}.W_{g}"]) for g in GATES}
    field = linear_field(params[f"{prefix}.f_theta.weight"], params[f"{prefix}.f_theta.bias"])
    B = xs[0].shape[0]
    h = c = _zeros(B, hidden, xs[0])
    first_dt = times[1] - times[0] if len(times) > 1 else 1.0
    outputs = []
    for k, x in enumerate(xs):
        t_prev = times[k - 1] if k > 0 else times[0] - first_dt
        h_tilde = h + ode_evolve(h, float(t_prev), float(times[k]), field, integrator, substeps)
        z = T.concat([x, h_tilde], axis=1)
        i = T.sigmoid(z @ W["i"])
        f = T.sigmoid(z @ W["f"])
        o = T.sigmoid(z @ W["o"])
        g = T.tanh(z @ W["c"])
        c = f * c + i * g
        h = o * T.tanh(c)
        outputs.append(h)
    return outputs


def odelstm_block(params: ParamStore, x: Tensor, cfg: ModelConfig, times=None,
                  training: bool = False, rng=None) -> Tensor:
    """``(B, L, feat)`` -> ``(B, odelstm_hidden)``."""
    if x.ndim != 3 or x.shape[2] != cfg.feat_dim:
        raise DimensionError(f"odelstm_block expects (B, L, {cfg.feat_dim}), got {x.shape}")
    times = default_times(x.shape[1]) if times is None else np.asarray(times, dtype=np.float64)
    if len(times) != x.shape[1]:
        raise ContractError(f"{len(times)} time points for a sequence of length {x.shape[1]}")
    if np.any(np.diff(times) <= 0):
        raise ContractError("ODE-LSTM time points must be strictly increasing")
    xs = [x[:, t, :] for t in range(x.shape[1])]
    hs = odelstm_layer(params, "odelstm.0", xs, times, cfg.odelstm_hidden,
                       cfg.integrator, cfg.ode_substeps)
    hs = odelstm_layer(params, "odelstm.1", hs, times, cfg.odelstm_hidden,
                       cfg.integrator, cfg.ode_substeps)
    return T.dropout(hs[-1], cfg.dropout, training, rng)


# ---------------------------------------------------------------------------
# full model


def _as_input(x, cfg: ModelConfig, dtype) -> Tensor:
    if isinstance(x, Tensor):
        if x.ndim == 4:
            x = T.reshape(x, (x.shape[0], x.shape[1], -1))
        data = x.data
    else:
        data = np.asarray(x)
        if data.ndim == 4:
            data = data.reshape(data.shape[0], data.shape[1], -1)
    if data.ndim != 3 or data.shape[1:] != (cfg.seq_len, cfg.feat_dim):
        raise DimensionError(
            f"model input must be (B, {cfg.seq_len}, 4, 6) or (B, {cfg.seq_len}, {cfg.feat_dim}), "
            f"got {np.shape(data)}")
    if not np.all(np.isfinite(data)):
        raise ContractError("model input contains NaN or infinite values")
    if T._DEBUG and (data.min() < -10.0 or data.max() > 11.0):
        raise ContractError("model input looks unscaled (values far outside [0, 1])")
    return x if isinstance(x, Tensor) else Tensor(data.astype(dtype, copy=False))


def forward_scaled(params: ParamStore, x, cfg: ModelConfig, training: bool = False,
                   rng=None, frozen: frozenset | set = frozenset()) -> Tensor:
    """Sigmoid output in ``(0, 1)``, shape ``(B,)``."""
    dtype = params["head.weight"].dtype
    x = _as_input(x, cfg, dtype)
    if training and cfg.dropout > 0 and rng is None:
        raise ContractError("training-mode forward needs a seeded generator for dropout")
    feats = cnn_block(params, x, cfg, training, rng, update_stats="cnn" not in frozen)
    branch1 = alstm_block(params, feats, cfg, training, rng)
    branch2 = odelstm_block(params, x, cfg, None, training, rng)
    fused = T.concat([branch1, branch2], axis=1)
    logit = fused @ T.transpose(params["head.weight"]) + params["head.bias"]
    return T.reshape(T.sigmoid(logit), (x.shape[0],))


def model_forward(params: ParamStore, x, cfg: ModelConfig, training: bool = False,
                  rng=None, frozen: frozenset | set = frozenset()) -> Tensor:
    """Predicted RUL in cycles, shape ``(B,)``."""
    return forward_scaled(params, x, cfg, training, rng, frozen) * float(cfg.output_scale)


def predict(params: ParamStore, features: np.ndarray, cfg: ModelConfig,
            batch_size: int = 512) -> np.ndarray:
    """Eval-mode predictions in cycles as a float64 array."""
    features = np.asarray(features)
    out = [model_forward(params, features[s:s + batch_size], cfg).data
           for s in range(0, len(features), batch_size)]
    return np.concatenate(out).astype(np.float64) if out else np.zeros(0)
