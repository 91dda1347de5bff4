"""Dense tensors with tape-based reverse-mode differentiation.

Operations only record onto a :class:`Tape` when one is active and at least
one input requires a gradient, so inference code runs without any graph
bookkeeping::

    with Tape():
        loss = mean(square(matmul(x, w) - y))
    grads = backward(loss, params)

Arrays are float32 by default; float64 is preserved end to end, which is what
the finite-difference checks use.
"""
from __future__ import annotations

import os
import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from .errors import ConfigError, ContractError, DimensionError

_local = threading.local()
_DEBUG = os.environ.get("RULFORGE_DEBUG", "") not in ("", "0")

LEAKY_SLOPE = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def set_debug(flag: bool) -> None:
    """Toggle the non-finite check that runs after every operation."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so every node's inputs were
    produced by earlier nodes (or are leaves); the backward sweep walks the
    list once in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def gradients(self, loss: Tensor) -> dict:
        """Propagate d(loss) back through the tape; returns ``{id(leaf): grad}``.

        Leaf tensors also get their ``.grad`` attribute set.
        """
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=t.data.dtype)
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
                if t._tape is None:
                    leaves[key] = t
        out = {}
        for key, t in leaves.items():
            t.grad = grads[key]
            out[key] = t.grad
        return out


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by tensor op")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(_Node(out, tuple(inputs), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape),
                _unbroadcast(-g * out / bd, bd.shape))

    return _result(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (0.5 * g / out,))


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise DimensionError(
            f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if bd.ndim == 2:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(out, (a, b), backward)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        count = int(np.prod([shape[ax] for ax in axes]))
    scale = 1.0 / count

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * scale, shape),)

    return _result(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), backward)


# ---------------------------------------------------------------------------
# layout


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(idx)

    def backward(g):
        z = np.zeros(shape, dtype=dtype)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _result(np.asarray(a.data[idx]), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(
            f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    return _result(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(
            f"stack: incompatible shapes {[t.shape for t in tensors]}") from exc

    def backward(g):
        g = np.moveaxis(g, axis, 0)
        return tuple(g[i] for i in range(len(tensors)))

    return _result(out, tensors, backward)


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.maximum(ad, 0.0), (a,), lambda g: (g * (ad > 0),))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    ad = a.data
    pos = ad > 0
    return _result(np.where(pos, ad, slope * ad), (a,),
                   lambda g: (np.where(pos, g, slope * g),))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    ad = a.data
    cdf = 0.5 * (1.0 + erf(ad * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * ad * ad)
    return _result(ad * cdf, (a,), lambda g: (g * (cdf + ad * pdf),))


def hardswish(a: Tensor) -> Tensor:
    ad = a.data
    out = ad * np.clip(ad + 3.0, 0.0, 6.0) / 6.0
    slope = np.where(ad < -3.0, 0.0, np.where(ad > 3.0, 1.0, (2.0 * ad + 3.0) / 6.0))
    return _result(out, (a,), lambda g: (g * slope,))


ACTIVATIONS = {
    "leaky_relu": leaky_relu,
    "relu": relu,
    "gelu": gelu,
    "hardswish": hardswish,
    "sigmoid": sigmoid,
    "tanh": tanh,
}


def activation(a: Tensor, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}; choose from {sorted(ACTIVATIONS)}")
    return fn(a)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# layers


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded 1-D cross-correlation.

    ``x`` is ``(C_in, L)`` or batched ``(B, C_in, L)``; ``w`` is
    ``(C_out, C_in, k)`` with odd ``k``. Output length equals ``L``.
    """
    out_ch, in_ch, k = w.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d needs an odd kernel size, got {k}")
    single = x.ndim == 2
    xd = x.data[None] if single else x.data
    if xd.ndim != 3 or xd.shape[1] != in_ch:
        raise DimensionError(f"conv1d: input {x.shape} does not match weight {w.shape}")
    if bias is not None and bias.shape != (out_ch,):
        raise DimensionError(f"conv1d: bias {bias.shape} does not match weight {w.shape}")
    B, _, L = xd.shape
    pad = (k - 1) // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad)))
    cols = sliding_window_view(xp, k, axis=2).transpose(0, 2, 1, 3).reshape(B * L, in_ch * k)
    wm = w.data.reshape(out_ch, in_ch * k)
    out = cols @ wm.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, L, out_ch).transpose(0, 2, 1))
    if single:
        out = out[0]

    def backward(g):
        g = g[None] if single else g
        g2 = g.transpose(0, 2, 1).reshape(B * L, out_ch)
        gw = (g2.T @ cols).reshape(out_ch, in_ch, k)
        dcols = (g2 @ wm).reshape(B, L, in_ch, k)
        dxp = np.zeros((B, in_ch, L + 2 * pad), dtype=xd.dtype)
        for j in range(k):
            dxp[:, :, j:j + L] += dcols[:, :, :, j].transpose(0, 2, 1)
        dx = dxp[:, :, pad:pad + L]
        if single:
            dx = dx[0]
        return (dx, gw) if bias is None else (dx, gw, g2.sum(axis=0))

    inputs = (x, w) if bias is None else (x, w, bias)
    return _result(out, inputs, backward)


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Per-channel batch normalization of a ``(B, C, L)`` tensor.

    Returns ``(out, new_running_mean, new_running_var)``. In training mode the
    batch statistics (biased variance) normalize the input and the running
    estimates move by ``momentum`` towards them (unbiased variance); in eval
    mode the running estimates are used and returned unchanged.
    """
    if x.ndim != 3 or x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batchnorm1d: input {x.shape} vs {gamma.shape[0]} channels")
    xd, gd = x.data, gamma.data
    if training:
        n = xd.shape[0] * xd.shape[2]
        if n < 2:
            raise ContractError("batchnorm1d: degenerate batch, need B*L >= 2 in train mode")
        mu = xd.mean(axis=(0, 2))
        var = xd.var(axis=(0, 2))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu[:, None]) * inv[:, None]
        new_mean = (1.0 - momentum) * running_mean + momentum * mu
        new_var = (1.0 - momentum) * running_var + momentum * var * (n / (n - 1))

        def backward(g):
            dxhat = g * gd[:, None]
            dx = (inv[:, None] / n) * (
                n * dxhat
                - dxhat.sum(axis=(0, 2))[:, None]
                - xhat * (dxhat * xhat).sum(axis=(0, 2))[:, None])
            return dx, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean[:, None]) * inv[:, None]
        new_mean, new_var = running_mean, running_var

        def backward(g):
            return g * (gd * inv)[:, None], (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

    out = gd[:, None] * xhat + beta.data[:, None]
    out = out.astype(xd.dtype, copy=False)
    return (_result(out, (x, gamma, beta), backward),
            np.asarray(new_mean, dtype=running_mean.dtype),
            np.asarray(new_var, dtype=running_var.dtype))


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs a seeded generator")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# parameters and gradients


class ParamStore:
    """Named tensors with per-entry trainability.

    Entries are either trainable parameters or buffers (e.g. batch-norm
    running statistics); buffers never receive gradients. Iteration order is
    lexicographic by name.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}
        self._buffer: dict[str, bool] = {}

    def add(self, name: str, data, buffer: bool = False, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise ConfigError(f"duplicate parameter name {name!r}")
        trainable = trainable and not buffer
        t = Tensor(data, requires_grad=trainable)
        self._tensors[name] = t
        self._trainable[name] = trainable
        self._buffer[name] = buffer
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self):
        return iter(self.names())

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def items(self):
        return [(n, self._tensors[n]) for n in self.names()]

    def is_buffer(self, name: str) -> bool:
        return self._buffer[name]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def param_names(self) -> list[str]:
        return [n for n in self.names() if not self._buffer[n]]

    def trainable_names(self) -> list[str]:
        return [n for n in self.names() if self._trainable[n]]

    def set_trainable(self, name: str, flag: bool) -> None:
        if self._buffer[name]:
            raise ConfigError(f"{name!r} is a buffer and cannot be trained")
        self._trainable[name] = bool(flag)
        self._tensors[name] = Tensor(self._tensors[name].data, requires_grad=bool(flag))

    def set_data(self, name: str, data) -> None:
        """Replace an entry's value with a fresh tensor (flags kept)."""
        old = self._tensors[name]
        arr = np.asarray(data, dtype=old.dtype)
        if arr.shape != old.shape:
            raise DimensionError(f"{name}: new shape {arr.shape} != {old.shape}")
        self._tensors[name] = Tensor(arr, requires_grad=self._trainable[name])

    def copy(self) -> "ParamStore":
        new = ParamStore()
        for name in self.names():
            new._tensors[name] = Tensor(self._tensors[name].data.copy(),
                                        requires_grad=self._trainable[name])
            new._trainable[name] = self._trainable[name]
            new._buffer[name] = self._buffer[name]
        return new

    def astype(self, dtype) -> "ParamStore":
        new = self.copy()
        for name in new.names():
            new._tensors[name] = Tensor(new._tensors[name].data.astype(dtype),
                                        requires_grad=new._trainable[name])
        return new

    def state(self) -> dict[str, np.ndarray]:
        return {n: self._tensors[n].data for n in self.names()}

    def n_elements(self, trainable_only: bool = False) -> int:
        names = self.trainable_names() if trainable_only else self.param_names()
        return sum(self._tensors[n].size for n in names)


def backward(loss: Tensor, params: ParamStore | None = None) -> dict:
    """Reverse sweep from a scalar loss.

    With ``params`` given, returns ``{name: grad}`` for every trainable entry
    (zeros for entries the loss does not depend on). Without it, returns the
    raw ``{id(tensor): grad}`` map of reached leaves.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        if params is not None and not params.trainable_names():
            return {}
        raise ContractError("loss was not recorded on a tape; wrap the forward in `with Tape():`")
    raw = loss._tape.gradients(loss)
    if params is None:
        return raw
    out = {}
    for name in params.trainable_names():
        t = params[name]
        g = raw.get(id(t))
        out[name] = np.zeros_like(t.data) if g is None else g
    return out


def _scalar(f, x: Tensor, weights: np.ndarray | None) -> Tensor:
    y = f(x)
    if y.size == 1:
        return reshape(y, ())
    return tensor_sum(mul(y, Tensor(weights[: y.size].reshape(y.shape))))


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    Error per element is ``|a - n| / max(1, |a|, |n|)``. Non-scalar outputs
    are contracted with fixed pseudo-random weights first so every output
    element contributes. Runs in float64.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = f(Tensor(x0))
    weights = None
    if probe.size != 1:
        weights = np.random.default_rng(0).uniform(0.5, 1.5, probe.size)
    xt = Tensor(x0.copy(), requires_grad=True)
    with Tape():
        y = _scalar(f, xt, weights)
    backward(y)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)
    numeric = np.empty_like(x0)
    for idx in np.ndindex(x0.shape):
        xp = x0.copy()
        xp[idx] += step
        xm = x0.copy()
        xm[idx] -= step
        fp = _scalar(f, Tensor(xp), weights).item()
        fm = _scalar(f, Tensor(xm), weights).item()
        numeric[idx] = (fp - fm) / (2.0 * step)
    return _rel_err(analytic, numeric)


def _rel_err(a: np.ndarray, n: np.ndarray) -> float:
    if a.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom))


def grad_check_params(loss_fn: Callable[[ParamStore], Tensor], params: ParamStore,
                      step: float = 1e-4, entries_per_param: int | None = None,
                      rng: np.random.Generator | None = None) -> dict[str, float]:
    """Per-parameter max relative error of ``backward`` against central differences.

    ``loss_fn`` must be deterministic (fixed dropout masks etc.). With
    ``entries_per_param`` set, only that many randomly chosen entries of each
    parameter are perturbed.
    """
    params = params.astype(np.float64)
    with Tape():
        loss = loss_fn(params)
    grads = backward(loss, params)
    rng = rng or np.random.default_rng(0)
    report = {}
    for name in params.trainable_names():
        base = params[name].data
        flat_idx = np.arange(base.size)
        if entries_per_param is not None and entries_per_param < base.size:
            flat_idx = rng.choice(base.size, entries_per_param, replace=False)
        analytic = grads[name].reshape(-1)[flat_idx]
        numeric = np.empty(len(flat_idx))
        for j, fi in enumerate(flat_idx):
            vals = []
            for sign in (1.0, -1.0):
                pert = base.copy().reshape(-1)
                pert[fi] += sign * step
                trial = params.copy()
                trial.set_data(name, pert.reshape(base.shape))
                vals.append(loss_fn(trial).item())
            numeric[j] = (vals[0] - vals[1]) / (2.0 * step)
        report[name] = _rel_err(analytic, numeric)
    return report

