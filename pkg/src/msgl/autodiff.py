"""Minimal tape-based reverse-mode differentiation over dense numpy arrays.

Usage::

    with Tape() as tape:
        y = ad.mean(ad.hadamard(x, x))
    grads = backward(tape, y)      # {tensor.id: ndarray}
    grads[x.id]

Ops are recorded only when at least one input requires grad and a tape is
active. ``backward`` never mutates the tape, so several losses built on one
tape can be differentiated one after another.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import ContractError, DimensionError, NumericError

_ids = itertools.count(1)
_tapes: list["Tape"] = []
_strict = False


def set_strict(flag: bool) -> bool:
    """Toggle finiteness checking on every op output; returns the old value."""
    global _strict
    prev, _strict = _strict, bool(flag)
    return prev


@contextlib.contextmanager
def strict(flag: bool = True):
    prev = set_strict(flag)
    try:
        yield
    finally:
        set_strict(prev)


class Tensor:
    """A dense array plus identity and a requires-grad flag."""

    __slots__ = ("data", "requires_grad", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    __slots__ = ("op", "inputs", "output", "ctx")

    def __init__(self, op, inputs, output, ctx):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.ctx = ctx


class Tape:
    """Ordered record of differentiable ops; use as a context manager."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def active_tape() -> Tape | None:
    return _tapes[-1] if _tapes else None


# ---------------------------------------------------------------------------
# op registry: forward(*arrays, **attrs) -> (out, ctx);
#              backward(ctx, grad_out, needs) -> tuple of input grads / None

OPS: dict[str, tuple[Callable, Callable]] = {}


def _op(name):
    def register(pair):
        OPS[name] = pair()
        return pair

    return register


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


@_op("matmul")
def _matmul():
    def fwd(a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise DimensionError(f"matmul: batch shapes {a.shape} and {b.shape} differ") from None
        return a @ b, (a, b)

    def bwd(ctx, g, needs):
        a, b = ctx
        ga = gb = None
        if needs[0]:
            if a.ndim > 2 and b.ndim == 2:
                ga = g @ b.T
            else:
                ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
        if needs[1]:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
        return ga, gb

    return fwd, bwd


@_op("add")
def _add():
    def fwd(a, b):
        _broadcast_check("add", a, b)
        return a + b, (a.shape, b.shape)

    def bwd(ctx, g, needs):
        sa, sb = ctx
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return fwd, bwd


@_op("subtract")
def _subtract():
    def fwd(a, b):
        _broadcast_check("subtract", a, b)
        return a - b, (a.shape, b.shape)

    def bwd(ctx, g, needs):
        sa, sb = ctx
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(-g, sb) if needs[1] else None)

    return fwd, bwd


@_op("hadamard")
def _hadamard():
    def fwd(a, b):
        _broadcast_check("hadamard", a, b)
        return a * b, (a, b)

    def bwd(ctx, g, needs):
        a, b = ctx
        return (_unbroadcast(g * b, a.shape) if needs[0] else None,
                _unbroadcast(g * a, b.shape) if needs[1] else None)

    return fwd, bwd


@_op("scale")
def _scale():
    def fwd(a, factor):
        return a * factor, factor

    def bwd(ctx, g, needs):
        return (g * ctx,)

    return fwd, bwd


@_op("sigmoid")
def _sigmoid():
    def fwd(a):
        y = expit(a)
        return y, y

    def bwd(y, g, needs):
        return (g * y * (1.0 - y),)

    return fwd, bwd


@_op("tanh")
def _tanh():
    def fwd(a):
        y = np.tanh(a)
        return y, y

    def bwd(y, g, needs):
        return (g * (1.0 - y * y),)

    return fwd, bwd


@_op("relu")
def _relu():
    def fwd(a):
        pos = a > 0
        return np.where(pos, a, 0.0).astype(a.dtype, copy=False), pos

    def bwd(pos, g, needs):
        return (np.where(pos, g, 0.0).astype(g.dtype, copy=False),)

    return fwd, bwd


@_op("softmax_last_axis")
def _softmax():
    def fwd(a):
        y = a - a.max(axis=-1, keepdims=True)
        np.exp(y, out=y)
        y /= y.sum(axis=-1, keepdims=True)
        return y, y

    def bwd(y, g, needs):
        gy = g * y
        s = gy.sum(axis=-1, keepdims=True)
        gy -= y * s
        return (gy,)

    return fwd, bwd


@_op("concat_last_axis")
def _concat():
    def fwd(*arrays):
        lead = arrays[0].shape[:-1]
        for a in arrays[1:]:
            if a.shape[:-1] != lead:
                shapes = [x.shape for x in arrays]
                raise DimensionError(f"concat_last_axis: leading shapes differ {shapes}")
        widths = [a.shape[-1] for a in arrays]
        return np.concatenate(arrays, axis=-1), np.cumsum(widths)[:-1]

    def bwd(splits, g, needs):
        return tuple(np.split(g, splits, axis=-1))

    return fwd, bwd


@_op("transpose")
def _transpose():
    def fwd(a, axes=None):
        if axes is None:
            if a.ndim < 2:
                raise DimensionError(f"transpose: need ndim >= 2, got shape {a.shape}")
            axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
        elif sorted(axes) != list(range(a.ndim)):
            raise DimensionError(f"transpose: axes {axes} invalid for shape {a.shape}")
        return np.transpose(a, axes), np.argsort(axes)

    def bwd(inv, g, needs):
        return (np.transpose(g, inv),)

    return fwd, bwd


@_op("reshape")
def _reshape():
    def fwd(a, shape):
        try:
            return a.reshape(shape), a.shape
        except ValueError:
            raise DimensionError(f"reshape: cannot reshape {a.shape} to {shape}") from None

    def bwd(shape, g, needs):
        return (g.reshape(shape),)

    return fwd, bwd


@_op("getitem")
def _getitem():
    # basic indexing only (ints / slices), so the scatter in backward is a plain assignment
    def fwd(a, index):
        return a[index], (a.shape, a.dtype, index)

    def bwd(ctx, g, needs):
        shape, dtype, index = ctx
        out = np.zeros(shape, dtype=dtype)
        out[index] = g
        return (out,)

    return fwd, bwd


@_op("stack")
def _stack():
    def fwd(*arrays, axis=0):
        try:
            return np.stack(arrays, axis=axis), axis
        except ValueError:
            raise DimensionError(f"stack: shapes differ {[a.shape for a in arrays]}") from None

    def bwd(axis, g, needs):
        return tuple(np.moveaxis(g, axis, 0))

    return fwd, bwd


@_op("sum")
def _sum():
    def fwd(a):
        return np.asarray(a.sum(), dtype=a.dtype), (a.shape, a.dtype)

    def bwd(ctx, g, needs):
        shape, dtype = ctx
        return (np.full(shape, g, dtype=dtype),)

    return fwd, bwd


@_op("mean")
def _mean():
    def fwd(a):
        if a.size == 0:
            raise DimensionError("mean: empty input")
        return np.asarray(a.mean(), dtype=a.dtype), (a.shape, a.dtype, a.size)

    def bwd(ctx, g, needs):
        shape, dtype, n = ctx
        return (np.full(shape, g / n, dtype=dtype),)

    return fwd, bwd


class BatchNormState:
    """Running statistics of one batch-norm layer (updated in training mode)."""

    def __init__(self, channels: int, dtype=np.float64):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def copy(self):
        out = BatchNormState(len(self.running_mean), self.running_mean.dtype)
        out.running_mean = self.running_mean.copy()
        out.running_var = self.running_var.copy()
        return out


@_op("batchnorm")
def _batchnorm():
    # channels on the last axis, statistics over every leading axis
    def fwd(x, gamma, beta, state, training, momentum=0.9, eps=1e-5):
        C = x.shape[-1]
        if gamma.shape != (C,) or beta.shape != (C,):
            raise DimensionError(f"batchnorm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
        flat = x.reshape(-1, C)
        if training:
            n = flat.shape[0]
            mu = flat.mean(axis=0)
            var = flat.var(axis=0)
            if state is not None:
                unbiased = var * n / max(n - 1, 1)
                state.running_mean = momentum * state.running_mean + (1.0 - momentum) * mu
                state.running_var = momentum * state.running_var + (1.0 - momentum) * unbiased
        else:
            mu, var = state.running_mean, state.running_var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (flat - mu) * inv
        out = (xhat * gamma + beta).reshape(x.shape)
        return out, (xhat, inv, gamma, training, x.shape)

    def bwd(ctx, g, needs):
        xhat, inv, gamma, training, shape = ctx
        gf = g.reshape(-1, shape[-1])
        dgamma = (gf * xhat).sum(axis=0) if needs[1] else None
        dbeta = gf.sum(axis=0) if needs[2] else None
        dx = None
        if needs[0]:
            dxhat = gf * gamma
            if training:
                n = gf.shape[0]
                dx = (inv / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            else:
                dx = dxhat * inv
            dx = dx.reshape(shape)
        return dx, dgamma, dbeta

    return fwd, bwd


@_op("dropout")
def _dropout():
    def fwd(a, p, rng, training=True):
        keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
        return a * keep, keep

    def bwd(keep, g, needs):
        return (g * keep,)

    return fwd, bwd


@_op("masked_mse")
def _masked_mse():
    def fwd(pred, target, mask):
        if pred.shape != target.shape or pred.shape != mask.shape:
            raise DimensionError(
                f"masked_mse: pred {pred.shape}, target {target.shape}, mask {mask.shape}")
        m = mask.astype(bool)
        n = int(m.sum())
        diff = np.where(m, pred - np.where(m, target, 0.0), 0.0)
        if n == 0:
            return np.zeros((), dtype=pred.dtype), (diff, 1)
        return np.asarray((diff * diff).sum() / n, dtype=pred.dtype), (diff, n)

    def bwd(ctx, g, needs):
        diff, n = ctx
        return (g * 2.0 * diff / n, None, None)

    return fwd, bwd


@_op("rgrn_sequence")
def _rgrn_sequence():
    def fwd(X, Wx, Wh, b, Wg, bg, A, rmask=None):
        T, n, F = X.shape
        h = Wh.shape[0]
        if (Wx.shape != (F, 4 * h) or Wh.shape != (h, 4 * h) or b.shape != (4 * h,)
                or Wg.shape != (h, h) or bg.shape != (h,) or A.shape != (n, n)):
            raise DimensionError(
                f"rgrn_sequence: X {X.shape}, Wx {Wx.shape}, Wh {Wh.shape}, b {b.shape}, "
                f"Wg {Wg.shape}, bg {bg.shape}, A {A.shape}")
        H, cache = kernels.rgrn_forward(X, A, Wx, Wh, b, Wg, bg, rmask)
        return H, cache

    def bwd(cache, g, needs):
        dX, dWx, dWh, db, dWg, dbg = kernels.rgrn_backward(cache, g, need_dx=needs[0])
        return dX, dWx, dWh, db, dWg, dbg

    return fwd, bwd


# ---------------------------------------------------------------------------


def record(op_kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Run ``op_kind`` forward and append it to the active tape if needed."""
    try:
        fwd, _ = OPS[op_kind]
    except KeyError:
        raise ContractError(f"unknown op {op_kind!r}") from None
    inputs = tuple(as_tensor(t) for t in inputs)
    out, ctx = fwd(*(t.data for t in inputs), **attrs)
    if _strict and not np.all(np.isfinite(out)):
        raise NumericError(f"{op_kind}: non-finite output")
    req = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=req)
    tape = active_tape()
    if req and tape is not None:
        tape.nodes.append(Node(op_kind, inputs, result, ctx))
    return result


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] = ()) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns gradients keyed by tensor id for every reached tensor. Leaves that
    require grad but were not reached, and anything listed in ``wrt``, get
    explicit zero arrays.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {node.output.id for node in tape.nodes}
    if loss.id not in produced:
        raise ContractError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.output.id)
        if g is None:
            continue
        _, bwd = OPS[node.op]
        needs = tuple(t.requires_grad for t in node.inputs)
        for t, gi in zip(node.inputs, bwd(node.ctx, g, needs)):
            if gi is None or not t.requires_grad:
                continue
            prev = grads.get(t.id)
            grads[t.id] = gi if prev is None else prev + gi
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and t.id not in produced and t.id not in grads:
                grads[t.id] = np.zeros_like(t.data)
    for t in wrt:
        if t.id not in grads:
            grads[t.id] = np.zeros_like(t.data)
    return grads


def finite_difference_grad(f: Callable, x, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, element by element."""
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.empty_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = _scalar(f(base.copy()))
        flat[i] = orig - step
        fm = _scalar(f(base.copy()))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        v = v.data
    return float(np.asarray(v).reshape(()))


# functional wrappers -------------------------------------------------------


def matmul(a, b):
    return record("matmul", (a, b))


def add(a, b):
    return record("add", (a, b))


def subtract(a, b):
    return record("subtract", (a, b))


def hadamard(a, b):
    return record("hadamard", (a, b))


def scale(a, factor: float):
    return record("scale", (a,), factor=factor)


def sigmoid(a):
    return record("sigmoid", (a,))


def tanh(a):
    return record("tanh", (a,))


def relu(a):
    return record("relu", (a,))


def softmax_last_axis(a):
    return record("softmax_last_axis", (a,))


def concat_last_axis(*xs):
    return record("concat_last_axis", xs)


def transpose(a, axes=None):
    return record("transpose", (a,), axes=axes)


def reshape(a, shape):
    return record("reshape", (a,), shape=tuple(shape))


def getitem(a, index):
    return record("getitem", (a,), index=index)


def stack(xs, axis: int = 0):
    return record("stack", tuple(xs), axis=axis)


def sum(a):  # noqa: A001 - mirrors the op name
    return record("sum", (a,))


def mean(a):
    return record("mean", (a,))


def batchnorm(x, gamma, beta, state: BatchNormState | None, training: bool,
              momentum: float = 0.9, eps: float = 1e-5):
    if not training and state is None:
        raise ContractError("batchnorm in evaluation mode needs running statistics")
    return record("batchnorm", (x, gamma, beta), state=state, training=training,
                  momentum=momentum, eps=eps)


def dropout(a, p: float, rng: np.random.Generator | None = None, training: bool = True,
            seed: int | None = None):
    """Inverted dropout; the identity in evaluation mode or when ``p == 0``."""
    a = as_tensor(a)
    if not training or p <= 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        rng = np.random.default_rng(seed)
    return record("dropout", (a,), p=p, rng=rng)


def masked_mse(pred, target, mask):
    """Mean squared error over entries where ``mask`` is true (0 when none are)."""
    return record("masked_mse", (pred, target, mask))


def rgrn_sequence(X, Wx, Wh, b, Wg, bg, A, rmask=None):
    """Fused RGrN unroll over the time axis of ``X`` [T, nodes, F] -> [T, nodes, h]."""
    return record("rgrn_sequence", (X, Wx, Wh, b, Wg, bg),
                  A=np.asarray(A.data if isinstance(A, Tensor) else A),
                  rmask=rmask)
