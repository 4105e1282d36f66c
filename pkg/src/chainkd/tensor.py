"""Dense row-major tensors with reverse-mode differentiation on an explicit tape.

Values are immutable once constructed; every operation checks its output for
NaN/Inf and fails fast naming the producing operation. Gradients are recorded
only while a GradTape is active, so inference-time code pays no bookkeeping.
"""

from __future__ import annotations

import functools
import math
from typing import Callable, Sequence

import numpy as np

F32 = np.float32
F64 = np.float64

_GELU_C = math.sqrt(2.0 / math.pi)


class TensorError(ValueError):
    """Malformed shape, dtype, or argument."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf.  Carries the operation name."""

    def __init__(self, op: str):
        super().__init__(f"operation '{op}' produced non-finite values")
        self.op = op


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, values, dtype=F32, requires_grad: bool = False):
        arr = np.array(values, dtype=dtype, order="C")
        if arr.dtype.type not in (F32, F64):
            raise TensorError(f"unsupported dtype {arr.dtype}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    # -- views on the payload -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), dtype=dtype, requires_grad=self.requires_grad)

    def detach(self) -> "Tensor":
        return _wrap(self.data, False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


# -- tape -----------------------------------------------------------------------

_ACTIVE: "GradTape | None" = None


class GradTape:
    """Execution-ordered record of ops; execution order is a valid topological
    order, so the reverse sweep just walks the entries backwards."""

    def __init__(self):
        self._entries: list[tuple[str, tuple[Tensor, ...], Tensor, Callable]] = []
        self._prev: GradTape | None = None

    def __enter__(self) -> "GradTape":
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = self._prev
        return False

    def record(self, op: str, inputs: tuple[Tensor, ...], out: Tensor, backward: Callable):
        self._entries.append((op, inputs, out, backward))

    def backward(self, root: Tensor) -> None:
        """Accumulate gradients of `root` into .grad of every trainable input."""
        if root.shape != ():
            raise TensorError("backward root must be a scalar")
        for _, inputs, out, _ in self._entries:
            out.grad = None
            for t in inputs:
                t.grad = None
        root.grad = np.ones((), dtype=root.dtype)
        for op, inputs, out, backward in reversed(self._entries):
            if out.grad is None:
                continue
            grads = backward(out.grad)
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                t.grad = g if t.grad is None else t.grad + g


class no_grad:
    """Temporarily disable tape recording (teacher forwards, sampling, eval)."""

    def __enter__(self):
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = None
        return self

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = self._prev
        return False


def _wrap(arr: np.ndarray, requires_grad: bool) -> Tensor:
    out = object.__new__(Tensor)
    arr.setflags(write=False)
    out.data = arr
    out.requires_grad = requires_grad
    out.grad = None
    return out


def from_owned(arr: np.ndarray, requires_grad: bool = False) -> Tensor:
    """Wrap a freshly-computed array without copying; the caller gives up
    ownership.  Finiteness is still enforced."""
    if arr.dtype.type not in (F32, F64):
        raise TensorError(f"unsupported dtype {arr.dtype}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor")
    return _wrap(_own(arr), requires_grad)


def _own(arr) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


def _emit(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward: Callable) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(op)
    req = _ACTIVE is not None and any(t.requires_grad for t in inputs)
    out = _wrap(_own(out_data), req)
    if req:
        _ACTIVE.record(op, inputs, out, backward)
    return out


def _quiet(fn):
    # NaN/Inf is detected and raised by _emit; silence numpy's own warnings.
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with np.errstate(all="ignore"):
            return fn(*args, **kwargs)

    return wrapper


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        if x.dtype != like.dtype:
            raise TensorError(f"dtype mismatch: {x.dtype} vs {like.dtype}")
        return x
    return Tensor(np.asarray(x), dtype=like.dtype.type)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ts) in enumerate(zip(g.shape, shape)):
        if ts == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise / reduction ops --------------------------------------------------


@_quiet
def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _coerce(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), a.data + b.data, backward)


@_quiet
def sub(a, b) -> Tensor:
    anchor = a if isinstance(a, Tensor) else b
    a = _coerce(a, anchor)
    b = _coerce(b, anchor)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", (a, b), a.data - b.data, backward)


@_quiet
def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _coerce(b, a)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", (a, b), a.data * b.data, backward)


@_quiet
def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def backward(g):
        return (g * y,)

    return _emit("exp", (x,), y, backward)


@_quiet
def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).astype(x.dtype, copy=True),)

    return _emit("sum", (x,), x.data.sum(axis=axis, keepdims=keepdims), backward)


@_quiet
def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        count = x.shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).astype(x.dtype, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, x.shape).astype(x.dtype, copy=True),)

    return _emit("mean", (x,), x.data.mean(axis=axis, keepdims=keepdims, dtype=x.dtype), backward)


# -- shape ops --------------------------------------------------------------------


@_quiet
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _emit("reshape", (x,), x.data.reshape(shape), backward)


@_quiet
def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = [0] * len(axes)
    for i, ax in enumerate(axes):
        inv[ax] = i
    inv = tuple(inv)

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _emit("transpose", (x,), np.ascontiguousarray(x.data.transpose(axes)), backward)


# -- linear algebra -----------------------------------------------------------------


@_quiet
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TensorError("matmul expects two tensors")
    if a.dtype != b.dtype:
        raise TensorError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise TensorError("matmul requires rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")

    # stacked rows @ 2D weight is the common case; one flat GEMM beats the
    # batched loop, and the weight gradient needs no unbroadcast sum
    if b.data.ndim == 2 and a.data.ndim > 2:
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(lead + (b.shape[-1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape)
            gb = a2.T @ g2
            return ga, gb

        return _emit("matmul", (a, b), out, backward)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", (a, b), np.matmul(a.data, b.data), backward)


@_quiet
def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b in one tape entry (x stacked rows, w 2D, b 1D)."""
    if x.dtype != w.dtype or x.dtype != b.dtype:
        raise TensorError("dtype mismatch in linear")
    if x.shape[-1] != w.shape[-2] or b.shape != (w.shape[-1],):
        raise TensorError(f"linear shapes disagree: {x.shape} @ {w.shape} + {b.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = (x2 @ w.data + b.data).reshape(lead + (w.shape[-1],))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        return (g2 @ w.data.T).reshape(x.shape), x2.T @ g2, g2.sum(axis=0)

    return _emit("linear", (x, w, b), out, backward)


@_quiet
def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TensorError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise TensorError(f"embedding id out of range [0, {table.shape[0]})")

    def backward(g):
        gt = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(gt, ids, g)
        return (gt,)

    return _emit("embedding", (table,), table.data[ids], backward)


@_quiet
def gather_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry per slice along the last axis (x[..., idx[...]])."""
    idx = np.asarray(idx)
    if idx.shape != x.shape[:-1]:
        raise TensorError(f"gather index shape {idx.shape} != {x.shape[:-1]}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-1]):
        raise TensorError("gather index out of range")

    def backward(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return _emit("gather", (x,), np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0], backward)


# -- neural-net ops -----------------------------------------------------------------


@_quiet
def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by max subtraction."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), y, backward)


@_quiet
def log_softmax(x: Tensor) -> Tensor:
    m = x.data.max(axis=-1, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse

    def backward(g):
        p = np.exp(y)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", (x,), y, backward)


@_quiet
def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero mean / unit variance along the last axis, then affine; eps sits
    inside the square root so constant rows stay finite."""
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise TensorError(f"layer_norm affine params must have shape ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True, dtype=x.dtype)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True, dtype=x.dtype)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xh = xc * inv
    y = gamma.data * xh + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xh).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxh = g * gamma.data
        dx = inv * (dxh - dxh.mean(axis=-1, keepdims=True) - xh * (dxh * xh).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _emit("layer_norm", (x, gamma, beta), y, backward)


@_quiet
def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU: 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715x^3)))."""
    c = np.asarray(_GELU_C, dtype=x.dtype)
    k = np.asarray(0.044715, dtype=x.dtype)
    sq = x.data * x.data  # x**n takes numpy's slow generic pow path on f32
    u = c * (x.data + k * (sq * x.data))
    t = np.tanh(u)
    y = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = c * (1.0 + 3.0 * k * sq)
        dy = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        return (g * dy,)

    return _emit("gelu", (x,), y, backward)


# -- differentiation helpers ---------------------------------------------------------


def value_and_grad(f: Callable[[list[Tensor]], Tensor], params: list[Tensor]) -> tuple[float, list[Tensor]]:
    """Evaluate a scalar-valued composition and return its value plus one
    gradient tensor per parameter (zeros for parameters the composition
    never touches)."""
    for p in params:
        p.requires_grad = True
    with GradTape() as tape:
        out = f(params)
    if not isinstance(out, Tensor):
        raise TensorError("composition must return a Tensor built from registered operations")
    if out.shape != ():
        raise TensorError("composition must be scalar-valued")
    tape.backward(out)
    grads = []
    for p in params:
        g = p.grad if p.grad is not None else np.zeros(p.shape, dtype=p.dtype)
        grads.append(_wrap(_own(g), False))
        p.grad = None
    return float(out.data), grads


def grad_check(
    f: Callable[[list[Tensor]], Tensor],
    params: list[Tensor],
    h: float = 1e-4,
    samples_per_param: int = 16,
    seed: int = 0,
) -> float:
    """Max relative error between analytic gradients and central differences
    over sampled coordinates.  Requires 64-bit parameters; finite differences
    are unreliable in 32-bit."""
    for p in params:
        if p.dtype != F64:
            raise TensorError("grad_check requires 64-bit parameters")
    _, grads = value_and_grad(f, params)
    rng = np.random.default_rng(seed)

    def eval_at(plist: list[Tensor]) -> float:
        with no_grad():
            return float(f(plist).data)

    worst = 0.0
    for k, (p, g) in enumerate(zip(params, grads)):
        n = p.size
        if n <= samples_per_param:
            coords = np.arange(n)
        else:
            coords = np.sort(rng.choice(n, size=samples_per_param, replace=False))
        flat = p.data.reshape(-1)
        for i in coords:
            step = h * max(1.0, abs(float(flat[i])))
            plus = flat.copy()
            plus[i] += step
            minus = flat.copy()
            minus[i] -= step
            params_plus = list(params)
            params_plus[k] = _wrap(plus.reshape(p.shape), False)
            params_minus = list(params)
            params_minus[k] = _wrap(minus.reshape(p.shape), False)
            cd = (eval_at(params_plus) - eval_at(params_minus)) / (2.0 * step)
            a = float(g.data.reshape(-1)[i])
            rel = abs(a - cd) / (abs(a) + abs(cd) + 1e-12)
            worst = max(worst, rel)
    return worst
