"""Dense tensors with a reverse-mode gradient tape.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` and a ``backward`` method.  Calling ``Op.apply(*inputs)`` runs the
forward pass on numpy arrays, checks the result is finite, bumps the global
multiply-accumulate (MAC) counter and, if any input requires a gradient,
links the result to the function instance so :func:`backward` can replay the
graph as a :class:`Tape`.

    >>> w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> loss = sum_all(mul(w, w))
    >>> backward(loss)
    >>> w.grad
    array([2., 4., 6.], dtype=float32)
"""

from __future__ import annotations

import contextlib
import itertools
import math
import os
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "Tape", "Function", "ContractError", "ShapeError", "NonFiniteError",
    "backward", "no_grad", "zero_grad", "grad_check", "registered_ops",
    "get_default_dtype", "set_default_dtype", "precision",
    "mac_count", "reset_macs",
    "add", "sub", "mul", "div", "scale", "matmul", "transpose", "reshape",
    "concat", "take", "sum_all", "sum_axis", "mean", "exp", "log", "sqrt",
    "clamp_min", "softmax_rows", "logsumexp_rows", "layer_norm", "gelu",
]


class ContractError(RuntimeError):
    """An operation was called in a state its contract forbids."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf."""


# ---------------------------------------------------------------------------
# precision and counters

_default_dtype = np.dtype(np.float64 if os.environ.get("CVFORMER_F64") == "1" else np.float32)


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (e.g. ``precision(np.float64)``)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


_macs = 0


def mac_count() -> int:
    """Multiply-accumulates performed by forward ops since the last reset."""
    return _macs


def reset_macs() -> None:
    global _macs
    _macs = 0


def _count(n: int) -> None:
    global _macs
    _macs += int(n)


# ---------------------------------------------------------------------------
# tape

class Tape:
    """Recorded operations leading to one loss, in recording order.

    Every op gets a monotonically increasing sequence number when it runs, so
    sorting the ops reachable from a loss by that number gives a topological
    order.  A tape is single use: :func:`backward` walks it once in reverse and
    marks every node consumed.
    """

    def __init__(self, nodes: list["Function"]) -> None:
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: "Tensor") -> "Tape":
        seen: dict[int, Function] = {}
        stack = [loss._node] if loss._node is not None else []
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen[id(node)] = node
            stack.extend(t._node for t in node.inputs if t._node is not None)
        return cls(sorted(seen.values(), key=lambda n: n.seq))

    @property
    def consumed(self) -> bool:
        return any(n.consumed for n in self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)


_sequence = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run forward ops without recording them."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


# ---------------------------------------------------------------------------
# tensor

class Tensor:
    """Row-major dense array that can take part in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        arr = np.array(data, dtype=dtype or _default_dtype)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Function | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return scale(self, -1.0)
    def __getitem__(self, key): return take(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _default_dtype
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# function base

_REGISTRY: dict[str, type["Function"]] = {}


def registered_ops() -> list[str]:
    """Names of every differentiable op, in definition order."""
    return list(_REGISTRY)


class Function:
    """One differentiable op.  Subclasses set ``name`` and implement
    ``forward(*arrays, **kwargs) -> array`` and ``backward(grad) -> grads``,
    where ``grads`` has one entry (or ``None``) per input.  Any state needed by
    ``backward`` is stored on ``self`` during ``forward``.
    """

    name = ""

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if cls.name:
            _REGISTRY[cls.name] = cls

    inputs: tuple[Tensor, ...] = ()
    needs: tuple[bool, ...] = ()
    seq = -1
    consumed = False

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = tuple(x if isinstance(x, Tensor) else _as_tensor(x) for x in inputs)
        fn = cls()
        needs = tuple(t.requires_grad for t in tensors)
        fn.needs = needs
        out = fn.forward(*[t.data for t in tensors], **kwargs)
        # a finite sum implies finite entries; only re-check on the rare miss
        if not math.isfinite(out.sum()) and not np.isfinite(out).all():
            raise NonFiniteError(f"{cls.name}: forward produced NaN or Inf")
        record = any(needs) and getattr(_state, "grad_enabled", True)
        result = Tensor._wrap(out, requires_grad=record)
        if record:
            fn.inputs = tensors
            fn.seq = next(_sequence)
            result._node = fn
        return result


# ---------------------------------------------------------------------------
# elementwise

class Add(Function):
    name = "add"

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        out = a + b
        _count(out.size)
        return out

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        out = a - b
        _count(out.size)
        return out

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        self.a, self.b = a, b
        out = a * b
        _count(out.size)
        return out

    def backward(self, g):
        ga = _unbroadcast(g * self.b, self.a.shape) if self.needs[0] else None
        gb = _unbroadcast(g * self.a, self.b.shape) if self.needs[1] else None
        return ga, gb


class Div(Function):
    name = "div"

    def forward(self, a, b):
        self.a, self.b = a, b
        out = a / b
        _count(out.size)
        return out

    def backward(self, g):
        ga = _unbroadcast(g / self.b, self.a.shape) if self.needs[0] else None
        gb = _unbroadcast(-g * self.a / (self.b * self.b), self.b.shape) if self.needs[1] else None
        return ga, gb


class Scale(Function):
    name = "scale"

    def forward(self, a, factor: float = 1.0):
        self.factor = factor
        _count(a.size)
        return a * a.dtype.type(factor)

    def backward(self, g):
        return (g * g.dtype.type(self.factor),)


class Exp(Function):
    name = "exp"

    def forward(self, a):
        self.out = np.exp(a)
        _count(a.size)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Log(Function):
    name = "log"

    def forward(self, a):
        if (a <= 0).any():
            raise NonFiniteError("log: non-positive input")
        self.a = a
        _count(a.size)
        return np.log(a)

    def backward(self, g):
        return (g / self.a,)


class Sqrt(Function):
    name = "sqrt"

    def forward(self, a):
        if (a < 0).any():
            raise NonFiniteError("sqrt: negative input")
        self.out = np.sqrt(a)
        _count(a.size)
        return self.out

    def backward(self, g):
        return (g * 0.5 / self.out,)


class ClampMin(Function):
    name = "clamp_min"

    def forward(self, a, floor: float = 0.0):
        self.mask = a >= floor
        _count(a.size)
        return np.maximum(a, a.dtype.type(floor))

    def backward(self, g):
        return (g * self.mask,)


class GELU(Function):
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF computed via erf."""

    name = "gelu"

    def forward(self, a):
        self.a = a
        # python-float constants keep float32 inputs in float32
        self.cdf = 0.5 * (1.0 + erf(a * _INV_SQRT2))
        _count(a.size)
        return a * self.cdf

    def backward(self, g):
        pdf = np.exp(-0.5 * self.a * self.a) * _INV_SQRT_2PI
        return (g * (self.cdf + self.a * pdf),)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# linear algebra and shape ops

class MatMul(Function):
    """(..., m, k) @ (..., k, n) with numpy batch broadcasting.

    Counts ``batch * m * k * n`` MACs.
    """

    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        self.a, self.b = a, b
        if b.ndim == 2 and a.ndim > 2:
            # stacked activations times a weight matrix: one flat GEMM
            out = (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[-1],))
        else:
            out = a @ b
        batch = int(np.prod(out.shape[:-2], dtype=np.int64))
        _count(batch * a.shape[-2] * a.shape[-1] * b.shape[-1])
        return out

    def backward(self, g):
        a, b = self.a, self.b
        ga = gb = None
        if b.ndim == 2 and a.ndim > 2:
            g2 = g.reshape(-1, g.shape[-1])
            if self.needs[0]:
                ga = (g2 @ b.T).reshape(a.shape)
            if self.needs[1]:
                gb = a.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        if self.needs[0]:
            ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
        if self.needs[1]:
            gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
        return ga, gb


class Transpose(Function):
    name = "transpose"

    def forward(self, a, axes: tuple[int, ...] | None = None):
        if axes is None:
            axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
        self.inverse = tuple(np.argsort(axes))
        return np.ascontiguousarray(np.transpose(a, axes))

    def backward(self, g):
        return (np.ascontiguousarray(np.transpose(g, self.inverse)),)


class Reshape(Function):
    name = "reshape"

    def forward(self, a, shape: tuple[int, ...] = ()):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.shape),)


class Concat(Function):
    name = "concat"

    def forward(self, *arrays, axis: int = 0):
        self.axis = axis
        self.sizes = [x.shape[axis] for x in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(g, cuts, axis=self.axis))


class Take(Function):
    """Basic indexing (integers and slices) with a scatter backward."""

    name = "take"

    def forward(self, a, key=()):
        self.key, self.shape = key, a.shape
        return np.array(a[key])

    def backward(self, g):
        out = np.zeros(self.shape, dtype=g.dtype)
        out[self.key] = g
        return (out,)


class SumAll(Function):
    name = "sum_all"

    def forward(self, a):
        self.shape = a.shape
        _count(a.size)
        return np.array(a.sum(), dtype=a.dtype)

    def backward(self, g):
        return (np.broadcast_to(g, self.shape).copy(),)


class SumAxis(Function):
    name = "sum_axis"

    def forward(self, a, axis: int = -1, keepdims: bool = False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        _count(a.size)
        return a.sum(axis=axis, keepdims=keepdims)

    def backward(self, g):
        if not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, self.shape).copy(),)


class Mean(Function):
    name = "mean"

    def forward(self, a, axis: int = -1, keepdims: bool = False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        _count(a.size)
        return a.mean(axis=axis, keepdims=keepdims)

    def backward(self, g):
        if not self.keepdims:
            g = np.expand_dims(g, self.axis)
        n = self.shape[self.axis]
        return (np.broadcast_to(g / n, self.shape).copy(),)


# ---------------------------------------------------------------------------
# normalisation

class Softmax(Function):
    """Softmax over the last axis with per-row max subtraction.

    Counts one MAC per element.
    """

    name = "softmax_rows"

    def forward(self, a):
        z = np.exp(a - a.max(axis=-1, keepdims=True))
        self.out = z / z.sum(axis=-1, keepdims=True)
        _count(a.size)
        return self.out

    def backward(self, g):
        s = self.out
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


class LogSumExp(Function):
    name = "logsumexp_rows"

    def forward(self, a):
        m = a.max(axis=-1, keepdims=True)
        z = np.exp(a - m)
        total = z.sum(axis=-1, keepdims=True)
        self.weights = z / total
        _count(a.size)
        return (np.log(total) + m)[..., 0]

    def backward(self, g):
        return (g[..., None] * self.weights,)


class LayerNorm(Function):
    """Normalise the last axis to zero mean / unit variance, then ``* gain + bias``.

    Counts four MACs per element (mean, variance, normalise, affine).
    """

    name = "layer_norm"

    def forward(self, x, gain, bias, eps: float = 1e-5):
        if x.shape[-1] < 2:
            raise ShapeError(f"layer_norm needs width >= 2, got {x.shape}")
        mu = x.mean(axis=-1, keepdims=True)
        centred = x - mu
        var = (centred * centred).mean(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = centred * self.inv_std
        self.gain = gain
        _count(4 * x.size)
        return self.xhat * gain + bias

    def backward(self, g):
        xhat = self.xhat
        dxhat = g * self.gain
        dx = self.inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead) if self.needs[1] else None
        dbias = g.sum(axis=lead) if self.needs[2] else None
        return dx, dgain, dbias


# ---------------------------------------------------------------------------
# functional wrappers

def add(a, b) -> Tensor:
    return Add.apply(*_pair(a, b))


def sub(a, b) -> Tensor:
    return Sub.apply(*_pair(a, b))


def mul(a, b) -> Tensor:
    return Mul.apply(*_pair(a, b))


def div(a, b) -> Tensor:
    return Div.apply(*_pair(a, b))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    return _as_tensor(a, like), _as_tensor(b, like)


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=float(factor))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    return Transpose.apply(a, axes=None if axes is None else tuple(axes))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def take(a: Tensor, key) -> Tensor:
    return Take.apply(a, key=key)


def sum_all(a: Tensor) -> Tensor:
    return SumAll.apply(a)


def sum_axis(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    return SumAxis.apply(a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def exp(a: Tensor) -> Tensor:
    return Exp.apply(a)


def log(a: Tensor) -> Tensor:
    return Log.apply(a)


def sqrt(a: Tensor) -> Tensor:
    return Sqrt.apply(a)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    return ClampMin.apply(a, floor=float(floor))


def softmax_rows(x: Tensor) -> Tensor:
    return Softmax.apply(x)


def logsumexp_rows(x: Tensor) -> Tensor:
    return LogSumExp.apply(x)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    return LayerNorm.apply(x, gain, bias, eps=eps)


def gelu(x: Tensor) -> Tensor:
    return GELU.apply(x)


# ---------------------------------------------------------------------------
# gradients

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Gradients add into existing buffers; call :func:`zero_grad` between steps.
    The graph behind ``loss`` is released afterwards, so a second call raises.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
            return
        raise ContractError("loss does not depend on any tensor that requires grad")
    tape = Tape.from_loss(loss)
    if tape.consumed:
        raise ContractError("tape already consumed by an earlier backward()")

    # each node produces exactly one tensor, so pending grads are keyed by node
    grads: dict[int, np.ndarray] = {id(loss._node): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        out_grad = grads.pop(id(node), None)
        if out_grad is None:
            continue
        for inp, g in zip(node.inputs, node.backward(out_grad)):
            if g is None or not inp.requires_grad:
                continue
            if inp._node is None:
                _accumulate(inp, g)
            else:
                key = id(inp._node)
                prev = grads.get(key)
                grads[key] = g if prev is None else prev + g
    for node in tape.nodes:
        node.__dict__.clear()  # drop saved activations
        node.consumed = True


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is re-evaluated with each coordinate of each tensor in ``params``
    nudged by ``+-h``; the error per coordinate is
    ``|a - n| / max(1e-8, |a| + |n|)``.  Requires 64-bit tensors.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ContractError("grad_check requires float64 tensors")
    zero_grad(params)
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            a_flat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * h)
                err = abs(a_flat[i] - numeric) / max(1e-8, abs(a_flat[i]) + abs(numeric))
                worst = max(worst, err)
    zero_grad(params)
    return worst
