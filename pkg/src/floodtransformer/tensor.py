"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` when at least one
input requires a gradient. Outside of a ``with Tape():`` block nothing is
recorded, which is how inference runs.

There is no implicit broadcasting. Binary elementwise ops demand equal
shapes; use :func:`expand` to broadcast explicitly.
"""

from __future__ import annotations

import builtins
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidParam, NotScalar, ShapeMismatch

DTYPE = np.float64
GELU_COEFF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

_local = threading.local()


class Tensor:
    """N-dimensional float64 array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


@dataclass
class Node:
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of operations; consumed by :func:`backward`.

    Nodes are appended in execution order, so the list is already a
    topological order of the computation graph.
    """

    nodes: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, node: Node) -> None:
        if self.consumed:
            raise RuntimeError("cannot record on a consumed tape")
        node.output._tape = self
        self.nodes.append(node)


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording, even inside an enclosing tape."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._tape = None
    out.name = None
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(Node(inputs, out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaf gradients accumulate, so callers zero them between steps.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise RuntimeError("loss was not produced on an active tape")
    if tape.consumed:
        raise RuntimeError("tape already consumed")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp._tape is None:
                if inp.grad is None:
                    inp.grad = np.array(ig, dtype=DTYPE, copy=True)
                else:
                    inp.grad = inp.grad + ig
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = ig if prev is None else prev + ig
    tape.nodes.clear()
    tape.consumed = True


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Hadamard product."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b), lambda g: (g / bd, -g * out / bd))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _result(x.data + float(c), (x,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign to keep exp() from overflowing
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    z = x.data
    inner = _SQRT_2_OVER_PI * (z + GELU_COEFF * z**3)
    t = np.tanh(inner)
    out = 0.5 * z * (1.0 + t)

    def _bw(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * z**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t**2) * dinner),)

    return _result(out, (x,), _bw)


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "relu": relu,
    "gelu": gelu,
    "sigmoid": sigmoid,
}


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch one of ``add``, ``mul``, ``relu``, ``gelu``, ``sigmoid`` by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise InvalidParam(f"unknown elementwise op {op!r}") from None
    binary = op in ("add", "mul")
    if binary and b is None:
        raise InvalidParam(f"{op} needs two operands")
    if not binary and b is not None:
        raise InvalidParam(f"{op} takes a single operand")
    return fn(a, b) if binary else fn(a)


# --- shape manipulation ----------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as err:
        raise ShapeMismatch(str(err)) from None
    return _result(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    shape = x.shape

    def _bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[index] += g
        return (full,)

    return _result(np.array(x.data[index], dtype=DTYPE), (x,), _bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise InvalidParam("concat of nothing")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(
            t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax
        ):
            raise ShapeMismatch(f"concat: incompatible shapes {[u.shape for u in tensors]}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _result(out, tensors, lambda g: tuple(np.split(g, bounds, axis=ax)))


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast (numpy rules) to ``shape``."""
    shape = tuple(shape)
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeMismatch(f"cannot expand {src} to {shape}") from None
    lead = len(shape) - len(src)

    def _bw(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _result(np.array(out), (x,), _bw)


# --- reductions ------------------------------------------------------------


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out, dtype=DTYPE), (x,), _bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def max(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)
    shape = x.shape

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(full, idx, g, axis=axis)
        return (full,)

    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return _result(out, (x,), _bw)


# --- linear algebra and neural-net primitives ------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise InvalidParam(f"axis {axis} out of range for shape {x.shape}")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result(out, (x,), _bw)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise normalization of an ``N x D`` tensor with affine scale/shift."""
    if not eps > 0:
        raise InvalidParam(f"eps must be positive, got {eps}")
    if x.ndim != 2:
        raise ShapeMismatch(f"layernorm expects N x D input, got {x.shape}")
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"gamma/beta must have shape ({d},)")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def _bw(g):
        dxhat = g * gd
        dx = inv / d * (
            d * dxhat
            - dxhat.sum(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result(out, (x, gamma, beta), _bw)


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(
    input: Tensor,
    kernel: Tensor,
    stride: int = 1,
    padding: int = 0,
    bias: Tensor | None = None,
) -> Tensor:
    """Cross-correlation of a ``C_in x H x W`` map with ``C_out x C_in x k x k`` kernels."""
    if stride < 1:
        raise InvalidParam(f"stride must be positive, got {stride}")
    if padding < 0:
        raise InvalidParam(f"padding must be non-negative, got {padding}")
    if input.ndim != 3 or kernel.ndim != 4:
        raise ShapeMismatch(f"conv2d expects CxHxW input and OxCxkxk kernel, got {input.shape}, {kernel.shape}")
    c_in, h, w = input.shape
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise ShapeMismatch(f"conv2d channel mismatch: input {c_in}, kernel {kc}")
    if kh != kw:
        raise ShapeMismatch("conv2d kernels must be square")
    k = kh
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeMismatch(f"kernel {k} larger than padded input {h}x{w}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeMismatch(f"bias must have shape ({c_out},)")

    xp = np.pad(input.data, ((0, 0), (padding, padding), (padding, padding))) if padding else input.data
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    kd = kernel.data
    out = np.tensordot(kd, win, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        out += bias.data[:, None, None]

    def _bw(g):
        dk = np.tensordot(g, win, axes=([1, 2], [1, 2]))
        dx = None
        if input.requires_grad:
            dwin = np.tensordot(kd, g, axes=([0], [0]))  # C_in, k, k, Ho, Wo
            dxp = np.zeros(xp.shape, dtype=DTYPE)
            hs = stride * (ho - 1) + 1
            ws = stride * (wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    dxp[:, i : i + hs : stride, j : j + ws : stride] += dwin[:, i, j]
            dx = dxp[:, padding : padding + h, padding : padding + w] if padding else dxp
        grads = [dx, dk]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    inputs = (input, kernel) if bias is None else (input, kernel, bias)
    return _result(out, inputs, _bw)


def bilinear_matrix(n: int, factor: int) -> np.ndarray:
    """``factor*n x n`` interpolation matrix, half-pixel centers (align_corners=False)."""
    m = np.zeros((n * factor, n), dtype=DTYPE)
    for o in range(n * factor):
        src = builtins.max((o + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


_BILINEAR_CACHE: dict = {}


def _cached_bilinear(n: int, factor: int) -> np.ndarray:
    key = (n, factor)
    m = _BILINEAR_CACHE.get(key)
    if m is None:
        m = _BILINEAR_CACHE[key] = bilinear_matrix(n, factor)
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise InvalidParam(f"upsample factor must be >= 1, got {factor}")
    if x.ndim != 3:
        raise ShapeMismatch(f"upsample expects CxHxW, got {x.shape}")
    if factor == 1:
        return _result(x.data.copy(), (x,), lambda g: (g,))
    _, h, w = x.shape
    mh = _cached_bilinear(h, factor)
    mw = _cached_bilinear(w, factor)
    out = np.matmul(np.matmul(mh, x.data), mw.T)
    return _result(out, (x,), lambda g: (np.matmul(np.matmul(mh.T, g), mw),))


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy of ``sigmoid(logits)`` against a fixed 0/1 target."""
    y = np.asarray(target, dtype=DTYPE)
    if y.shape != logits.shape:
        raise ShapeMismatch(f"target shape {y.shape} != logits shape {logits.shape}")
    z = logits.data
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return _result(out, (logits,), lambda g: (g * (_sigmoid(z) - y),))
