"""Dense tensors with a reverse-mode tape.

Images and feature maps are laid out row-major as ``H x W x C`` with the
channel axis innermost.  Spatial ops also accept a leading batch axis
(``N x H x W x C``).

Every op records a node on the tape (unless recording is disabled with
:func:`no_grad`).  :func:`backward` walks the nodes reachable from a scalar
loss in reverse creation order, so the tape is topologically ordered by
construction.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ConvSpec",
    "ShapeError",
    "NonFiniteError",
    "tensor",
    "parameter",
    "precision",
    "get_default_dtype",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "abs",
    "relu",
    "sum_over",
    "mean",
    "max_over",
    "min_over",
    "reshape",
    "stack",
    "where",
    "reflect_pad",
    "reflect_index",
    "conv2d",
    "conv2d_valid",
    "pixel_unshuffle",
    "pixel_shuffle",
]


class ShapeError(ValueError):
    """Raised when operand extents are incompatible with an op."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


_state = threading.local()
_counter = itertools.count()


def _local(name, default):
    return getattr(_state, name, default)


def get_default_dtype() -> np.dtype:
    return _local("dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors."""
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


def is_grad_enabled() -> bool:
    return _local("grad", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = is_grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class Tensor:
    """An ndarray plus the tape bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_order", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or get_default_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._order = next(_counter)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __abs__(self):
        return abs(self)

    def __getitem__(self, index):
        return _getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_over(self, axis, keepdims)

    def mean(self):
        return mean(self)

    def backward(self):
        return backward(self)


def tensor(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _record(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._order = next(_counter)
    out.op = op
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a mapping from each leaf that requires grad to its gradient.
    Interior nodes are released afterwards, so a tape can be consumed once.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any parameter on the tape")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in nodes or not node.requires_grad:
            continue
        nodes[id(node)] = node
        stack.extend(node._parents)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in sorted(nodes.values(), key=lambda n: n._order, reverse=True):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is None:
                g = np.zeros_like(node.data)
            node.grad = g if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        node._parents = ()
        node._backward = None
    return leaves


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        ga = g / b.data
        gb = -g * out / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, "div", (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, "neg", (a,), lambda g: (-g,))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the numpy name
    # np.sign(0) == 0 gives the zero subgradient at the kink
    return _record(np.abs(a.data), "abs", (a,), lambda g: (g * np.sign(a.data),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0).astype(a.dtype), "relu", (a,), lambda g: (g * mask,))


def where(mask, a, b) -> Tensor:
    """Select ``a`` where ``mask`` holds, else ``b``.  The mask is constant."""
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data).astype(np.result_type(a.dtype, b.dtype))

    def bw(g):
        return (
            _unbroadcast(np.where(mask, g, 0), a.shape),
            _unbroadcast(np.where(mask, 0, g), b.shape),
        )

    return _record(out, "where", (a, b), bw)


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    return axis % ndim


def sum_over(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(out), "sum", (a,), bw)


def mean(a: Tensor) -> Tensor:
    n = a.size

    def bw(g):
        return (np.full(a.shape, g / n, dtype=a.dtype),)

    return _record(np.asarray(a.data.mean(dtype=a.dtype)), "mean", (a,), bw)


def _extremum(a: Tensor, axis: int | None, keepdims: bool, pick, op: str) -> Tensor:
    # argmax/argmin return the first occurrence, which fixes tie routing
    if axis is None:
        flat = pick(a.data.reshape(-1))
        out = a.data.reshape(-1)[flat]

        def bw(g):
            grad = np.zeros(a.size, dtype=a.dtype)
            grad[flat] = g
            return (grad.reshape(a.shape),)

        if keepdims:
            out = np.reshape(out, (1,) * a.ndim)
        return _record(np.asarray(out), op, (a,), bw)

    axis = _norm_axis(axis, a.ndim)
    idx = np.expand_dims(pick(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, idx, g, axis=axis)
        return (grad,)

    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return _record(out, op, (a,), bw)


def max_over(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return _extremum(a, axis, keepdims, np.argmax, "max")


def min_over(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return _extremum(a, axis, keepdims, np.argmin, "min")


def reshape(a: Tensor, shape) -> Tensor:
    return _record(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _record(out, "stack", tensors, bw)


def _getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def bw(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _record(np.array(out, copy=True), "getitem", (a,), bw)


# ---------------------------------------------------------------------------
# spatial ops (NHWC; a 3-D input is treated as a batch of one)


def _batched(fn):
    def wrapper(t: Tensor, *args, **kwargs):
        if t.ndim == 3:
            out = fn(reshape(t, (1,) + t.shape), *args, **kwargs)
            return reshape(out, out.shape[1:])
        if t.ndim != 4:
            raise ShapeError(f"expected H x W x C or N x H x W x C, got shape {t.shape}")
        return fn(t, *args, **kwargs)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    wrapper.__wrapped__ = fn
    return wrapper


def reflect_index(i, n: int):
    """Map possibly out-of-range indices onto ``[0, n)`` by edge-exclusive mirroring."""
    i = np.asarray(i)
    if n == 1:
        return np.zeros_like(i)
    period = 2 * (n - 1)
    i = np.mod(i, period)
    return np.where(i >= n, period - i, i)


def _fold_reflect(g: np.ndarray, pad: int, axis: int) -> np.ndarray:
    """Adjoint of edge-exclusive reflection padding along one axis."""
    n = g.shape[axis] - 2 * pad
    g = np.moveaxis(g, axis, 0)
    out = g[pad : pad + n].copy()
    out[1 : pad + 1] += g[:pad][::-1]
    out[n - 1 - pad : n - 1] += g[n + pad :][::-1]
    return np.moveaxis(out, 0, axis)


@_batched
def reflect_pad(t: Tensor, pad: int) -> Tensor:
    """Mirror-pad rows and columns by ``pad`` without repeating the edge pixel."""
    if pad == 0:
        return t
    _, h, w, _ = t.shape
    if pad < 0 or pad >= min(h, w):
        raise ShapeError(f"reflection pad {pad} needs more than {pad} rows and cols, got {h}x{w}")
    out = np.pad(t.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="reflect")

    def bw(g):
        return (_fold_reflect(_fold_reflect(g, pad, 1), pad, 2),)

    return _record(out, "reflect_pad", (t,), bw)


@dataclass
class ConvSpec:
    """Weights ``out x in x kh x kw`` and bias ``out`` of one convolution."""

    weight: Tensor
    bias: Tensor
    padding_mode: str = "reflect"

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_extent(self) -> int:
        return self.weight.shape[2]


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Rows ordered (n, y, x); columns ordered (dy, dx, channel)."""
    c = xp.shape[-1]
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, kh * kw * c)


@_batched
def conv2d_valid(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Unpadded cross-correlation of an NHWC tensor with ``out x in x kh x kw`` weights."""
    n, hp, wp, c = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv expects {ci} input channels, got {c}")
    h, w = hp - kh + 1, wp - kw + 1
    if h < 1 or w < 1:
        raise ShapeError(f"input {hp}x{wp} smaller than kernel {kh}x{kw}")
    cols = _im2col(x.data, kh, kw)
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(kh * kw * ci, co)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, h, w, co)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, co)
        gw = (cols.T @ g2).reshape(kh, kw, ci, co).transpose(3, 2, 0, 1)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, h, w, kh, kw, ci)
            gx = np.zeros_like(x.data)
            for dy in range(kh):
                for dx in range(kw):
                    gx[:, dy : dy + h, dx : dx + w, :] += dcols[:, :, :, dy, dx, :]
        grads = (gx, np.ascontiguousarray(gw))
        if bias is not None:
            grads += (g2.sum(axis=0),)
        return grads

    return _record(out, "conv2d", parents, bw)


def conv2d(t: Tensor, spec: ConvSpec) -> Tensor:
    """3x3-style convolution with reflection padding that keeps the spatial size."""
    if t.shape[-1] != spec.in_channels:
        raise ShapeError(f"conv expects {spec.in_channels} input channels, got {t.shape[-1]}")
    k = spec.kernel_extent
    if spec.padding_mode == "reflect":
        t = reflect_pad(t, (k - 1) // 2)
    elif spec.padding_mode != "none":
        raise ValueError(f"unknown padding mode {spec.padding_mode!r}")
    return conv2d_valid(t, spec.weight, spec.bias)


@_batched
def pixel_unshuffle(t: Tensor, s: int) -> Tensor:
    """Space-to-depth.  Output channel ``c*s*s + i*s + j`` holds offset ``(i, j)`` of channel ``c``."""
    n, h, w, c = t.shape
    if h % s or w % s:
        raise ShapeError(f"scale {s} does not divide {h}x{w}")
    out = (
        t.data.reshape(n, h // s, s, w // s, s, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, h // s, w // s, c * s * s)
    )

    def bw(g):
        return (
            g.reshape(n, h // s, w // s, c, s, s).transpose(0, 1, 4, 2, 5, 3).reshape(t.shape),
        )

    return _record(out, "pixel_unshuffle", (t,), bw)


@_batched
def pixel_shuffle(t: Tensor, s: int) -> Tensor:
    """Depth-to-space; exact inverse of :func:`pixel_unshuffle`."""
    n, h, w, cs = t.shape
    if cs % (s * s):
        raise ShapeError(f"{cs} channels not divisible by {s * s}")
    c = cs // (s * s)
    out = t.data.reshape(n, h, w, c, s, s).transpose(0, 1, 4, 2, 5, 3).reshape(n, h * s, w * s, c)

    def bw(g):
        return (
            g.reshape(n, h, s, w, s, c).transpose(0, 1, 3, 5, 2, 4).reshape(t.shape),
        )

    return _record(out, "pixel_shuffle", (t,), bw)
