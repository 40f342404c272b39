"""Dense tensors with reverse-mode gradients.

Every differentiable primitive computes its value with numpy and, when any
input requires gradients, records a node holding its parents and a closure
that maps the output gradient to per-parent gradients.  :func:`backward`
replays those closures in reverse topological order.

Broadcasting follows numpy's right-aligned rule (size-1 axes expand, missing
leading axes are added).  Anything else is a shape error.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from codecflow import kernels
from codecflow.errors import ConfigurationError, UsageError

_dtype = np.dtype(np.float32)
_grad_enabled = True


def default_dtype() -> np.dtype:
    return _dtype


@contextmanager
def double_precision():
    """Create and compute tensors in float64 inside the block (gradient checks)."""
    global _dtype
    prev, _dtype = _dtype, np.dtype(np.float64)
    try:
        yield
    finally:
        _dtype = prev


@contextmanager
def no_grad():
    """Skip graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "is_param", "_parents", "_backward", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        # parameters stay visible to Module walks even while frozen
        self.is_param = False
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    # -- introspection
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return detach(self)

    # -- operators
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = req
    out._parents = tuple(parents) if req else ()
    out._backward = backward_fn if req else None
    return out


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ConfigurationError(f"{op}: shapes {a} and {b} do not broadcast") from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- backward


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The graph is kept, so calling twice (after zeroing grads) reproduces the
    same gradients bit for bit.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g, dtype=node.data.dtype) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), bw)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _node(-x.data, (x,), lambda g: (-g,))


def power(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    if isinstance(exponent, Tensor):
        raise UsageError("power supports constant exponents only")
    p = float(exponent)

    def bw(g):
        return (g * p * x.data ** (p - 1.0),)

    return _node(x.data**p, (x,), bw)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _node(out, (x,), lambda g: (g * 0.5 / out,))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return special.expit(v)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _node(s, (x,), lambda g: (g * s * (1 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1 - out * out),))


def swish(x) -> Tensor:
    """x * sigmoid(x)."""
    x = as_tensor(x)
    s = _sigmoid(x.data)
    out = x.data * s

    def bw(g):
        return (g * (s + out * (1 - s)),)

    return _node(out, (x,), bw)


def glu(x, axis: int = -1) -> Tensor:
    """First half gated by sigmoid of the second half along ``axis``."""
    x = as_tensor(x)
    n = x.shape[axis]
    if n % 2:
        raise ConfigurationError(f"glu: axis {axis} of shape {x.shape} has odd size")
    a, b = np.split(x.data, 2, axis=axis)
    s = _sigmoid(b)
    out = a * s

    def bw(g):
        return (np.concatenate([g * s, g * a * s * (1 - s)], axis=axis),)

    return _node(out, (x,), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (x,), bw)


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _node(y, (x,), bw)


def l2_norm(x, axis: int = -1, keepdims: bool = True) -> Tensor:
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (gk * np.where(n > 0, x.data / safe, 0.0),)

    return _node(n if keepdims else np.squeeze(n, axis=axis), (x,), bw)


def detach(x) -> Tensor:
    """Same values, cut from the graph (stop-gradient)."""
    x = as_tensor(x)
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.grad = None
    out.name = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    return out


# ---------------------------------------------------------------- reductions & shape


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _node(np.asarray(out, dtype=x.dtype), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axes, keepdims) * (1.0 / max(count, 1))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ConfigurationError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _node(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ConfigurationError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, ts, bw)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    out = x.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out, dtype=x.dtype), (x,), bw)


def take(table, indices) -> Tensor:
    """Row lookup: ``table[indices]`` for an integer index array of any shape."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise UsageError(f"take: index out of range for table with {table.shape[0]} rows")
    out = table.data[idx]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape((-1,) + table.shape[1:]))
        return (full,)

    return _node(out, (table,), bw)


def take_along(x, indices, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    out = np.take_along_axis(x.data, idx, axis=axis)
    ax = axis % x.ndim

    def bw(g):
        full = np.zeros_like(x.data)
        grid = list(np.indices(idx.shape, sparse=True))
        grid[ax] = idx
        np.add.at(full, tuple(grid), g)
        return (full,)

    return _node(out, (x,), bw)


def pad_last(x, left: int, right: int) -> Tensor:
    """Zero-pad the last axis."""
    x = as_tensor(x)
    widths = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    out = np.pad(x.data, widths)
    n = x.shape[-1]
    return _node(out, (x,), lambda g: (g[..., left : left + n],))


def frame(x, size: int, hop: int) -> Tensor:
    """Split the last axis into ``[n_frames, size]`` windows at stride ``hop``."""
    x = as_tensor(x)
    n = x.shape[-1]
    n_frames = 0 if n < size else 1 + (n - size) // hop
    lead = x.shape[:-1]
    if n_frames == 0:
        out = np.zeros(lead + (0, size), dtype=x.dtype)
    else:
        out = np.ascontiguousarray(sliding_window_view(x.data, size, axis=-1)[..., ::hop, :][..., :n_frames, :])

    def bw(g):
        if n_frames == 0:
            return (np.zeros_like(x.data),)
        flat = g.reshape(-1, n_frames, size)
        return (kernels.overlap_add(flat, hop, n).reshape(x.shape),)

    return _node(out, (x,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``b`` 2-D (shared weights) or ``a``/``b`` with equal batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ConfigurationError(f"matmul: need >= 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ConfigurationError(f"matmul: shapes {a.shape} @ {b.shape} do not conform")
    if b.ndim == 2:
        # one 2-D GEMM instead of a stack of small ones
        out = (np.ascontiguousarray(a.data).reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = np.matmul(a.data, b.data)

    def bw(g):
        ga = None
        if a.requires_grad:
            if b.ndim == 2:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                gb = np.ascontiguousarray(a.data).reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _node(out, (a, b), bw)


def _pads(padding) -> tuple[int, int]:
    if isinstance(padding, int):
        return padding, padding
    left, right = padding
    return int(left), int(right)


def conv1d(x, weight, bias=None, stride: int = 1, padding=0, groups: int = 1) -> Tensor:
    """Cross-correlation over ``x[B, C_in, T]`` with ``weight[C_out, C_in/groups, K]``.

    ``groups`` is 1 (dense) or equal to ``C_in == C_out`` (depthwise).
    ``padding`` is an int or a ``(left, right)`` pair of zero samples.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3:
        raise ConfigurationError(f"conv1d: expected [B,C,T] input and [O,I,K] weight, got {x.shape}, {weight.shape}")
    bsz, cin, length = x.shape
    cout, cin_g, width = weight.shape
    depthwise = groups != 1
    if depthwise and not (groups == cin == cout and cin_g == 1):
        raise ConfigurationError(f"conv1d: groups={groups} supports only depthwise, got {x.shape}, {weight.shape}")
    if not depthwise and cin_g != cin:
        raise ConfigurationError(f"conv1d: input channels {cin} != weight in-channels {cin_g}")
    pl, pr = _pads(padding)
    padded = pl + length + pr
    n_out = (padded - width) // stride + 1
    if n_out <= 0:
        raise ConfigurationError(f"conv1d: input length {length} too short for kernel {width}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pl, pr))) if (pl or pr) else x.data
    span = stride * (n_out - 1) + 1

    if depthwise:
        w = weight.data[:, 0, :]
        out = np.zeros((bsz, cout, n_out), dtype=x.dtype)
        for k in range(width):
            out += w[None, :, k, None] * xp[:, :, k : k + span : stride]
        cols = None
    else:
        cols = sliding_window_view(xp, width, axis=2)[:, :, : span : stride, :]
        cols = np.ascontiguousarray(cols.transpose(0, 2, 1, 3)).reshape(bsz * n_out, cin * width)
        wmat = weight.data.reshape(cout, cin * width)
        out = (cols @ wmat.T).reshape(bsz, n_out, cout).transpose(0, 2, 1)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None]
        parents.append(bias)

    def bw(g):
        gx = gw = None
        if depthwise:
            w = weight.data[:, 0, :]
            if weight.requires_grad:
                gw = np.stack(
                    [(g * xp[:, :, k : k + span : stride]).sum(axis=(0, 2)) for k in range(width)], axis=1
                )[:, None, :]
            if x.requires_grad:
                gcols = g[:, :, :, None] * w[None, :, None, :]
                gxp = kernels.overlap_add(gcols.reshape(bsz * cin, n_out, width), stride, padded)
                gx = gxp.reshape(bsz, cin, padded)[:, :, pl : pl + length]
        else:
            g2 = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(bsz * n_out, cout)
            if weight.requires_grad:
                gw = (g2.T @ cols).reshape(cout, cin, width)
            if x.requires_grad:
                gcols = (g2 @ wmat).reshape(bsz, n_out, cin, width).transpose(0, 2, 1, 3)
                gxp = kernels.overlap_add(gcols.reshape(bsz * cin, n_out, width), stride, padded)
                gx = gxp.reshape(bsz, cin, padded)[:, :, pl : pl + length]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)) if bias.requires_grad else None)
        return grads

    return _node(np.ascontiguousarray(out), parents, bw)


def conv_transpose1d(x, weight, bias=None, stride: int = 1, crop=0) -> Tensor:
    """Transposed convolution of ``x[B, C_in, T]`` with ``weight[C_in, C_out, K]``.

    The full output has ``(T - 1) * stride + K`` samples; ``crop`` removes
    ``(left, right)`` samples from it.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[0]:
        raise ConfigurationError(f"conv_transpose1d: shapes {x.shape} and {weight.shape} do not conform")
    bsz, cin, length = x.shape
    _, cout, width = weight.shape
    cl, cr = _pads(crop)
    full_len = (length - 1) * stride + width
    if full_len - cl - cr <= 0:
        raise ConfigurationError(f"conv_transpose1d: crop {crop} removes the whole output")
    x2 = np.ascontiguousarray(x.data.transpose(0, 2, 1)).reshape(bsz * length, cin)
    wmat = weight.data.reshape(cin, cout * width)
    cols = (x2 @ wmat).reshape(bsz, length, cout, width).transpose(0, 2, 1, 3)
    full = kernels.overlap_add(cols.reshape(bsz * cout, length, width), stride, full_len)
    out = full.reshape(bsz, cout, full_len)[:, :, cl : full_len - cr]
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None]
        parents.append(bias)

    def bw(g):
        gfull = np.zeros((bsz, cout, full_len), dtype=g.dtype)
        gfull[:, :, cl : full_len - cr] = g
        span = stride * (length - 1) + 1
        gcols = sliding_window_view(gfull, width, axis=2)[:, :, :span:stride, :]
        gc2 = np.ascontiguousarray(gcols.transpose(0, 2, 1, 3)).reshape(bsz * length, cout * width)
        gx = (gc2 @ wmat.T).reshape(bsz, length, cin).transpose(0, 2, 1) if x.requires_grad else None
        gw = (x2.T @ gc2).reshape(cin, cout, width) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)) if bias.requires_grad else None)
        return grads

    return _node(np.ascontiguousarray(out), parents, bw)
