"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable op builds a node holding its parents and a gradient
function ``grad_fn(g) -> tuple of parent gradients``.  :meth:`Tensor.backward`
walks the graph in reverse topological order exactly once.  Leaf tensors
created with ``requires_grad=True`` accumulate into ``.grad`` across calls;
intermediate gradients live only for the duration of one backward pass.

Images and feature maps are stored channel-first, ``[C, H, W]``.
"""
from __future__ import annotations

import os
from typing import Callable, Sequence

import numpy as np

DEBUG = bool(int(os.environ.get("POSEDESC_DEBUG", "0")))


class ShapeError(ValueError):
    pass


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """Dense float64 array with an optional gradient accumulator."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if (requires_grad and not _parents) else None
        self._parents = _parents
        self._grad_fn: Callable | None = None
        self._op = _op

    # --- basic accessors -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}{flag}{op})"

    # --- backward ----------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar root, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._grad_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # --- operator sugar ----------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_over(self, axis, keepdims)

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

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def _node(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    if DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError(f"non-finite output from {op}")
    if not any(p.requires_grad for p in parents):
        return Tensor(data)
    out = Tensor(data, requires_grad=True, _parents=tuple(parents), _op=op)
    out._grad_fn = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --- elementwise -------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "sub")
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def scalar_mul(a, c: float) -> Tensor:
    a = _lift(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scalar_mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def grad_fn(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), grad_fn, "div")


def power(a, exponent: float) -> Tensor:
    a = _lift(a)
    p = float(exponent)
    return _node(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _lift(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = _lift(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def absolute(a) -> Tensor:
    a = _lift(a)
    sign = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


# --- reductions and shape ops ---------------------------------------------------
def sum_over(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), grad_fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scalar_mul(sum_over(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _node(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def index_select(a, index) -> Tensor:
    """Numpy-style indexing (basic or advanced); repeated indices accumulate."""
    a = _lift(a)
    out = a.data[index]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out, copy=True), (a,), grad_fn, "index")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# --- linear algebra ----------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _node(out, (a, b), grad_fn, "matmul")


def _phase_split(x: np.ndarray, k: int, s: int, p: int):
    """Pad and split ``[C, H, W]`` into ``s * s`` stride phases laid out flat.

    Tap ``(i, j)`` of a stride-``s`` convolution reads phase ``(i % s, j % s)``
    at a flat offset, so every tap is one contiguous slice of a phase.
    """
    c, h, w = x.shape
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    wq = -(-(w + 2 * p) // s)
    hq = ho + (k - 1) // s + 1
    padded = np.zeros((c, hq * s, wq * s))
    padded[:, p : p + h, p : p + w] = x
    phases = np.empty((s, s, c, hq * wq))
    for a in range(s):
        for b in range(s):
            phases[a, b] = padded[:, a::s, b::s].reshape(c, -1)
    return phases, ho, wo, wq, hq


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a ``[C, H, W]`` input with ``[O, C, k, k]`` weights."""
    x, weight = _lift(x), _lift(weight)
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[1] != x.shape[0]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: square kernels only, got {weight.shape}")
    c, h, w = x.shape
    o, _, k, _ = weight.shape
    s, p = int(stride), int(padding)
    if (h + 2 * p - k) < 0 or (w + 2 * p - k) < 0:
        raise ShapeError(f"conv2d: kernel {k} too large for input {x.shape} with padding {p}")
    phases, ho, wo, wq, hq = _phase_split(x.data, k, s, p)
    n = ho * wq
    taps = [(i, j, (i // s) * wq + (j // s)) for i in range(k) for j in range(k)]
    wdata = weight.data
    # per-tap [O, C] blocks must be contiguous for BLAS
    wtaps = np.ascontiguousarray(wdata.transpose(2, 3, 0, 1))
    wide = np.zeros((o, n))
    for i, j, off in taps:
        src = phases[i % s, j % s][:, off : off + n]
        if c == 1:
            wide += wtaps[i, j] * src
        else:
            wide += wtaps[i, j] @ src
    out = wide.reshape(o, ho, wq)[:, :, :wo]
    parents = [x, weight]
    if bias is not None:
        bias = _lift(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} outputs")
        out = out + bias.data[:, None, None]
        parents.append(bias)
    else:
        out = np.ascontiguousarray(out)

    def grad_fn(g):
        gwide = np.zeros((o, ho, wq))
        gwide[:, :, :wo] = g
        gwide = gwide.reshape(o, n)
        gw = np.empty((k, k, o, c))
        gphases = np.zeros_like(phases) if x.requires_grad else None
        for i, j, off in taps:
            src = phases[i % s, j % s][:, off : off + n]
            gw[i, j] = gwide @ src.T
            if gphases is not None:
                gphases[i % s, j % s][:, off : off + n] += wtaps[i, j].T @ gwide
        gx = None
        if gphases is not None:
            gpad = np.zeros((c, hq * s, wq * s))
            for a in range(s):
                for b in range(s):
                    gpad[:, a::s, b::s] = gphases[a, b].reshape(c, hq, wq)
            gx = gpad[:, p : p + h, p : p + w]
        grads = [gx, gw.transpose(2, 3, 0, 1)]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    return _node(out, parents, grad_fn, "conv2d")


def _interp_matrix(n_in: int, factor: int) -> np.ndarray:
    # output index j samples input coordinate j / factor, clamped to the last cell
    n_out = n_in * factor
    pos = np.minimum(np.arange(n_out) / factor, n_in - 1)
    lo = np.minimum(np.floor(pos).astype(int), max(n_in - 2, 0))
    frac = pos - lo
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    mat[rows, lo] += 1.0 - frac
    if n_in > 1:
        mat[rows, lo + 1] += frac
    return mat


def upsample_bilinear(x, factor: int) -> Tensor:
    """Upsample ``[C, H, W]`` by an integer factor; output cell j sits at input j / factor."""
    x = _lift(x)
    if x.ndim != 3:
        raise ShapeError(f"upsample_bilinear expects [C, H, W], got {x.shape}")
    f = int(factor)
    ah = _interp_matrix(x.shape[1], f)
    aw = _interp_matrix(x.shape[2], f)
    out = np.matmul(np.matmul(ah, x.data), aw.T)
    return _node(out, (x,), lambda g: (np.matmul(np.matmul(ah.T, g), aw),), "upsample_bilinear")


def sample_bilinear(fmap, points) -> Tensor:
    """Bilinearly sample ``[C, H, W]`` at continuous ``(x, y)`` grid coordinates.

    ``points`` is ``(2,)`` or ``(N, 2)`` and may itself be a Tensor.  Points are
    clamped to the map; the gradient w.r.t. a clamped coordinate is zero.
    """
    fmap, points = _lift(fmap), _lift(points)
    if fmap.ndim != 3:
        raise ShapeError(f"sample_bilinear expects a [C, H, W] map, got {fmap.shape}")
    if points.shape[-1] != 2 or points.ndim not in (1, 2):
        raise ShapeError(f"sample_bilinear expects (2,) or (N, 2) points, got {points.shape}")
    single = points.ndim == 1
    pts = points.data.reshape(-1, 2)
    c, h, w = fmap.shape
    xc = np.clip(pts[:, 0], 0.0, w - 1)
    yc = np.clip(pts[:, 1], 0.0, h - 1)
    free_x = (pts[:, 0] > 0.0) & (pts[:, 0] < w - 1)
    free_y = (pts[:, 1] > 0.0) & (pts[:, 1] < h - 1)
    x0 = np.minimum(np.floor(xc).astype(int), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(int), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    m = fmap.data
    v00, v01 = m[:, y0, x0], m[:, y0, x1]
    v10, v11 = m[:, y1, x0], m[:, y1, x1]
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    out = (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11).T
    if single:
        out = out[0]

    def grad_fn(g):
        g = g.reshape(-1, c)
        gmap = None
        if fmap.requires_grad:
            gflat = np.zeros((c, h * w))
            for wt, yy, xx in ((w00, y0, x0), (w01, y0, x1), (w10, y1, x0), (w11, y1, x1)):
                np.add.at(gflat.T, yy * w + xx, g * wt[:, None])
            gmap = gflat.reshape(c, h, w)
        gpts = None
        if points.requires_grad:
            dx = ((1 - fy) * (v01 - v00) + fy * (v11 - v10)).T
            dy = ((1 - fx) * (v10 - v00) + fx * (v11 - v01)).T
            gpts = np.stack([(g * dx).sum(1) * free_x, (g * dy).sum(1) * free_y], axis=1)
            gpts = gpts.reshape(points.shape)
        return (gmap, gpts)

    return _node(out, (fmap, points), grad_fn, "sample_bilinear")


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    a = _lift(a)
    norm = np.sqrt((a.data ** 2).sum(axis=axis, keepdims=True) + eps)
    out = a.data / norm

    def grad_fn(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _node(out, (a,), grad_fn, "l2_normalize")


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax with max-subtraction; the shift cancels exactly in the gradient."""
    a = _lift(a)
    z = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), grad_fn, "softmax")


def vector_norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at an exact zero is taken as zero."""
    a = _lift(a)
    out = np.sqrt((a.data ** 2).sum(axis=axis))

    def grad_fn(g):
        safe = np.where(out > 0, out, 1.0)
        scale = np.where(out > 0, g / safe, 0.0)
        return (a.data * np.expand_dims(scale, axis),)

    return _node(out, (a,), grad_fn, "vector_norm")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "maximum")
    pick_a = a.data >= b.data
    return _node(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
                 "maximum")
