"""Small reverse-mode tensor engine.

Only the operations the segmentation pipeline needs are implemented. Every op
builds its output through :func:`_node`, which records the parents and a
closure returning the adjoint for each parent.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "NonFiniteError", "MissingAdjointError", "OPS",
    "get_default_dtype", "set_default_dtype", "precision", "tensor", "as_tensor",
    "add", "sub", "mul", "neg", "scale", "matmul", "reshape", "transpose", "sum",
    "mean", "exp", "log", "relu", "softmax", "log_softmax", "conv2d",
    "bilinear_resize2d", "bilinear_matrix", "neighborhood", "l2_normalize",
    "stack", "index", "no_grad",
]

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True

# name -> op; grad_check only accepts ops listed here.
OPS: dict[str, Callable] = {}


class NonFiniteError(FloatingPointError):
    pass


class MissingAdjointError(RuntimeError):
    pass


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (``np.float64`` for verification)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def _register(name):
    def deco(fn):
        OPS[name] = fn
        return fn
    return deco


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_adjoint", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _DEFAULT_DTYPE, copy=True)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor contains NaN or Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._adjoint = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order = _topo(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            if node._adjoint is None:
                raise MissingAdjointError("node without adjoint in graph")
            for parent, pg in zip(node._parents, node._adjoint(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topo(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _node(data: np.ndarray, parents: Sequence[Tensor], adjoint) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced NaN or Inf")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    out._adjoint = adjoint if needs else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


# ---------------------------------------------------------------- pointwise

@_register("add")
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


@_register("sub")
def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


@_register("mul")
def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


@_register("div")
def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    if np.any(b.data == 0):
        raise NonFiniteError("division by zero")
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


@_register("neg")
def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


@_register("scale")
def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a non-differentiable scalar."""
    c = a.data.dtype.type(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


@_register("exp")
def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


@_register("log")
def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("log of non-positive value")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


@_register("relu")
def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- structure

@_register("reshape")
def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


@_register("transpose")
def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


@_register("index")
def index(a: Tensor, key) -> Tensor:
    def adj(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)
    return _node(np.array(a.data[key]), (a,), adj)


@_register("stack")
def stack(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = list(items)
    data = np.stack([t.data for t in items], axis=axis)

    def adj(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))
    return _node(data, items, adj)


# ---------------------------------------------------------------- reductions

@_register("sum")
def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def adj(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _node(np.asarray(out), (a,), adj)


@_register("mean")
def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size // np.asarray(a.data.sum(axis=axis, keepdims=keepdims)).size
    return scale(sum(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- linear algebra

@_register("matmul")
def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def adj(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _node(a.data @ b.data, (a, b), adj)


# ---------------------------------------------------------------- softmax family

@_register("softmax")
def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get zero weight."""
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def adj(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _node(out, (a,), adj)


@_register("log_softmax")
def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = x - lse
    p = np.exp(out)

    def adj(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)
    return _node(out, (a,), adj)


@_register("l2_normalize")
def l2_normalize(a: Tensor, axis: int = 0, eps: float = 1e-8) -> Tensor:
    """Unit-normalize along ``axis``; vectors with norm below ``eps`` map to zero."""
    norm = np.sqrt((a.data ** 2).sum(axis=axis, keepdims=True))
    ok = norm >= eps
    safe = np.where(ok, norm, 1.0)
    out = np.where(ok, a.data / safe, 0.0).astype(a.dtype)

    def adj(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(ok, (g - out * proj) / safe, 0.0).astype(a.dtype),)
    return _node(out, (a,), adj)


# ---------------------------------------------------------------- convolution

def _conv_out(n: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


@_register("conv2d")
def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0, dilation: int = 1) -> Tensor:
    """2D cross-correlation with zero padding.

    ``x`` is ``[c_in, h, w]`` or batched ``[n, c_in, h, w]``; ``weight`` is
    ``[c_out, c_in, k, k]`` with odd ``k``.
    """
    if stride < 1 or dilation < 1 or pad < 0:
        raise ValueError("stride and dilation must be >= 1, pad >= 0")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"weight must be [c_out, c_in, k, k], got {weight.shape}")
    k = weight.shape[2]
    if k % 2 == 0:
        raise ValueError("kernel size must be odd")
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise ValueError(f"input must be [c,h,w] or [n,c,h,w], got {x.shape}")
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    c_out, c_in = weight.shape[:2]
    if c != c_in:
        raise ValueError(f"channel mismatch: input {c}, weight {c_in}")
    ho = _conv_out(h, k, stride, pad, dilation)
    wo = _conv_out(w, k, stride, pad, dilation)
    if ho < 1 or wo < 1:
        raise ValueError("input too small for kernel")

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    taps = [(p, q) for p in range(k) for q in range(k)]

    def window(p, q):
        r0, c0 = p * dilation, q * dilation
        return (slice(None), slice(None),
                slice(r0, r0 + stride * (ho - 1) + 1, stride),
                slice(c0, c0 + stride * (wo - 1) + 1, stride))

    cols = np.stack([xp[window(p, q)] for p, q in taps], axis=2)  # n,c,kk,ho,wo
    cols = cols.reshape(n, c * k * k, ho * wo)
    wm = weight.data.reshape(c_out, c * k * k)
    out = (wm @ cols).reshape(n, c_out, ho, wo)
    if not batched:
        out = out[0]

    def adj(g):
        g4 = (g if batched else g[None]).reshape(n, c_out, ho * wo)
        gw = np.einsum("nop,nkp->ok", g4, cols).reshape(weight.shape)
        gcols = (wm.T @ g4).reshape(n, c, k * k, ho, wo)
        gxp = np.zeros_like(xp)
        for t, (p, q) in enumerate(taps):
            gxp[window(p, q)] += gcols[:, :, t]
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return (gx if batched else gx[0]), gw

    res = _node(out, (x, weight), adj)
    if bias is not None:
        res = add(res, reshape(bias, (c_out, 1, 1)))
    return res


# ---------------------------------------------------------------- resampling

def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic ``[n_out, n_in]`` matrix of half-pixel-center linear interpolation."""
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    m[rows, i0] += 1 - frac
    m[rows, i1] += frac
    return m.astype(dtype)


@_register("bilinear_resize2d")
def bilinear_resize2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize over the last two axes."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    if x.ndim < 2:
        raise ValueError("need at least two axes")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return _node(x.data.copy(), (x,), lambda g: (g,))
    ah = bilinear_matrix(h, out_h, x.dtype)
    aw = bilinear_matrix(w, out_w, x.dtype)
    out = ah @ x.data @ aw.T
    return _node(out, (x,), lambda g: (ah.T @ g @ aw,))


# ---------------------------------------------------------------- local windows

def neighborhood_mask(h: int, w: int, k: int) -> np.ndarray:
    """``[k*k, h, w]`` boolean validity of each window offset."""
    r = k // 2
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = []
    for di in range(-r, r + 1):
        for dj in range(-r, r + 1):
            out.append((ii + di >= 0) & (ii + di < h) & (jj + dj >= 0) & (jj + dj < w))
    return np.stack(out)


@_register("neighborhood")
def neighborhood(x: Tensor, k: int) -> Tensor:
    """Gather the ``k x k`` window around every pixel: ``[c,h,w] -> [k*k,c,h,w]``.

    Offsets falling outside the map are zero.
    """
    if k % 2 == 0:
        raise ValueError("window size must be odd")
    c, h, w = x.shape
    r = k // 2
    xp = np.pad(x.data, ((0, 0), (r, r), (r, r)))
    offs = [(di, dj) for di in range(k) for dj in range(k)]
    out = np.stack([xp[:, di:di + h, dj:dj + w] for di, dj in offs])

    def adj(g):
        gp = np.zeros_like(xp)
        for t, (di, dj) in enumerate(offs):
            gp[:, di:di + h, dj:dj + w] += g[t]
        return (gp[:, r:r + h, r:r + w],)
    return _node(out, (x,), adj)
