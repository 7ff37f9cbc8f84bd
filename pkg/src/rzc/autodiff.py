"""Dense-tensor arithmetic with reverse-mode automatic differentiation.

Tensors are rank-1..4 numpy arrays (batch, height, width, channels for
rank-4) stored in float32 by default; float64 storage is supported so
gradient checks can run at full precision.  Reductions and matrix
products accumulate in double precision regardless of storage dtype.

The graph is built define-by-run: every primitive returns a new Tensor
holding references to its parents and a closure computing the
vector-Jacobian product.  ``backward`` walks the graph once in reverse
topological order.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ShapeError

DEFAULT_DTYPE = np.float32

# Fixed numerical conventions: any change invalidates stored models.
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.99


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        keep = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not keep:
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > 4:
            raise ShapeError(f"tensors are rank 1..4, got rank {arr.ndim}")
        if arr.size == 0:
            raise ShapeError("tensors must have all extents >= 1")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- convenience -----------------------------------------------------

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def is_leaf(self) -> bool:
        return self._vjp is None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self.op!r}{flag})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    """Wrap an op result; drops graph references when no parent needs grads."""
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.op = op
    t.requires_grad = any(p.requires_grad for p in parents)
    if t.requires_grad:
        t._parents = tuple(parents)
        t._vjp = vjp
    else:
        t._parents = ()
        t._vjp = None
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _node(out, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def pow_const(a, p) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out = a.data**p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return _node(out, (a,), vjp, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,), "log")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # Evaluate in f64 so the tails stay meaningful before storage rounding.
    x = a.data.astype(np.float64, copy=False)
    out64 = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
    out = out64.astype(a.dtype, copy=False)

    def vjp(g):
        return ((g * (out64 * (1.0 - out64))).astype(a.dtype, copy=False),)

    return _node(out, (a,), vjp, "sigmoid")


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / a.data

    def vjp(g):
        return (-g * out * out,)

    return _node(out, (a,), vjp, "reciprocal")


def clamp(a, lo: float, hi: float) -> Tensor:
    """Hard clip; the gradient passes through inside [lo, hi] (inclusive)."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def vjp(g):
        return (g * inside,)

    return _node(out, (a,), vjp, "clamp")


def clamp_min(a, lo: float) -> Tensor:
    """max(a, lo); the gradient passes only where a > lo."""
    a = as_tensor(a)
    out = np.maximum(a.data, lo)
    alive = a.data > lo

    def vjp(g):
        return (g * alive,)

    return _node(out, (a,), vjp, "clamp_min")


# -- activations -------------------------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    # Subgradient convention: 0 at the kink.
    alive = a.data > 0

    def vjp(g):
        return (g * alive,)

    return _node(out, (a,), vjp, "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _node(out, (a,), vjp, "tanh")


def activation(a, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "tanh":
        return tanh(a)
    raise ValueError(f"unknown activation kind {kind!r}")


# -- reductions / reshaping --------------------------------------------------


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, dtype=np.float64).astype(a.dtype).reshape(1)

    def vjp(g):
        return (np.broadcast_to(g.reshape(()), a.shape).astype(a.dtype, copy=False),)

    return _node(out, (a,), vjp, "sum_all")


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.size
    out = (np.sum(a.data, dtype=np.float64) / n).astype(a.dtype).reshape(1)

    def vjp(g):
        return ((np.broadcast_to(g.reshape(()), a.shape) / n).astype(a.dtype, copy=False),)

    return _node(out, (a,), vjp, "mean_all")


def mean_over(a, axis: int, keepdims: bool = True) -> Tensor:
    a = as_tensor(a)
    n = a.shape[axis]
    out = (np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64) / n).astype(a.dtype)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, a.shape) / n).astype(a.dtype, copy=False),)

    return _node(out, (a,), vjp, "mean_over")


def take_item(a, i: int) -> Tensor:
    """Slice out batch item i, keeping the batch axis (extent 1)."""
    a = as_tensor(a)
    if not 0 <= i < a.shape[0]:
        raise ShapeError(f"item {i} out of range for batch {a.shape[0]}")
    out = a.data[i : i + 1].copy()

    def vjp(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        full[i : i + 1] = g
        return (full,)

    return _node(out, (a,), vjp, "take_item")


def crop2d(a, height: int, width: int) -> Tensor:
    """Keep the top-left height x width window of a rank-4 tensor."""
    a = as_tensor(a)
    if a.data.ndim != 4:
        raise ShapeError("crop2d expects a rank-4 tensor")
    n, h, w, c = a.shape
    if height > h or width > w:
        raise ShapeError(f"cannot crop {h}x{w} to {height}x{width}")
    out = a.data[:, :height, :width, :].copy()

    def vjp(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        full[:, :height, :width, :] = g
        return (full,)

    return _node(out, (a,), vjp, "crop2d")


# -- convolution --------------------------------------------------------------


class _ConvGeom:
    """Shared padding/output geometry for conv2d and its adjoints."""

    def __init__(self, h: int, w: int, kh: int, kw: int, stride: int, pad: str):
        if pad not in ("same", "valid"):
            raise ValueError(f"pad must be 'same' or 'valid', got {pad!r}")
        self.kh, self.kw, self.stride = kh, kw, stride
        if pad == "same":
            self.oh = -(-h // stride)
            self.ow = -(-w // stride)
            ph = max((self.oh - 1) * stride + kh - h, 0)
            pw = max((self.ow - 1) * stride + kw - w, 0)
            self.pt, self.pb = ph // 2, ph - ph // 2
            self.pl, self.pr = pw // 2, pw - pw // 2
        else:
            if h < kh or w < kw:
                raise ShapeError(f"input {h}x{w} smaller than kernel {kh}x{kw}")
            self.oh = (h - kh) // stride + 1
            self.ow = (w - kw) // stride + 1
            self.pt = self.pb = self.pl = self.pr = 0
        self.h, self.w = h, w


def _pad_input(x: np.ndarray, geom: _ConvGeom) -> np.ndarray:
    if geom.pt or geom.pb or geom.pl or geom.pr:
        return np.pad(x, ((0, 0), (geom.pt, geom.pb), (geom.pl, geom.pr), (0, 0)))
    return x


def _im2col(xp: np.ndarray, geom: _ConvGeom) -> np.ndarray:
    """Gather kernel windows: (N*OH*OW, kh*kw*C), accumulating dtype f64."""
    n, _, _, c = xp.shape
    kh, kw, s, oh, ow = geom.kh, geom.kw, geom.stride, geom.oh, geom.ow
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + s * oh : s, j : j + s * ow : s, :]
    return cols.reshape(n * oh * ow, kh * kw * c)


def _col2im(gcols: np.ndarray, n: int, c: int, geom: _ConvGeom) -> np.ndarray:
    """Scatter-add column gradients back to the (unpadded) input."""
    kh, kw, s, oh, ow = geom.kh, geom.kw, geom.stride, geom.oh, geom.ow
    gp = np.zeros((n, geom.h + geom.pt + geom.pb, geom.w + geom.pl + geom.pr, c), dtype=np.float64)
    gcols = gcols.reshape(n, oh, ow, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            gp[:, i : i + s * oh : s, j : j + s * ow : s, :] += gcols[:, :, :, i, j, :]
    return gp[:, geom.pt : geom.pt + geom.h, geom.pl : geom.pl + geom.w, :]


def conv2d(x, weight, bias=None, stride: int = 1, pad: str = "same") -> Tensor:
    """2-D convolution on NHWC input with a kh x kw x Cin x Cout kernel."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be rank-4 NHWC, got {x.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be kh x kw x Cin x Cout, got {weight.shape}")
    n, h, w, cin = x.shape
    kh, kw, wcin, cout = weight.shape
    if cin != wcin:
        raise ShapeError(f"channel mismatch: input has {cin}, weight expects {wcin}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.size != cout:
            raise ShapeError(f"bias length {bias.size} != output channels {cout}")
    geom = _ConvGeom(h, w, kh, kw, stride, pad)

    wmat = weight.data.reshape(kh * kw * cin, cout).astype(np.float64, copy=False)
    cols = _im2col(_pad_input(x.data, geom), geom)
    acc = cols @ wmat
    if bias is not None:
        acc += bias.data.reshape(-1).astype(np.float64, copy=False)
    out = acc.reshape(n, geom.oh, geom.ow, cout).astype(x.dtype)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        g2 = g.reshape(n * geom.oh * geom.ow, cout).astype(np.float64, copy=False)
        gx = _col2im(g2 @ wmat.T, n, cin, geom).astype(x.dtype)
        # Columns are recomputed here instead of cached: the graph would
        # otherwise hold one O(N*OH*OW*k*k*C) buffer per conv.
        cols_b = _im2col(_pad_input(x.data, geom), geom)
        gw = (cols_b.T @ g2).reshape(weight.shape).astype(weight.dtype)
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0).reshape(bias.shape).astype(bias.dtype)
        return gx, gw, gb

    return _node(out, parents, vjp, "conv2d")


def conv2d_transpose(x, weight, bias=None, stride: int = 2) -> Tensor:
    """Adjoint of a same-padded strided conv2d; output dims = stride * input dims.

    Weight layout is kh x kw x Cin x Cout where Cin is the channel count of x.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d_transpose expects rank-4 input and weight")
    n, h, w, cin = x.shape
    kh, kw, wcin, cout = weight.shape
    if cin != wcin:
        raise ShapeError(f"channel mismatch: input has {cin}, weight expects {wcin}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.size != cout:
            raise ShapeError(f"bias length {bias.size} != output channels {cout}")
    # Geometry of the mirrored forward conv: (N, s*h, s*w, cout) -> (N, h, w, cin).
    geom = _ConvGeom(stride * h, stride * w, kh, kw, stride, "same")
    wmat = weight.data.reshape(kh * kw, cin, cout)
    # Mirrored conv weight: kh x kw x Cout x Cin.
    wmat_m = wmat.transpose(0, 2, 1).reshape(kh * kw * cout, cin).astype(np.float64, copy=False)

    x2 = x.data.reshape(n * h * w, cin).astype(np.float64, copy=False)
    acc = _col2im(x2 @ wmat_m.T, n, cout, geom)
    if bias is not None:
        acc += bias.data.reshape(-1).astype(np.float64, copy=False)
    out = acc.astype(x.dtype)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        cols = _im2col(_pad_input(g.astype(np.float64, copy=False), geom), geom)
        gx = (cols @ wmat_m).reshape(n, h, w, cin).astype(x.dtype)
        gw_m = (cols.T @ x2).reshape(kh * kw, cout, cin)
        gw = gw_m.transpose(0, 2, 1).reshape(weight.shape).astype(weight.dtype)
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 1, 2), dtype=np.float64).reshape(bias.shape).astype(bias.dtype)
        return gx, gw, gb

    return _node(out, parents, vjp, "conv2d_transpose")


# -- pooling ------------------------------------------------------------------


def max_pool(x, size: int = 2, stride: int = 2) -> Tensor:
    """2x2 stride-2 max pooling; odd trailing rows/columns are dropped."""
    if size != 2 or stride != 2:
        raise ValueError("max_pool supports size=2, stride=2 only")
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("max_pool expects a rank-4 tensor")
    n, h, w, c = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"max_pool needs spatial dims >= 2, got {h}x{w}")
    oh, ow = h // 2, w // 2
    win = (
        x.data[:, : 2 * oh, : 2 * ow, :]
        .reshape(n, oh, 2, ow, 2, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, oh, ow, c, 4)
    )
    # argmax returns the first maximum: fixed tie-break.
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gwin = np.zeros((n, oh, ow, c, 4), dtype=x.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None].astype(x.dtype), axis=-1)
        gx = np.zeros(x.shape, dtype=x.dtype)
        gx[:, : 2 * oh, : 2 * ow, :] = (
            gwin.reshape(n, oh, ow, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * oh, 2 * ow, c)
        )
        return (gx,)

    return _node(out, (x,), vjp, "max_pool")


def global_avg_pool(x) -> Tensor:
    """Mean over the spatial dims: (N, H, W, C) -> (N, 1, 1, C)."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool expects a rank-4 tensor")
    n, h, w, c = x.shape
    out = (np.sum(x.data, axis=(1, 2), keepdims=True, dtype=np.float64) / (h * w)).astype(x.dtype)

    def vjp(g):
        return ((np.broadcast_to(g, x.shape) / (h * w)).astype(x.dtype, copy=False),)

    return _node(out, (x,), vjp, "global_avg_pool")


# -- batch normalization -------------------------------------------------------


def batch_norm(
    x,
    scale,
    shift,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPSILON,
) -> Tensor:
    """Per-channel batch normalization over the (N, H, W) axes.

    Train mode normalizes with batch statistics and updates the running
    arrays in place; eval mode applies the stored statistics.  Variance is
    the biased (population) estimate in both the normalization and the
    running update.
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    if x.data.ndim != 4:
        raise ShapeError("batch_norm expects a rank-4 tensor")
    c = x.shape[3]
    if scale.size != c or shift.size != c:
        raise ShapeError(f"scale/shift length must equal channel count {c}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    gamma = scale.data.reshape(-1)
    beta = shift.data.reshape(-1)
    x64 = x.data.astype(np.float64, copy=False)

    if mode == "train":
        mu = x64.mean(axis=(0, 1, 2))
        var = x64.var(axis=(0, 1, 2))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu.astype(running_mean.dtype)
        running_var *= momentum
        running_var += (1.0 - momentum) * var.astype(running_var.dtype)
        ivar = 1.0 / np.sqrt(var + eps)
        xhat = (x64 - mu) * ivar
        out = (xhat * gamma + beta).astype(x.dtype)
        m = x.shape[0] * x.shape[1] * x.shape[2]

        def vjp(g):
            g64 = g.astype(np.float64, copy=False)
            gxhat = g64 * gamma
            sum_gxhat = gxhat.sum(axis=(0, 1, 2))
            sum_gxhat_xhat = (gxhat * xhat).sum(axis=(0, 1, 2))
            gx = (ivar / m) * (m * gxhat - sum_gxhat - xhat * sum_gxhat_xhat)
            ggamma = (g64 * xhat).sum(axis=(0, 1, 2))
            gbeta = g64.sum(axis=(0, 1, 2))
            return (
                gx.astype(x.dtype),
                ggamma.reshape(scale.shape).astype(scale.dtype),
                gbeta.reshape(shift.shape).astype(shift.dtype),
            )

        return _node(out, (x, scale, shift), vjp, "batch_norm")

    ivar = 1.0 / np.sqrt(running_var.astype(np.float64) + eps)
    mu = running_mean.astype(np.float64)
    xhat = (x64 - mu) * ivar
    out = (xhat * gamma + beta).astype(x.dtype)

    def vjp(g):
        g64 = g.astype(np.float64, copy=False)
        gx = (g64 * gamma * ivar).astype(x.dtype)
        ggamma = (g64 * xhat).sum(axis=(0, 1, 2)).reshape(scale.shape).astype(scale.dtype)
        gbeta = g64.sum(axis=(0, 1, 2)).reshape(shift.shape).astype(shift.dtype)
        return gx, ggamma, gbeta

    return _node(out, (x, scale, shift), vjp, "batch_norm")


# -- graph traversal -----------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    """All grad-requiring nodes reachable from root, parents before children."""
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


class Graph:
    """Topologically ordered record of the primitives reaching a root tensor."""

    def __init__(self, root: Tensor, parameters: Mapping[str, Tensor] | None = None):
        self.root = root
        self.nodes = _toposort(root) if root.requires_grad else []
        self.parameters = dict(parameters) if parameters else {}

    def __len__(self) -> int:
        return len(self.nodes)


def backward(
    loss: Tensor,
    params: Mapping[str, Tensor] | None = None,
    hook: Callable[[Tensor], None] | None = None,
) -> dict[str, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Fills ``.grad`` on every reachable grad-requiring leaf.  When ``params``
    is given, every named tensor is guaranteed a gradient (zeros if it does
    not participate in the loss) and the name -> gradient map is returned.
    ``hook`` is invoked exactly once per visited node, in reverse
    topological order.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params:
        for t in params.values():
            t.grad = None

    if loss.requires_grad:
        order = _toposort(loss)
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if hook is not None:
                hook(node)
            if node._vjp is None:
                node.grad = g.astype(node.dtype, copy=False)
                continue
            for p, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                pg = pg.astype(p.dtype, copy=False)
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg

    if not params:
        return {}
    result = {}
    for name, t in params.items():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        result[name] = t.grad
    return result


def grad_check(
    fn: Callable[[Tensor], Tensor],
    point: Tensor,
    step: float = 1e-3,
    dtype=np.float64,
    coords: Iterable[int] | None = None,
    rng: np.random.Generator | None = None,
    max_coords: int | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The point is copied into ``dtype`` storage (float64 by default, so the
    difference quotient is not drowned by storage rounding).  ``coords``
    restricts the sweep to specific flat indices; ``max_coords`` draws a
    random subset instead of sweeping everything.
    """
    base = point.data.astype(dtype).copy()
    p = Tensor(base.copy(), requires_grad=True)
    out = fn(p)
    if out.data.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    backward(out)
    analytic = np.zeros_like(base) if p.grad is None else p.grad.astype(np.float64)
    analytic = analytic.reshape(-1)

    if coords is None:
        idx = np.arange(base.size)
        if max_coords is not None and max_coords < base.size:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(base.size, size=max_coords, replace=False)
    else:
        idx = np.asarray(list(coords), dtype=int)

    flat = base.reshape(-1)
    worst = 0.0
    for i in idx:
        saved = flat[i]
        flat[i] = saved + step
        f_plus = fn(Tensor(base.copy())).item()
        flat[i] = saved - step
        f_minus = fn(Tensor(base.copy())).item()
        flat[i] = saved
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = analytic[i]
        err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
        worst = max(worst, err)
    return worst


def finite(x: float) -> bool:
    return math.isfinite(x)
