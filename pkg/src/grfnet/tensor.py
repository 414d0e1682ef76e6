"""Dense tensors with tape-based reverse-mode differentiation.

Layout is channels-last: a 3D feature volume is ``(batch, D, H, W, C)`` and
a 2D feature map is ``(batch, H, W, C)``, both row-major.  Convolution
weights are stored as ``(*kernel, C_in, C_out)``.

Operations are recorded only while a :class:`Graph` is active::

    with Graph() as g:
        y = sigmoid(conv(x, w, b, cfg))
        loss = sum_all(y * y)
    grads = g.backward(loss)
"""
from __future__ import annotations

import itertools
import math
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised for misuse of the differentiation tape."""


_local = threading.local()


def _current_graph() -> Optional["Graph"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_graph")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if 0 in arr.shape:
            raise ShapeError(f"zero-size extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._graph: Optional[Graph] = None

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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by scalars")
        return mul(self, 1.0 / other)


class Graph:
    """Records primitive ops in creation order, which is a topological order."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Graph":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, node: Tensor) -> None:
        node._graph = self
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Back-propagate from a scalar ``loss``.

        Leaf tensors that require gradients get their ``grad`` accumulated
        additively.  Returns the gradients of named leaves keyed by name.
        """
        if loss.data.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.shape}")
        if loss._graph is not self:
            raise GraphError("loss node is detached from this graph")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            # fixed input-index order keeps accumulation deterministic
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if parent._backward is None:
                    leaves[key] = parent
        named: dict[str, np.ndarray] = {}
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            if leaf.name is not None:
                named[leaf.name] = named[leaf.name] + g if leaf.name in named else g
        return named


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._graph = None
    graph = _current_graph()
    if graph is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        graph.record(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _is_const(x) -> bool:
    return not isinstance(x, Tensor)


# ---------------------------------------------------------------- elementwise
# Python scalars stay weakly typed so float32 graphs are not promoted.


def add(a, b) -> Tensor:
    if _is_const(a):
        a, b = b, a
    if _is_const(b):
        return _make(a.data + b, (a,), lambda g: (g,))
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    if _is_const(a):
        return _make(a - b.data, (b,), lambda g: (-g,))
    if _is_const(b):
        return _make(a.data - b, (a,), lambda g: (g,))
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    if _is_const(a):
        a, b = b, a
    if _is_const(b):
        return _make(a.data * b, (a,), lambda g: (g * b,))
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), backward)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    if a.shape != b.shape:
        raise ShapeError(f"maximum needs equal shapes, got {a.shape} and {b.shape}")
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)
    return _make(out, (a, b), lambda g: (g * take_a, g * ~take_a))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    y = np.where(pos, x.data, 0.0).astype(x.dtype, copy=False)
    return _make(y, (x,), lambda g: (g * pos,))


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------- structural


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (the channel axis by default)."""
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"cannot concatenate {ref} with {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _make(out, tuple(tensors), backward)


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Inverse of :func:`concat`: slice ``x`` into consecutive chunks along ``axis``."""
    ax = axis % x.ndim
    if sum(sizes) != x.shape[ax]:
        raise ShapeError(f"split sizes {tuple(sizes)} do not cover axis of length {x.shape[ax]}")
    outs = []
    lo = 0
    for n in sizes:
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(lo, lo + n)
        idx = tuple(idx)

        def backward(g, idx=idx):
            full = np.zeros_like(x.data, dtype=g.dtype)
            full[idx] = g
            return (full,)

        outs.append(_make(x.data[idx], (x,), backward))
        lo += n
    return outs


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    out = np.broadcast_to(x.data, shape).copy()
    return _make(out, (x,), lambda g: (_unbroadcast(g, src),))


def sum_all(x: Tensor) -> Tensor:
    src = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, src).copy(),))


def mean_all(x: Tensor) -> Tensor:
    return sum_all(x) * (1.0 / x.data.size)


# ---------------------------------------------------------------- convolution


@dataclass(frozen=True)
class ConvConfig:
    """Per-axis kernel/stride/dilation; ``padding`` is ``"same"`` or per-axis (lo, hi)."""

    kernel: tuple
    stride: tuple = None
    dilation: tuple = None
    padding: object = "same"
    has_bias: bool = True

    def __post_init__(self):
        n = len(self.kernel)
        if self.stride is None:
            object.__setattr__(self, "stride", (1,) * n)
        if self.dilation is None:
            object.__setattr__(self, "dilation", (1,) * n)
        for label, vals in (("kernel", self.kernel), ("stride", self.stride), ("dilation", self.dilation)):
            if len(vals) != n or any(int(v) < 1 for v in vals):
                raise ValueError(f"{label} must have {n} entries >= 1, got {vals}")
        if self.padding != "same":
            pads = tuple(tuple(p) for p in self.padding)
            if len(pads) != n or any(lo < 0 or hi < 0 for lo, hi in pads):
                raise ValueError(f"bad padding {self.padding}")
            object.__setattr__(self, "padding", pads)

    @classmethod
    def make(cls, kernel, stride=1, dilation=1, dims=3, padding="same", has_bias=True) -> "ConvConfig":
        def expand(v):
            return tuple(v) if isinstance(v, (tuple, list)) else (int(v),) * dims

        return cls(expand(kernel), expand(stride), expand(dilation), padding, has_bias)

    @property
    def dims(self) -> int:
        return len(self.kernel)

    def pads(self, spatial: Sequence[int]) -> tuple:
        if self.padding != "same":
            return self.padding
        out = []
        for n, k, s, d in zip(spatial, self.kernel, self.stride, self.dilation):
            o = -(-n // s)
            total = max((o - 1) * s + (k - 1) * d + 1 - n, 0)
            out.append((total // 2, total - total // 2))
        return tuple(out)

    def output_shape(self, spatial: Sequence[int]) -> tuple:
        out = []
        for n, (lo, hi), k, s, d in zip(spatial, self.pads(spatial), self.kernel, self.stride, self.dilation):
            span = (k - 1) * d + 1
            o = (n + lo + hi - span) // s + 1 if n + lo + hi >= span else 0
            out.append(o)
        return tuple(out)


def _tap_slices(offsets, cfg: ConvConfig, out_spatial) -> tuple:
    return tuple(
        slice(o * d, o * d + (n - 1) * s + 1, s)
        for o, d, s, n in zip(offsets, cfg.dilation, cfg.stride, out_spatial)
    )


def _windows(xp: np.ndarray, cfg: ConvConfig, out_spatial) -> np.ndarray:
    """Read-only ``(B, *out_spatial, *kernel, C)`` view of every receptive field."""
    st = xp.strides
    inner = st[1:-1]
    shape = (xp.shape[0],) + tuple(out_spatial) + tuple(cfg.kernel) + (xp.shape[-1],)
    strides = (
        (st[0],)
        + tuple(a * s for a, s in zip(inner, cfg.stride))
        + tuple(a * d for a, d in zip(inner, cfg.dilation))
        + (st[-1],)
    )
    return np.lib.stride_tricks.as_strided(xp, shape, strides, writeable=False)


def _conv_batched(x: Tensor, w: Tensor, b: Optional[Tensor], cfg: ConvConfig) -> Tensor:
    nd = cfg.dims
    if x.ndim != nd + 2:
        raise ShapeError(f"expected input of rank {nd + 2}, got shape {x.shape}")
    if w.shape[:nd] != tuple(cfg.kernel) or w.ndim != nd + 2:
        raise ShapeError(f"weight shape {w.shape} does not match kernel {cfg.kernel}")
    cin, cout = w.shape[-2], w.shape[-1]
    if x.shape[-1] != cin:
        raise ShapeError(f"input has {x.shape[-1]} channels, weights expect {cin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"bias shape {b.shape} != ({cout},)")
    spatial = x.shape[1:-1]
    out_spatial = cfg.output_shape(spatial)
    if any(o < 1 for o in out_spatial):
        raise ShapeError(f"convolution of {spatial} with {cfg} yields empty output {out_spatial}")
    pads = cfg.pads(spatial)
    batch = x.shape[0]
    xd, wd = x.data, w.data
    ntaps = math.prod(cfg.kernel)
    w2 = wd.reshape(ntaps * cin, cout)
    pointwise = ntaps == 1 and all(s == 1 for s in cfg.stride) and not any(lo or hi for lo, hi in pads)

    if pointwise:
        cols = xd.reshape(-1, cin)
    else:
        xp = np.pad(xd, ((0, 0),) + pads + ((0, 0),)) if any(lo or hi for lo, hi in pads) else xd
        taps = list(itertools.product(*[range(k) for k in cfg.kernel]))
        cols = np.ascontiguousarray(_windows(xp, cfg, out_spatial)).reshape(-1, ntaps * cin)
    out = cols @ w2
    if b is not None:
        out += b.data
    out = out.reshape((batch,) + out_spatial + (cout,))

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(wd.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            if pointwise:
                gx = (g2 @ w2.T).reshape(xd.shape)
            else:
                # one small GEMM per tap keeps each scatter-add contiguous
                w3 = wd.reshape(ntaps, cin, cout)
                tap_shape = (batch,) + out_spatial + (cin,)
                padded = tuple(n + lo + hi for n, (lo, hi) in zip(spatial, pads))
                gxp = np.zeros((batch,) + padded + (cin,), dtype=g.dtype)
                for t, offs in enumerate(taps):
                    gxp[(slice(None),) + _tap_slices(offs, cfg, out_spatial)] += (g2 @ w3[t].T).reshape(tap_shape)
                crop = tuple(slice(lo, lo + n) for n, (lo, _) in zip(spatial, pads))
                gx = gxp[(slice(None),) + crop + (slice(None),)]
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, backward)


def conv(x: Tensor, w: Tensor, b: Optional[Tensor], cfg: ConvConfig) -> Tensor:
    """N-d convolution (cross-correlation) with stride, dilation and padding.

    ``x`` is ``(batch, *spatial, C_in)`` or unbatched ``(*spatial, C_in)``.
    Output extent per axis is ``(n + lo + hi - ((k-1)*d + 1)) // s + 1``;
    with ``"same"`` padding this equals ``ceil(n / s)``.
    """
    if x.ndim == cfg.dims + 1:
        out = _conv_batched(reshape(x, (1,) + x.shape), w, b, cfg)
        return reshape(out, out.shape[1:])
    return _conv_batched(x, w, b, cfg)


# ---------------------------------------------------------------- pooling


def max_pool(x: Tensor, window: int | tuple, stride: int | tuple | None = None) -> Tensor:
    """Max pooling over all spatial axes of a batched tensor (valid windows only).

    Ties route the gradient to the first maximal tap in row-major order.
    """
    nd = x.ndim - 2
    window = (window,) * nd if isinstance(window, int) else tuple(window)
    stride = window if stride is None else ((stride,) * nd if isinstance(stride, int) else tuple(stride))
    spatial = x.shape[1:-1]
    if any(wi > n for wi, n in zip(window, spatial)):
        raise ShapeError(f"pool window {window} larger than input {spatial}")
    out_spatial = tuple((n - wi) // s + 1 for n, wi, s in zip(spatial, window, stride))
    taps = list(itertools.product(*[range(wi) for wi in window]))
    xd = x.data
    stacked = np.stack(
        [
            xd[(slice(None),) + tuple(slice(o, o + (n - 1) * s + 1, s) for o, s, n in zip(offs, stride, out_spatial))]
            for offs in taps
        ],
        axis=0,
    )
    arg = stacked.argmax(axis=0)
    out = np.take_along_axis(stacked, arg[None], axis=0)[0]

    def backward(g):
        gx = np.zeros_like(xd, dtype=g.dtype)
        for t, offs in enumerate(taps):
            sl = (slice(None),) + tuple(slice(o, o + (n - 1) * s + 1, s) for o, s, n in zip(offs, stride, out_spatial))
            gx[sl] += np.where(arg == t, g, 0.0)
        return (gx,)

    return _make(out, (x,), backward)


def global_avg_pool(x: Tensor, keepdims: bool = True) -> Tensor:
    """Mean over the spatial axes of a batched tensor, shape ``(B, 1, ..., 1, C)``."""
    axes = tuple(range(1, x.ndim - 1))
    count = math.prod(x.shape[1:-1])
    src = x.shape
    out = x.data.mean(axis=axes, keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / count, src).copy(),)

    res = _make(out, (x,), backward)
    return res if keepdims else reshape(res, (src[0], src[-1]))


def pool(x: Tensor, kind: str, window=2, stride=None) -> Tensor:
    """``max`` pooling, or ``global_average`` broadcast back to the input extents.

    ``x`` must carry a leading batch axis.
    """
    if kind == "max":
        return max_pool(x, window, stride)
    if kind == "global_average":
        return broadcast_to(global_avg_pool(x), x.shape)
    raise ValueError(f"unknown pool kind {kind!r}")
