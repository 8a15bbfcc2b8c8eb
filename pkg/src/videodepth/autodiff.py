"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

A :class:`Tensor` wraps a numpy array and, while gradients are enabled,
records the operation that produced it. Calling :meth:`Tensor.backward`
on a scalar fills ``.grad`` on every reachable tensor with
``requires_grad`` set. Everything is double precision and CPU-only; the
op set is exactly what the depth network needs: 2-D convolution,
pointwise nonlinearities, parameter-free layer normalization, bilinear
grid sampling, 2x spatial resampling and elementwise arithmetic.

Backward closures recompute cheap intermediates (im2col patches,
bilinear taps) from the parents' data instead of caching them, keeping
per-graph memory close to the activations themselves.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ContractError

_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode sweep from a scalar; populates reachable grads."""
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operators ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_coerce(other), -1.0))

    def __rsub__(self, other):
        return add(_coerce(other), mul(self, -1.0))

    def __truediv__(self, other):
        if isinstance(other, Tensor) or (hasattr(other, "size") and np.size(other) > 1):
            raise ContractError("tensor division only supports scalar divisors")
        return mul(self, 1.0 / float(other))

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mul(sum_all(self), 1.0 / self.data.size)

    def abs(self) -> "Tensor":
        return abs_(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def stop_gradient(x: Tensor) -> Tensor:
    """Explicit graph node that blocks gradient flow through ``x``."""
    return Tensor(_coerce(x).data)


# -- elementwise ops ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), bwd)


def abs_(x) -> Tensor:
    x = _coerce(x)
    data = np.abs(x.data)

    def bwd(g):
        _accum(x, g * np.sign(x.data))

    return _node(data, (x,), bwd)


def sum_all(x) -> Tensor:
    x = _coerce(x)
    data = np.asarray(x.data.sum())

    def bwd(g):
        _accum(x, np.broadcast_to(g, x.data.shape).copy())

    return _node(data, (x,), bwd)


def sum_channels(x) -> Tensor:
    """Sum over the channel axis of a (B, C, H, W) tensor, keepdims."""
    x = _coerce(x)
    if x.ndim != 4:
        raise ContractError(f"sum_channels expects 4-D input, got {x.shape}")
    data = x.data.sum(axis=1, keepdims=True)

    def bwd(g):
        _accum(x, np.broadcast_to(g, x.data.shape).copy())

    return _node(data, (x,), bwd)


def concat_channels(tensors) -> Tensor:
    """Concatenate (B, C_i, H, W) tensors along the channel axis."""
    ts = [_coerce(t) for t in tensors]
    if not ts:
        raise ContractError("concat_channels needs at least one tensor")
    data = np.concatenate([t.data for t in ts], axis=1)
    sizes = [t.data.shape[1] for t in ts]

    def bwd(g):
        off = 0
        for t, c in zip(ts, sizes):
            _accum(t, g[:, off:off + c])
            off += c

    return _node(data, tuple(ts), bwd)


# -- pointwise nonlinearities -----------------------------------------


def sigmoid(x) -> Tensor:
    x = _coerce(x)
    pos = x.data >= 0
    z = np.exp(np.where(pos, -x.data, x.data))
    data = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))

    def bwd(g):
        _accum(x, g * data * (1.0 - data))

    return _node(data, (x,), bwd)


def elu(x) -> Tensor:
    x = _coerce(x)
    neg = x.data < 0
    data = np.where(neg, np.expm1(np.minimum(x.data, 0.0)), x.data)

    def bwd(g):
        _accum(x, g * np.where(neg, data + 1.0, 1.0))

    return _node(data, (x,), bwd)


def tanh(x) -> Tensor:
    x = _coerce(x)
    data = np.tanh(x.data)

    def bwd(g):
        _accum(x, g * (1.0 - data * data))

    return _node(data, (x,), bwd)


_POINTWISE = {"sigmoid": sigmoid, "elu": elu, "tanh": tanh}


def pointwise(x, kind: str) -> Tensor:
    try:
        return _POINTWISE[kind](x)
    except KeyError:
        raise ContractError(f"unknown pointwise kind {kind!r}") from None


# -- layer normalization ----------------------------------------------


def layer_norm_spatial(x, epsilon: float = 1e-5) -> Tensor:
    """Zero mean / unit variance per (batch, channel) over the spatial extent.

    No learnable parameters; ``epsilon`` guards constant slices.
    """
    x = _coerce(x)
    if x.ndim != 4:
        raise ContractError(f"layer_norm_spatial expects (B,C,H,W), got {x.shape}")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + epsilon)
    y = xc * inv

    def bwd(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gym = (g * y).mean(axis=(2, 3), keepdims=True)
        _accum(x, inv * (g - gm - y * gym))

    return _node(y, (x,), bwd)


# -- convolution -------------------------------------------------------


@dataclass
class ConvParams:
    """Weights for one 2-D convolution layer; kernels must be odd-sized."""

    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ContractError("conv weight must be (out, in, kh, kw)")
        _, _, kh, kw = self.weight.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ContractError(f"conv kernel must be odd-sized, got {kh}x{kw}")
        if self.stride < 1 or self.padding < 0:
            raise ContractError("stride must be >= 1 and padding >= 0")

    def tensors(self):
        if self.bias is None:
            return [self.weight]
        return [self.weight, self.bias]


def _im2col(xp, kh, kw, stride):
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def _conv1x1(x, w, b, stride):
    bb, cin, h, wdt = x.data.shape
    cout = w.data.shape[0]
    data = x.data[:, :, ::stride, ::stride]
    _, _, ho, wo = data.shape
    flat = np.ascontiguousarray(data.reshape(bb, cin, ho * wo))
    wmat = w.data.reshape(cout, cin)
    out = np.matmul(wmat, flat)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(bb, cout, ho, wo)
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gmat = np.ascontiguousarray(g.reshape(bb, cout, ho * wo))
        if w.requires_grad:
            dw = np.matmul(gmat, flat.transpose(0, 2, 1)).sum(axis=0)
            _accum(w, dw.reshape(w.data.shape))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dflat = np.matmul(wmat.T, gmat).reshape(bb, cin, ho, wo)
            if stride == 1:
                _accum(x, dflat)
            else:
                dx = np.zeros_like(x.data)
                dx[:, :, ::stride, ::stride] = dflat
                _accum(x, dx)

    return _node(out, parents, bwd)


def conv2d(x, params: ConvParams) -> Tensor:
    x = _coerce(x)
    w, b = params.weight, params.bias
    s, p = params.stride, params.padding
    if x.ndim != 4:
        raise ContractError(f"conv2d expects (B,C,H,W), got {x.shape}")
    bb, cin, h, wdt = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ContractError(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    if h + 2 * p < kh or wdt + 2 * p < kw:
        raise ContractError("input smaller than kernel extent after padding")
    if kh == 1 and kw == 1 and p == 0:
        return _conv1x1(x, w, b, s)

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols, ho, wo = _im2col(xp, kh, kw, s)
    wmat = w.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(bb, cout, ho, wo)
    parents = (x, w) if b is None else (x, w, b)
    # cols is kept for the weight gradient: recomputing it each backward
    # costs more wall time than the extra resident memory at desk scale
    if not (_GRAD_ENABLED and (x.requires_grad or w.requires_grad)):
        cols = None

    def bwd(g):
        gmat = np.ascontiguousarray(g.reshape(bb, cout, ho * wo))
        if w.requires_grad:
            dw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
            _accum(w, dw.reshape(w.data.shape))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gmat).reshape(bb, cin, kh, kw, ho, wo)
            hp, wp = h + 2 * p, wdt + 2 * p
            dxp = np.zeros((bb, cin, hp, wp))
            for ki in range(kh):
                for kj in range(kw):
                    dxp[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s] += dcols[:, :, ki, kj]
            _accum(x, dxp[:, :, p:p + h, p:p + wdt] if p else dxp)

    return _node(out, parents, bwd)


# -- bilinear grid sampling -------------------------------------------


def _bilinear_parts(grid, h, w):
    gx = grid[..., 0]
    gy = grid[..., 1]
    x0 = np.floor(gx)
    y0 = np.floor(gy)
    fx = gx - x0
    fy = gy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    taps = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            wt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            taps.append((np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1), valid, wt))
    return taps, fx, fy


def grid_sample_bilinear(x, grid) -> Tensor:
    """Sample (B,C,H,W) at continuous pixel coords grid (B,H',W',[x,y]).

    Bilinear interpolation of the four neighbors; taps outside the image
    contribute zero (zero padding).
    """
    x = _coerce(x)
    grid = _coerce(grid)
    if x.ndim != 4 or grid.ndim != 4 or grid.shape[-1] != 2:
        raise ContractError(
            f"grid_sample expects (B,C,H,W) and (B,H',W',2), got {x.shape}, {grid.shape}"
        )
    if x.shape[0] != grid.shape[0]:
        raise ContractError("grid_sample batch mismatch")
    b, c, h, w = x.shape
    bi = np.arange(b)[:, None, None]
    src = np.moveaxis(x.data, 1, -1)  # (B, H, W, C)
    taps, _, _ = _bilinear_parts(grid.data, h, w)
    out = np.zeros(grid.shape[:3] + (c,))
    for yc, xc, valid, wt in taps:
        out += (wt * valid)[..., None] * src[bi, yc, xc]
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))

    def bwd(g):
        gb = np.moveaxis(g, 1, -1)  # (B, H', W', C)
        taps2, fx, fy = _bilinear_parts(grid.data, h, w)
        if x.requires_grad:
            acc = np.zeros((b, h, w, c))
            big = np.broadcast_to(bi, taps2[0][0].shape)
            for yc, xc, valid, wt in taps2:
                np.add.at(acc, (big, yc, xc), (wt * valid)[..., None] * gb)
            _accum(x, np.moveaxis(acc, -1, 1))
        if grid.requires_grad:
            vals = [
                (valid * 1.0)[..., None] * src[bi, yc, xc]
                for yc, xc, valid, wt in taps2
            ]
            v00, v10, v01, v11 = vals
            dvdx = (1.0 - fy)[..., None] * (v10 - v00) + fy[..., None] * (v11 - v01)
            dvdy = (1.0 - fx)[..., None] * (v01 - v00) + fx[..., None] * (v11 - v10)
            dg = np.stack([(gb * dvdx).sum(-1), (gb * dvdy).sum(-1)], axis=-1)
            _accum(grid, dg)

    return _node(out, (x, grid), bwd)


def identity_grid(b: int, h: int, w: int) -> np.ndarray:
    """Grid that makes grid_sample_bilinear the identity map."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    g = np.stack([xs, ys], axis=-1)
    return np.broadcast_to(g, (b, h, w, 2)).copy()


# -- 2x spatial resampling --------------------------------------------


@lru_cache(maxsize=None)
def _nearest_up_matrix(n: int):
    a = np.zeros((2 * n, n))
    a[np.arange(2 * n), np.arange(2 * n) // 2] = 1.0
    return a


@lru_cache(maxsize=None)
def _avg_down_matrix(n: int):
    a = np.zeros((n // 2, n))
    idx = np.arange(n // 2)
    a[idx, 2 * idx] = 0.5
    a[idx, 2 * idx + 1] = 0.5
    return a


@lru_cache(maxsize=None)
def _bilinear_up_matrix(n: int):
    a = np.zeros((2 * n, n))
    for i in range(2 * n):
        src = (i + 0.5) / 2.0 - 0.5
        i0 = int(np.floor(src))
        f = src - i0
        if i0 < 0:
            i0, f = 0, 0.0
        elif i0 >= n - 1:
            i0, f = n - 2, 1.0
        if n == 1:
            a[i, 0] = 1.0
        else:
            a[i, i0] = 1.0 - f
            a[i, i0 + 1] = f
    return a


def _separable_resample(x, ah, aw) -> Tensor:
    x = _coerce(x)
    data = np.matmul(ah, x.data)
    data = np.matmul(data, aw.T)

    def bwd(g):
        _accum(x, np.matmul(ah.T, np.matmul(g, aw)))

    return _node(np.ascontiguousarray(data), (x,), bwd)


def upsample_nearest2x(x) -> Tensor:
    x = _coerce(x)
    if x.ndim != 4:
        raise ContractError(f"resample expects (B,C,H,W), got {x.shape}")
    _, _, h, w = x.shape
    return _separable_resample(x, _nearest_up_matrix(h), _nearest_up_matrix(w))


def downsample_avg2x(x) -> Tensor:
    x = _coerce(x)
    if x.ndim != 4:
        raise ContractError(f"resample expects (B,C,H,W), got {x.shape}")
    _, _, h, w = x.shape
    if h % 2 or w % 2:
        raise ContractError(f"downsample_avg2x needs even spatial dims, got {h}x{w}")
    return _separable_resample(x, _avg_down_matrix(h), _avg_down_matrix(w))


def upsample_bilinear2x(x) -> Tensor:
    x = _coerce(x)
    if x.ndim != 4:
        raise ContractError(f"resample expects (B,C,H,W), got {x.shape}")
    _, _, h, w = x.shape
    return _separable_resample(x, _bilinear_up_matrix(h), _bilinear_up_matrix(w))
