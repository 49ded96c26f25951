"""Minimal dense-tensor substrate with reverse-mode automatic differentiation.

Tensors wrap row-major numpy arrays of a single float dtype (float32 or
float64). Every operation checks shapes and dtypes at its boundary and
fails fast; there is no implicit broadcasting beyond scalar-vs-tensor.
Differentiable operations record their adjoint rule on the produced
tensor, and ``backward`` replays the graph in reverse topological order.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Param",
    "ShapeError",
    "DtypeError",
    "CorruptTensorError",
    "backward",
    "finite_diff_check",
    "matmul",
    "concat",
    "conv2d",
    "pixel_shuffle",
    "pixel_unshuffle",
    "rowwise_kron",
    "save_tensor",
    "load_tensor",
    "tensor_to_bytes",
    "tensor_from_bytes",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class DtypeError(TypeError):
    """Mixed or unsupported float dtypes in one operation."""


class CorruptTensorError(ValueError):
    """Serialized tensor bytes fail header or length validation."""


_DTYPES = (np.float32, np.float64)
_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def _as_array(data, dtype) -> np.ndarray:
    a = np.ascontiguousarray(data, dtype=dtype)
    return a


class Tensor:
    """Dense n-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, dtype=np.float64, requires_grad: bool = False):
        if dtype not in _DTYPES and np.dtype(dtype) not in (np.dtype("f4"), np.dtype("f8")):
            raise DtypeError(f"unsupported dtype {dtype!r}; use float32 or float64")
        self.data = _as_array(data, np.dtype(dtype))
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable[[np.ndarray], None]] = None

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def zeros(shape, dtype=np.float64, requires_grad=False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), dtype, requires_grad)

    @staticmethod
    def ones(shape, dtype=np.float64, requires_grad=False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=dtype), dtype, requires_grad)

    @staticmethod
    def from_rng(rng: np.random.Generator, shape, dtype=np.float64,
                 low=-1.0, high=1.0, requires_grad=False) -> "Tensor":
        return Tensor(rng.uniform(low, high, size=shape).astype(dtype), dtype, requires_grad)

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), self.dtype, requires_grad=False)

    # -- graph plumbing ------------------------------------------------------

    def _make(self, data: np.ndarray, parents: Sequence["Tensor"],
              backward_fn: Optional[Callable[[np.ndarray], None]]) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        else:
            out._parents = ()
            out._backward_fn = None
        return out

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # -- dtype/shape checks --------------------------------------------------

    def _check_same(self, other: "Tensor", op: str) -> None:
        if self.dtype != other.dtype:
            raise DtypeError(f"{op}: mixed dtypes {self.dtype.name} and {other.dtype.name}")
        if self.shape != other.shape:
            raise ShapeError(f"{op}: shape mismatch {self.shape} vs {other.shape}")

    # -- elementwise arithmetic ----------------------------------------------

    def add(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            self._check_same(other, "add")
            out = self._make(self.data + other.data, (self, other), None)
            if out.requires_grad:
                def bw(g, a=self, b=other):
                    if a.requires_grad:
                        a._accum(g)
                    if b.requires_grad:
                        b._accum(g)
                out._backward_fn = bw
            return out
        c = float(other)
        out = self._make(self.data + c, (self,), None)
        if out.requires_grad:
            out._backward_fn = lambda g, a=self: a._accum(g)
        return out

    def sub(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            self._check_same(other, "sub")
            out = self._make(self.data - other.data, (self, other), None)
            if out.requires_grad:
                def bw(g, a=self, b=other):
                    if a.requires_grad:
                        a._accum(g)
                    if b.requires_grad:
                        b._accum(-g)
                out._backward_fn = bw
            return out
        return self.add(-float(other))

    def mul(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            self._check_same(other, "mul")
            out = self._make(self.data * other.data, (self, other), None)
            if out.requires_grad:
                def bw(g, a=self, b=other):
                    if a.requires_grad:
                        a._accum(g * b.data)
                    if b.requires_grad:
                        b._accum(g * a.data)
                out._backward_fn = bw
            return out
        c = float(other)
        out = self._make(self.data * c, (self,), None)
        if out.requires_grad:
            out._backward_fn = lambda g, a=self, c=c: a._accum(g * c)
        return out

    def neg(self) -> "Tensor":
        return self.mul(-1.0)

    __add__ = add
    __radd__ = add
    __sub__ = sub
    __mul__ = mul
    __rmul__ = mul
    __neg__ = neg

    def __rsub__(self, other):
        return self.neg().add(float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self.mul(other.reciprocal())
        return self.mul(1.0 / float(other))

    # -- elementwise functions -----------------------------------------------

    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        out = self._make(y, (self,), None)
        if out.requires_grad:
            out._backward_fn = lambda g, a=self, y=y: a._accum(g * y)
        return out

    def sqrt(self) -> "Tensor":
        y = np.sqrt(self.data)
        out = self._make(y, (self,), None)
        if out.requires_grad:
            out._backward_fn = lambda g, a=self, y=y: a._accum(g * (0.5 / y))
        return out

    def reciprocal(self) -> "Tensor":
        y = 1.0 / self.data
        out = self._make(y, (self,), None)
        if out.requires_grad:
            out._backward_fn = lambda g, a=self, y=y: a._accum(-g * y * y)
        return out

    def abs(self) -> "Tensor":
        out = self._make(np.abs(self.data), (self,), None)
        if out.requires_grad:
            # subgradient 0 at the kink
            out._backward_fn = lambda g, a=self: a._accum(g * np.sign(a.data))
        return out

    def power(self, n: int) -> "Tensor":
        if not isinstance(n, int) or n < 0:
            raise ValueError(f"power: exponent must be a non-negative int, got {n!r}")
        y = self.data ** n
        out = self._make(y, (self,), None)
        if out.requires_grad:
            if n == 0:
                out._backward_fn = lambda g, a=self: a._accum(np.zeros_like(a.data))
            else:
                out._backward_fn = lambda g, a=self, n=n: a._accum(g * n * a.data ** (n - 1))
        return out

    def clamp_min(self, lo: float) -> "Tensor":
        y = np.maximum(self.data, lo)
        out = self._make(y, (self,), None)
        if out.requires_grad:
            mask = (self.data > lo).astype(self.dtype)
            out._backward_fn = lambda g, a=self, m=mask: a._accum(g * m)
        return out

    def gelu(self) -> "Tensor":
        """Exact Gaussian-error-unit activation, 0.5*x*(1+erf(x/sqrt(2)))."""
        x = self.data
        e = erf(x * _INV_SQRT2)
        y = 0.5 * x * (1.0 + e)
        out = self._make(y.astype(self.dtype), (self,), None)
        if out.requires_grad:
            d = 0.5 * (1.0 + e) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI
            out._backward_fn = lambda g, a=self, d=d: a._accum(g * d)
        return out

    def leaky_relu(self, alpha: float = 0.01) -> "Tensor":
        x = self.data
        y = np.where(x >= 0, x, alpha * x)
        out = self._make(y.astype(self.dtype), (self,), None)
        if out.requires_grad:
            d = np.where(x >= 0, 1.0, alpha).astype(self.dtype)
            out._backward_fn = lambda g, a=self, d=d: a._accum(g * d)
        return out

    # -- reductions ------------------------------------------------------------

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        if axis is not None and not -self.data.ndim <= axis < self.data.ndim:
            raise ShapeError(f"sum: axis {axis} out of range for shape {self.shape}")
        y = np.sum(self.data, axis=axis, keepdims=keepdims)
        out = self._make(np.asarray(y, dtype=self.dtype), (self,), None)
        if out.requires_grad:
            def bw(g, a=self, axis=axis, keepdims=keepdims):
                if axis is None:
                    a._accum(np.full_like(a.data, float(g)))
                else:
                    gg = g if keepdims else np.expand_dims(g, axis)
                    a._accum(np.broadcast_to(gg, a.data.shape).astype(a.dtype))
            out._backward_fn = bw
        return out

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims).mul(1.0 / n)

    def softmax(self) -> "Tensor":
        """Softmax along the last axis; rows sum to 1."""
        z = self.data - np.max(self.data, axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / np.sum(e, axis=-1, keepdims=True)
        out = self._make(y.astype(self.dtype), (self,), None)
        if out.requires_grad:
            def bw(g, a=self, y=y):
                dot = np.sum(g * y, axis=-1, keepdims=True)
                a._accum(y * (g - dot))
            out._backward_fn = bw
        return out

    # -- structural ops --------------------------------------------------------

    def reshape(self, shape) -> "Tensor":
        shape = tuple(shape)
        if int(np.prod(shape)) != self.data.size:
            raise ShapeError(f"reshape: cannot view {self.shape} as {shape}")
        out = self._make(self.data.reshape(shape), (self,), None)
        if out.requires_grad:
            out._backward_fn = lambda g, a=self: a._accum(g.reshape(a.data.shape))
        return out

    def transpose(self, axes: Optional[Sequence[int]] = None) -> "Tensor":
        if axes is None:
            axes = tuple(reversed(range(self.data.ndim)))
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        out = self._make(np.ascontiguousarray(self.data.transpose(axes)), (self,), None)
        if out.requires_grad:
            out._backward_fn = lambda g, a=self, inv=inv: a._accum(
                np.ascontiguousarray(g.transpose(inv)))
        return out

    def narrow(self, axis: int, start: int, length: int) -> "Tensor":
        if not 0 <= axis < self.data.ndim:
            raise ShapeError(f"narrow: axis {axis} out of range for shape {self.shape}")
        if start < 0 or start + length > self.data.shape[axis]:
            raise ShapeError(
                f"narrow: [{start}, {start + length}) outside axis of size "
                f"{self.data.shape[axis]}")
        idx = [slice(None)] * self.data.ndim
        idx[axis] = slice(start, start + length)
        idx = tuple(idx)
        out = self._make(np.ascontiguousarray(self.data[idx]), (self,), None)
        if out.requires_grad:
            def bw(g, a=self, idx=idx):
                full = np.zeros_like(a.data)
                full[idx] = g
                a._accum(full)
            out._backward_fn = bw
        return out

    def repeat_last(self, n: int) -> "Tensor":
        """Tile a trailing singleton axis to width n (explicit column broadcast)."""
        if self.data.shape[-1] != 1:
            raise ShapeError(f"repeat_last: trailing axis must be 1, shape {self.shape}")
        out_data = np.repeat(self.data, n, axis=-1)
        out = self._make(np.ascontiguousarray(out_data), (self,), None)
        if out.requires_grad:
            out._backward_fn = lambda g, a=self: a._accum(
                np.sum(g, axis=-1, keepdims=True))
        return out

    def add_rowvec(self, v: "Tensor") -> "Tensor":
        """Add a length-C vector to every row of an N-by-C matrix."""
        if self.data.ndim != 2 or v.data.ndim != 1:
            raise ShapeError(f"add_rowvec: need matrix + vector, got {self.shape}, {v.shape}")
        if self.data.shape[1] != v.data.shape[0]:
            raise ShapeError(f"add_rowvec: width {self.data.shape[1]} vs {v.data.shape[0]}")
        if self.dtype != v.dtype:
            raise DtypeError(f"add_rowvec: mixed dtypes {self.dtype.name}, {v.dtype.name}")
        out = self._make(self.data + v.data[None, :], (self, v), None)
        if out.requires_grad:
            def bw(g, a=self, b=v):
                if a.requires_grad:
                    a._accum(g)
                if b.requires_grad:
                    b._accum(np.sum(g, axis=0))
            out._backward_fn = bw
        return out


class Param:
    """Named trainable tensor with a shape-matched gradient slot."""

    __slots__ = ("name", "value")

    def __init__(self, name: str, value: Tensor):
        self.name = name
        value.requires_grad = True
        self.value = value

    @property
    def grad(self) -> np.ndarray:
        # unreachable params read as zero gradient
        if self.value.grad is None:
            return np.zeros_like(self.value.data)
        return self.value.grad

    def zero_grad(self) -> None:
        self.value.grad = None

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


# -- binary / structural free functions ---------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: need 2-d operands, got {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims disagree, {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise DtypeError(f"matmul: mixed dtypes {a.dtype.name} and {b.dtype.name}")
    out = a._make(a.data @ b.data, (a, b), None)
    if out.requires_grad:
        def bw(g, a=a, b=b):
            if a.requires_grad:
                a._accum(g @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ g)
        out._backward_fn = bw
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise DtypeError("concat: mixed dtypes")
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        s[axis] = ref[axis]
        if s != ref:
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} vs {t.shape}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = tensors[0]._make(data, tuple(tensors), None)
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        def bw(g, parts=tuple(tensors), sizes=tuple(sizes), axis=axis):
            ofs = 0
            for t, n in zip(parts, sizes):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(ofs, ofs + n)
                    t._accum(np.ascontiguousarray(g[tuple(idx)]))
                ofs += n
        out._backward_fn = bw
    return out


def rowwise_kron(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise Kronecker product: out[n] = kron(a[n], b[n]), shape N x (A*B)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"rowwise_kron: need matching row counts, {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise DtypeError("rowwise_kron: mixed dtypes")
    n, wa = a.data.shape
    wb = b.data.shape[1]
    data = (a.data[:, :, None] * b.data[:, None, :]).reshape(n, wa * wb)
    out = a._make(np.ascontiguousarray(data), (a, b), None)
    if out.requires_grad:
        def bw(g, a=a, b=b, n=n, wa=wa, wb=wb):
            g3 = g.reshape(n, wa, wb)
            if a.requires_grad:
                a._accum(np.einsum("nab,nb->na", g3, b.data))
            if b.requires_grad:
                b._accum(np.einsum("nab,na->nb", g3, a.data))
        out._backward_fn = bw
    return out


# -- convolution and sub-pixel rearrangement -----------------------------------

_CONV_MODES = ("pointwise", "spatial", "depthwise")


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    # xp: (Cin, h+2p, w+2p) -> (Cin*k*k, h*w)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    cin = xp.shape[0]
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(cin * k * k, h * w)


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
           mode: str = "spatial") -> Tensor:
    """2-d cross-correlation, stride 1, spatial size preserved.

    Modes: ``pointwise`` (1x1), ``spatial`` (3x3, zero padding 1),
    ``depthwise`` (3x3 per-channel, weight shape (C, 1, 3, 3)).
    """
    if mode not in _CONV_MODES:
        raise ValueError(f"conv2d: unknown mode {mode!r}")
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need x (C,H,W) and w (Cout,Cin,k,k), got {x.shape}, {w.shape}")
    if x.dtype != w.dtype:
        raise DtypeError(f"conv2d: mixed dtypes {x.dtype.name} and {w.dtype.name}")
    cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv2d: kernel must be 1x1 or 3x3, got {kh}x{kw}")
    k = kh
    if mode == "pointwise" and k != 1:
        raise ShapeError("conv2d: pointwise mode requires a 1x1 kernel")
    if mode in ("spatial", "depthwise") and k != 3:
        raise ShapeError(f"conv2d: {mode} mode requires a 3x3 kernel")
    if mode == "depthwise":
        if cout != cin or cin_w != 1:
            raise ShapeError(
                f"conv2d depthwise: weight must be ({cin},1,3,3), got {w.shape}")
    elif cin_w != cin:
        raise ShapeError(f"conv2d: input channels {cin} vs weight expects {cin_w}")
    if bias is not None:
        if bias.data.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape}, expected ({cout},)")
        if bias.dtype != x.dtype:
            raise DtypeError("conv2d: bias dtype mismatch")

    p = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data

    if mode == "depthwise":
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
        y = np.einsum("chwij,cij->chw", win, w.data[:, 0])
        cols = None
    else:
        cols = _im2col(xp, k, h, wd)
        y = (w.data.reshape(cout, -1) @ cols).reshape(cout, h, wd)
    if bias is not None:
        y = y + bias.data[:, None, None]

    parents = (x, w) if bias is None else (x, w, bias)
    out = x._make(np.ascontiguousarray(y), parents, None)
    if out.requires_grad:
        def bw(g, x=x, w=w, bias=bias, cols=cols, mode=mode, k=k, p=p,
               h=h, wd=wd, cin=cin, cout=cout, xp_shape=xp.shape):
            gm = g.reshape(cout, -1)
            if mode == "depthwise":
                xpad = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
                win = np.lib.stride_tricks.sliding_window_view(xpad, (k, k), axis=(1, 2))
                if w.requires_grad:
                    gw = np.einsum("chw,chwij->cij", g, win)[:, None]
                    w._accum(gw)
                if x.requires_grad:
                    gxp = np.zeros(xp_shape, dtype=x.dtype)
                    for i in range(k):
                        for j in range(k):
                            gxp[:, i:i + h, j:j + wd] += g * w.data[:, 0, i, j][:, None, None]
                    x._accum(gxp[:, p:p + h, p:p + wd] if p else gxp)
            else:
                if w.requires_grad:
                    w._accum((gm @ cols.T).reshape(w.data.shape))
                if x.requires_grad:
                    gcols = (w.data.reshape(cout, -1).T @ gm).reshape(cin, k, k, h, wd)
                    gxp = np.zeros(xp_shape, dtype=x.dtype)
                    for i in range(k):
                        for j in range(k):
                            gxp[:, i:i + h, j:j + wd] += gcols[:, i, j]
                    x._accum(gxp[:, p:p + h, p:p + wd] if p else gxp)
            if bias is not None and bias.requires_grad:
                bias._accum(g.sum(axis=(1, 2)))
        out._backward_fn = bw
    return out


def _shuffle_data(x: np.ndarray, r: int) -> np.ndarray:
    c2, h, w = x.shape
    c = c2 // (r * r)
    return np.ascontiguousarray(
        x.reshape(c, r, r, h, w).transpose(0, 3, 1, 4, 2).reshape(c, h * r, w * r))


def _unshuffle_data(x: np.ndarray, r: int) -> np.ndarray:
    c, hr, wr = x.shape
    h, w = hr // r, wr // r
    return np.ascontiguousarray(
        x.reshape(c, h, r, w, r).transpose(0, 2, 4, 1, 3).reshape(c * r * r, h, w))


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange (C*r^2, H, W) into (C, r*H, r*W); exact inverse of pixel_unshuffle."""
    if x.data.ndim != 3:
        raise ShapeError(f"pixel_shuffle: need (C,H,W), got {x.shape}")
    c2 = x.data.shape[0]
    if c2 % (r * r) != 0:
        raise ShapeError(f"pixel_shuffle: {c2} channels not divisible by r^2={r * r}")
    if r == 1:
        return x.reshape(x.shape)
    out = x._make(_shuffle_data(x.data, r), (x,), None)
    if out.requires_grad:
        out._backward_fn = lambda g, a=x, r=r: a._accum(_unshuffle_data(g, r))
    return out


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    if x.data.ndim != 3:
        raise ShapeError(f"pixel_unshuffle: need (C,H,W), got {x.shape}")
    _, h, w = x.data.shape
    if h % r != 0 or w % r != 0:
        raise ShapeError(f"pixel_unshuffle: spatial dims {h}x{w} not divisible by r={r}")
    if r == 1:
        return x.reshape(x.shape)
    out = x._make(_unshuffle_data(x.data, r), (x,), None)
    if out.requires_grad:
        out._backward_fn = lambda g, a=x, r=r: a._accum(_shuffle_data(g, r))
    return out


# -- reverse-mode replay -------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate gradients of all tensors reachable from a scalar loss."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative gap between the tape gradient of f at x and central differences."""
    x0 = Tensor(x.data.copy(), x.dtype, requires_grad=True)
    loss = f(x0)
    if loss.data.size != 1:
        raise ShapeError("finite_diff_check: f must return a scalar")
    backward(loss)
    g_tape = np.zeros_like(x0.data) if x0.grad is None else x0.grad

    flat = x.data.copy().reshape(-1)
    g_fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(flat.reshape(x.data.shape), x.dtype)).item()
        flat[i] = orig - h
        fm = f(Tensor(flat.reshape(x.data.shape), x.dtype)).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"finite_diff_check: non-finite value at coordinate {i}")
        g_fd[i] = (fp - fm) / (2.0 * h)
    g_fd = g_fd.reshape(x.data.shape)
    denom = np.maximum(1.0, np.abs(g_fd))
    return float(np.max(np.abs(g_tape - g_fd) / denom))


# -- serialization ---------------------------------------------------------------

_MAGIC = b"TNSR"
_VERSION = 1
_DTYPE_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}
_CODE_DTYPES = {1: np.dtype("float32"), 2: np.dtype("float64")}


def tensor_to_bytes(t: Tensor) -> bytes:
    dims = t.data.shape
    head = _MAGIC + struct.pack("<HH", _VERSION, len(dims))
    head += b"".join(struct.pack("<Q", d) for d in dims)
    head += struct.pack("<B", _DTYPE_CODES[t.dtype])
    payload = np.ascontiguousarray(t.data, dtype=t.dtype.newbyteorder("<")).tobytes()
    return head + payload


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one serialized tensor; returns (tensor, next offset)."""
    if buf[offset:offset + 4] != _MAGIC:
        raise CorruptTensorError("bad tensor magic")
    offset += 4
    try:
        version, rank = struct.unpack_from("<HH", buf, offset)
        offset += 4
        if version != _VERSION:
            raise CorruptTensorError(f"unsupported tensor version {version}")
        dims = []
        for _ in range(rank):
            (d,) = struct.unpack_from("<Q", buf, offset)
            offset += 8
            dims.append(int(d))
        (code,) = struct.unpack_from("<B", buf, offset)
        offset += 1
    except struct.error as exc:
        raise CorruptTensorError("truncated tensor header") from exc
    if code not in _CODE_DTYPES:
        raise CorruptTensorError(f"unknown dtype code {code}")
    dt = _CODE_DTYPES[code]
    count = int(np.prod(dims)) if dims else 1
    nbytes = count * dt.itemsize
    if len(buf) < offset + nbytes:
        raise CorruptTensorError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype=dt.newbyteorder("<"), count=count, offset=offset)
    offset += nbytes
    return Tensor(arr.reshape(dims).astype(dt), dt), offset


def save_tensor(t: Tensor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    t, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise CorruptTensorError(f"{len(buf) - end} trailing bytes after tensor payload")
    return t
