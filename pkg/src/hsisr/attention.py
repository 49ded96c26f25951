"""Correlation-kernel attention: SCC similarity, its exponential Mercer
kernel, truncated-series feature maps, and the linear-time ESSA form.

Two feature-map modes are provided:

* ``exact`` — block ``i`` is the flattened ``2i``-fold tensor power of the
  centered, unit-normalized token, so the feature inner product equals the
  degree-``p`` truncation of ``exp(r^2 / sigma)`` where ``r`` is the squared
  Pearson correlation's square root. Mathematically faithful, width grows
  as ``C^(2i)``, guarded against blow-up.
* ``elementwise`` — block ``i`` is the coordinatewise ``2i``-th power with
  the same scaling, width ``1 + p*C``. A cheaper surrogate kernel with the
  same structure (explicit feature map, hence positive semidefinite).

Quadratic-cost reference attentions live here too; they are the oracles the
linear form is checked against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .tensor import (
    DtypeError,
    ShapeError,
    Tensor,
    concat,
    matmul,
    rowwise_kron,
)

__all__ = [
    "AttentionConfig",
    "MemoryGuardError",
    "center_normalize",
    "scc2",
    "scc_attention",
    "feature_map",
    "feature_width",
    "essa_forward",
    "reference_attention",
    "kernel_gram",
]

_MODES = ("exact", "elementwise")
# exact-mode feature matrices are capped at this many scalar entries
_EXACT_MAX_ELEMENTS = 1 << 26


class MemoryGuardError(ValueError):
    """Exact-mode feature map would exceed the configured memory budget."""


@dataclass(frozen=True)
class AttentionConfig:
    """Knobs of the kernelized attention.

    sigma: kernel temperature (> 0).
    order: series truncation degree p (>= 0).
    mode: "exact" tensor-power features or the "elementwise" surrogate.
    normalize: divide each output row by its kernel row-sum.
    heads: channel split count; must divide C with head width >= 2.
    epsilon: centering-norm guard.
    """

    sigma: float = 1.0
    order: int = 1
    mode: str = "elementwise"
    normalize: bool = True
    heads: int = 1
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.order < 0 or not isinstance(self.order, int):
            raise ValueError(f"order must be an int >= 0, got {self.order!r}")
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}, got {self.mode!r}")
        if self.heads < 1:
            raise ValueError(f"heads must be >= 1, got {self.heads}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")

    def validate_channels(self, c: int) -> None:
        if c % self.heads != 0:
            raise ShapeError(f"channel dim {c} not divisible by heads={self.heads}")
        if c // self.heads < 2:
            raise ShapeError(
                f"head width {c // self.heads} < 2; centering a 1-channel token is degenerate")
        if self.mode == "exact" and c // self.heads > 16:
            raise MemoryGuardError(
                f"exact mode caps head width at 16 channels, got {c // self.heads}")


def feature_width(c: int, order: int, mode: str) -> int:
    """Feature-map width d for one head of width c."""
    if mode == "exact":
        return sum(c ** (2 * i) for i in range(order + 1))
    return 1 + order * c


def center_normalize(x: Tensor, epsilon: float = 1e-6) -> Tensor:
    """Per-row mean removal and unit normalization with an epsilon guard.

    Rows whose centered norm exceeds epsilon are normalized exactly (this
    makes the squared correlation genuinely scale-invariant); rows at or
    below the guard map to the zero row rather than raising, since flat
    image regions produce them routinely.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"center_normalize: need N x C matrix, got {x.shape}")
    n, c = x.data.shape
    if c < 2:
        raise ShapeError("center_normalize: C must be >= 2")
    m = x.mean(axis=1, keepdims=True)
    centered = x.sub(m.repeat_last(c))
    norm = centered.mul(centered).sum(axis=1, keepdims=True).sqrt()
    inv = norm.clamp_min(epsilon).reciprocal()
    live = Tensor((norm.data > epsilon).astype(x.dtype), x.dtype)
    return centered.mul(inv.mul(live).repeat_last(c))


def scc2(q, k, epsilon: float = 1e-6) -> float:
    """Squared correlation of two token rows, in [0, 1]."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != k.shape or q.ndim != 1 or q.size < 2:
        raise ShapeError(f"scc2: need two equal rows of length >= 2, got {q.shape}, {k.shape}")
    qc = q - q.mean()
    kc = k - k.mean()
    nq = np.linalg.norm(qc)
    nk = np.linalg.norm(kc)
    if nq <= epsilon or nk <= epsilon:
        return 0.0
    r = float(qc @ kc) / (nq * nk)
    return r * r


def _split_heads(x: Tensor, heads: int) -> list[Tensor]:
    c = x.data.shape[1]
    w = c // heads
    return [x.narrow(1, h * w, w) for h in range(heads)]


def feature_map(x: Tensor, cfg: AttentionConfig) -> Tensor:
    """Truncated-series feature map of one head's token matrix.

    Rows are center-normalized first; block 0 is all ones and block i
    carries the scale 1 / (sigma^(i/2) * sqrt(i!)).
    """
    if x.data.ndim != 2:
        raise ShapeError(f"feature_map: need N x C matrix, got {x.shape}")
    n, c = x.data.shape
    if cfg.mode == "exact":
        d = feature_width(c, cfg.order, "exact")
        if n * d > _EXACT_MAX_ELEMENTS:
            raise MemoryGuardError(
                f"exact feature matrix {n} x {d} exceeds the element budget")
    xh = center_normalize(x, cfg.epsilon)
    blocks = [Tensor.ones((n, 1), dtype=x.dtype)]
    if cfg.mode == "exact":
        # power[i] = row-wise (2i)-fold tensor power of xh
        power = None
        for i in range(1, cfg.order + 1):
            step = rowwise_kron(xh, xh)
            power = step if power is None else rowwise_kron(power, step)
            scale = 1.0 / (cfg.sigma ** (i / 2.0) * math.sqrt(math.factorial(i)))
            blocks.append(power.mul(scale))
    else:
        sq = xh.mul(xh)
        power = None
        for i in range(1, cfg.order + 1):
            power = sq if power is None else power.mul(sq)
            scale = 1.0 / (cfg.sigma ** (i / 2.0) * math.sqrt(math.factorial(i)))
            blocks.append(power.mul(scale))
    return concat(blocks, axis=1) if len(blocks) > 1 else blocks[0]


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> tuple[int, int, int]:
    for name, t in (("Q", q), ("K", k), ("V", v)):
        if t.data.ndim != 2:
            raise ShapeError(f"{name} must be N x C, got {t.shape}")
    if q.dtype != k.dtype or q.dtype != v.dtype:
        raise DtypeError("attention: Q, K, V dtypes must match")
    if q.data.shape[1] != k.data.shape[1] or q.data.shape[1] != v.data.shape[1]:
        raise ShapeError(
            f"attention: channel dims differ, Q {q.shape}, K {k.shape}, V {v.shape}")
    if k.data.shape[0] != v.data.shape[0]:
        raise ShapeError(f"attention: K rows {k.shape[0]} vs V rows {v.shape[0]}")
    return q.data.shape[0], k.data.shape[0], q.data.shape[1]


def essa_forward(q: Tensor, k: Tensor, v: Tensor, cfg: AttentionConfig) -> Tensor:
    """Linear-complexity kernel attention psi(Q) (psi(K)^T V).

    The association order is fixed; the N x N attention matrix is never
    materialized. Row normalization uses the matching linear-time
    denominator psi(Q) (psi(K)^T 1); its all-ones feature block keeps it
    >= N, so the division is always safe.
    """
    nq, nk, c = _check_qkv(q, k, v)
    cfg.validate_channels(c)
    outs = []
    for qh, kh, vh in zip(_split_heads(q, cfg.heads),
                          _split_heads(k, cfg.heads),
                          _split_heads(v, cfg.heads)):
        w = qh.data.shape[1]
        pq = feature_map(qh, cfg)
        pk = feature_map(kh, cfg)
        pkt = pk.transpose()
        num = matmul(pq, matmul(pkt, vh))
        if cfg.normalize:
            ones = Tensor.ones((nk, 1), dtype=q.dtype)
            den = matmul(pq, matmul(pkt, ones))
            num = num.mul(den.reciprocal().repeat_last(w))
        outs.append(num)
    return concat(outs, axis=1) if len(outs) > 1 else outs[0]


def scc_attention(q: Tensor, k: Tensor, v: Tensor, cfg: AttentionConfig) -> Tensor:
    """Quadratic-cost squared-correlation attention R^2 V (no kernel)."""
    nq, nk, c = _check_qkv(q, k, v)
    cfg.validate_channels(c)
    outs = []
    for qh, kh, vh in zip(_split_heads(q, cfg.heads),
                          _split_heads(k, cfg.heads),
                          _split_heads(v, cfg.heads)):
        w = qh.data.shape[1]
        r = matmul(center_normalize(qh, cfg.epsilon),
                   center_normalize(kh, cfg.epsilon).transpose())
        r2 = r.mul(r)
        out = matmul(r2, vh)
        if cfg.normalize:
            den = r2.sum(axis=1, keepdims=True).clamp_min(cfg.epsilon)
            out = out.mul(den.reciprocal().repeat_last(w))
        outs.append(out)
    return concat(outs, axis=1) if len(outs) > 1 else outs[0]


# -- quadratic references (value-level numpy oracles) ---------------------------


def _centered_unit_rows(x: np.ndarray, epsilon: float) -> np.ndarray:
    c = x - x.mean(axis=1, keepdims=True)
    n = np.linalg.norm(c, axis=1, keepdims=True)
    return np.where(n > epsilon, c / np.maximum(n, epsilon), 0.0)


def _truncated_kernel_matrix(q: np.ndarray, k: np.ndarray, cfg: AttentionConfig,
                             order) -> np.ndarray:
    """Entries of the N x N SCC kernel, series-truncated or exact exp."""
    r = _centered_unit_rows(q, cfg.epsilon) @ _centered_unit_rows(k, cfg.epsilon).T
    r2 = r * r
    if order is None:
        return np.exp(r2 / cfg.sigma)
    ker = np.zeros_like(r2)
    for i in range(order + 1):
        ker += r2 ** i / (cfg.sigma ** i * math.factorial(i))
    return ker


def _elementwise_kernel_matrix(q: np.ndarray, k: np.ndarray,
                               cfg: AttentionConfig) -> np.ndarray:
    qh = _centered_unit_rows(q, cfg.epsilon)
    kh = _centered_unit_rows(k, cfg.epsilon)
    ker = np.ones((q.shape[0], k.shape[0]), dtype=q.dtype)
    for i in range(1, cfg.order + 1):
        ker += (qh ** (2 * i)) @ (kh ** (2 * i)).T / (cfg.sigma ** i * math.factorial(i))
    return ker


_REFERENCE_KINDS = ("mhsa", "scc-kernel-quadratic", "elementwise-kernel-quadratic")
_REFERENCE_N_CAP = 4096


def reference_attention(q: Tensor, k: Tensor, v: Tensor, kind: str,
                        cfg: AttentionConfig, order: int | None = -1) -> Tensor:
    """Quadratic-cost reference attentions used as oracles.

    ``mhsa`` is softmax(Q K^T / sqrt(C)) V. The kernel kinds materialize
    the full N x N kernel matrix (truncated series, or exact exp when
    ``order`` is None) before multiplying V. Intentionally O(N^2), hence
    the token-count cap.
    """
    if kind not in _REFERENCE_KINDS:
        raise ValueError(f"reference_attention: unknown kind {kind!r}")
    nq, nk, c = _check_qkv(q, k, v)
    if max(nq, nk) > _REFERENCE_N_CAP:
        raise ShapeError(
            f"reference_attention: N={max(nq, nk)} exceeds the O(N^2) oracle cap "
            f"{_REFERENCE_N_CAP}")
    cfg.validate_channels(c)
    if order == -1:
        order = cfg.order
    wh = c // cfg.heads
    outs = []
    for h in range(cfg.heads):
        qs = q.data[:, h * wh:(h + 1) * wh]
        ks = k.data[:, h * wh:(h + 1) * wh]
        vs = v.data[:, h * wh:(h + 1) * wh]
        if kind == "mhsa":
            logits = qs @ ks.T / math.sqrt(wh)
            logits -= logits.max(axis=1, keepdims=True)
            e = np.exp(logits)
            att = e / e.sum(axis=1, keepdims=True)
            outs.append(att @ vs)
            continue
        if kind == "scc-kernel-quadratic":
            ker = _truncated_kernel_matrix(qs, ks, cfg, order)
        else:
            ker = _elementwise_kernel_matrix(qs, ks, cfg)
        if cfg.normalize:
            ker = ker / ker.sum(axis=1, keepdims=True)
        outs.append(ker @ vs)
    return Tensor(np.concatenate(outs, axis=1), q.dtype)


def kernel_gram(x: np.ndarray, cfg: AttentionConfig) -> np.ndarray:
    """N x N Gram matrix of the configured truncated kernel on one token set."""
    x = np.asarray(x, dtype=np.float64)
    if cfg.mode == "exact":
        return _truncated_kernel_matrix(x, x, cfg, cfg.order)
    return _elementwise_kernel_matrix(x, x, replace(cfg, epsilon=cfg.epsilon))
