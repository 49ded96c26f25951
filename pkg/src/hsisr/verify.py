"""Self-contained property suite behind the ``verify`` CLI subcommand.

Each check returns (name, passed, detail); ``run_all`` prints one line per
property and reports overall success. The checks mirror the mathematical
claims the attention mechanism rests on: the multiplication-reorder
identity, truncated-kernel fidelity and its remainder bound, shift/scale
invariance of the squared correlation, positive semidefiniteness of the
kernel Gram matrices, and gradient agreement with finite differences.
"""

from __future__ import annotations

import math
from dataclasses import replace
from fractions import Fraction

import numpy as np

from .attention import (
    AttentionConfig,
    essa_forward,
    feature_map,
    kernel_gram,
    reference_attention,
    scc2,
)
from .model import ModelConfig, build_model, forward_features
from .tensor import Tensor, backward, finite_diff_check, matmul

__all__ = ["run_all", "CHECKS"]


def _rand_tokens(rng, n, c, dtype=np.float64):
    return Tensor(rng.standard_normal((n, c)).astype(dtype), dtype)


def _rel_inf(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.max(np.abs(b)), 1e-30)
    return float(np.max(np.abs(a - b)) / denom)


def check_reorder_identity(cases: int = 50, seed: int = 0) -> tuple[bool, str]:
    """psi(Q)(psi(K)^T V) vs (psi(Q) psi(K)^T) V, exact mode, 64-bit."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(cases):
        n = int(rng.integers(2, 65))
        c = int(rng.integers(2, 9))
        p = int(rng.integers(0, 4))
        cfg = AttentionConfig(mode="exact", order=p, normalize=False)
        q, k, v = (_rand_tokens(rng, n, c) for _ in range(3))
        linear = essa_forward(q, k, v, cfg).data
        pq = feature_map(q, cfg)
        pk = feature_map(k, cfg)
        quadratic = matmul(matmul(pq, pk.transpose()), v).data
        worst = max(worst, _rel_inf(linear, quadratic))
    return worst <= 1e-5, f"max relative inf-norm diff {worst:.3e} over {cases} cases"


def check_kernel_fidelity(cases: int = 50, seed: int = 1) -> tuple[bool, str]:
    """Exact-mode linear attention equals the quadratic truncated-kernel oracle;
    truncation error vs exp(r^2) obeys the series remainder and shrinks with p."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(cases):
        n = int(rng.integers(2, 33))
        c = int(rng.integers(2, 9))
        p = int(rng.integers(0, 4))
        cfg = AttentionConfig(mode="exact", order=p, normalize=True)
        q, k, v = (_rand_tokens(rng, n, c) for _ in range(3))
        ours = essa_forward(q, k, v, cfg).data
        ref = reference_attention(q, k, v, "scc-kernel-quadratic", cfg).data
        worst = max(worst, _rel_inf(ours, ref))
    if worst > 1e-5:
        return False, f"linear/quadratic mismatch {worst:.3e}"

    # remainder bound and monotone improvement of the truncation
    for i in range(10):
        n = int(rng.integers(2, 33))
        c = int(rng.integers(2, 9))
        x = rng.standard_normal((n, c))
        cfg0 = AttentionConfig(mode="exact", order=0)
        exact = np.exp(_sq_corr_matrix(x, cfg0.epsilon))
        prev_err = None
        for p in range(0, 5):
            trunc = kernel_gram(x, replace(cfg0, order=p))
            err = float(np.max(np.abs(trunc - exact)))
            bound = math.e - sum(1.0 / math.factorial(j) for j in range(p + 1))
            if err > bound + 1e-12:
                return False, f"remainder bound violated at p={p}: {err:.4e} > {bound:.4e}"
            if prev_err is not None and err > prev_err + 1e-12:
                return False, f"truncation error not monotone at p={p}"
            prev_err = err
    return True, f"linear matches quadratic (max {worst:.3e}); remainder bound holds"


def _sq_corr_matrix(x: np.ndarray, epsilon: float) -> np.ndarray:
    c = x - x.mean(axis=1, keepdims=True)
    n = np.linalg.norm(c, axis=1, keepdims=True)
    c = np.where(n > epsilon, c / np.maximum(n, epsilon), 0.0)
    r = c @ c.T
    return r * r


def check_invariance(cases: int = 100, seed: int = 2) -> tuple[bool, str]:
    """scc2 and normalized attention output are invariant to k -> s*k + t*1."""
    rng = np.random.default_rng(seed)
    worst_r = 0.0
    for i in range(cases):
        c = int(rng.integers(2, 17))
        q = rng.standard_normal(c)
        k = rng.standard_normal(c)
        s = 0.0
        while abs(s) < 1e-3:
            s = rng.uniform(-3, 3)
        t = rng.uniform(-2, 2)
        worst_r = max(worst_r, abs(scc2(q, s * k + t) - scc2(q, k)))
    if worst_r > 1e-6:
        return False, f"scc2 shift/scale drift {worst_r:.3e}"

    worst_o = 0.0
    for mode in ("exact", "elementwise"):
        cfg = AttentionConfig(mode=mode, order=2, normalize=True)
        for i in range(10):
            n = int(rng.integers(2, 17))
            c = int(rng.integers(2, 9))
            q, k, v = (_rand_tokens(rng, n, c) for _ in range(3))
            base = essa_forward(q, k, v, cfg).data
            k2 = Tensor(2.5 * k.data - 1.0, np.float64)
            moved = essa_forward(q, k2, v, cfg).data
            worst_o = max(worst_o, _rel_inf(moved, base))
    ok = worst_o <= 1e-5
    return ok, f"scc2 drift {worst_r:.2e}; attention-output drift {worst_o:.2e}"


def check_psd(cases: int = 20, seed: int = 3) -> tuple[bool, str]:
    """Truncated-kernel Gram matrices stay positive semidefinite, both modes."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(cases):
        n = int(rng.integers(2, 65))
        c = int(rng.integers(2, 9))
        p = int(rng.integers(0, 4))
        x = rng.standard_normal((n, c))
        for mode in ("exact", "elementwise"):
            cfg = AttentionConfig(mode=mode, order=p)
            gram = kernel_gram(x, cfg)
            lam = float(np.linalg.eigvalsh(gram)[0])
            worst = min(worst, lam / n) if lam < 0 else worst
            if lam < -1e-8 * n:
                return False, f"min eigenvalue {lam:.3e} at N={n}, mode={mode}, p={p}"
    return True, f"min eigenvalue ratio >= {worst:.2e} over {cases} token sets"


def check_gradients(seed: int = 4) -> tuple[bool, str]:
    """Attention and a small end-to-end model agree with finite differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for mode in ("exact", "elementwise"):
        cfg = AttentionConfig(mode=mode, order=2, normalize=True)
        base = rng.standard_normal((4, 3))
        kv = [_rand_tokens(rng, 4, 3) for _ in range(2)]

        def f(t, kv=kv, cfg=cfg):
            return essa_forward(t, kv[0], kv[1], cfg).abs().sum()

        worst = max(worst, finite_diff_check(f, Tensor(base, np.float64), h=1e-5))
    if worst > 1e-4:
        return False, f"attention gradient gap {worst:.3e}"

    cfg = ModelConfig(bands=4, channels=8, scale=2,
                      stage_schedule=(Fraction(1), Fraction(2)),
                      attention=AttentionConfig(order=1))
    store = build_model(cfg, seed=11, dtype=np.float64)
    x = rng.uniform(0, 1, size=(4, 8, 8))
    target = Tensor(rng.uniform(0, 1, size=(4, 16, 16)), np.float64)

    def f_model(t, store=store, cfg=cfg, target=target):
        return forward_features(t, store, cfg).sub(target).abs().mean()

    gap = finite_diff_check(f_model, Tensor(x, np.float64), h=1e-5)
    worst = max(worst, gap)
    return worst <= 1e-4, f"max finite-difference gap {worst:.3e}"


def check_boundedness(seed: int = 5) -> tuple[bool, str]:
    """Squared correlations lie in [0,1]; truncated kernel entries in [1-, e+]."""
    rng = np.random.default_rng(seed)
    for i in range(20):
        n = int(rng.integers(2, 33))
        c = int(rng.integers(2, 9))
        x = rng.standard_normal((n, c))
        r2 = _sq_corr_matrix(x, 1e-6)
        if r2.min() < 0 or r2.max() > 1 + 1e-6:
            return False, f"r^2 out of [0,1]: [{r2.min():.3e}, {r2.max():.3e}]"
        ker = kernel_gram(x, AttentionConfig(mode="exact", order=3))
        if ker.min() < 1 - 1e-6 or ker.max() > math.e + 1e-6:
            return False, f"kernel out of [1, e]: [{ker.min():.4f}, {ker.max():.4f}]"
    return True, "r^2 in [0,1], truncated kernel in [1, e] at sigma=1"


CHECKS = [
    ("reorder-identity", check_reorder_identity),
    ("kernel-fidelity", check_kernel_fidelity),
    ("shift-scale-invariance", check_invariance),
    ("kernel-psd", check_psd),
    ("gradient-agreement", check_gradients),
    ("boundedness", check_boundedness),
]


def run_all(verbose: bool = True) -> bool:
    ok_all = True
    for name, fn in CHECKS:
        ok, detail = fn()
        ok_all &= ok
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return ok_all
