"""Analytic FLOP counting and wall-clock scaling for the two attention
forms.

Conventions (documented, value-independent): a multiply-accumulate is 2
flops, an exp is 4, other elementwise primitives are 1 per entry. Reports
also print MACs = flops / 2 since hardware papers usually quote MACs.
Counts cover the attention layer proper: Q/K/V projections, similarity or
feature-map work, the value products, and row normalization.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .attention import AttentionConfig, essa_forward, feature_width, reference_attention
from .tensor import Tensor

__all__ = ["count_flops", "measure_latency", "fit_scaling", "ScalingReport", "run_scaling"]

_EXP_FLOPS = 4


def count_flops(kind: str, n: int, c: int, cfg: AttentionConfig | None = None) -> int:
    """Closed-form flop count of one attention layer on N tokens, C channels."""
    cfg = cfg or AttentionConfig()
    proj = 3 * 2 * n * c * c
    if kind == "mhsa":
        scores = 2 * n * n * c          # Q K^T
        softmax = (_EXP_FLOPS + 2) * n * n
        apply_v = 2 * n * n * c         # weights @ V
        return proj + scores + softmax + apply_v
    if kind == "essa":
        h = cfg.heads
        w = c // h
        d = feature_width(w, cfg.order, cfg.mode)
        per_head = 0
        per_head += 6 * n * w                 # center + unit-normalize
        per_head += 3 * cfg.order * n * w     # power blocks and scaling
        per_head += 2 * n * d * w             # psi(K)^T V
        per_head += 2 * n * d * w             # psi(Q) (.)
        if cfg.normalize:
            per_head += 2 * n * d * 2 + n * w  # denominator and division
        return proj + h * per_head
    raise ValueError(f"count_flops: unknown kind {kind!r}")


def _random_qkv(n: int, c: int, seed: int) -> tuple[Tensor, Tensor, Tensor]:
    rng = np.random.default_rng(seed)
    mk = lambda: Tensor(rng.standard_normal((n, c)).astype(np.float32), np.float32)
    return mk(), mk(), mk()


def measure_latency(kind: str, n: int, c: int, repeats: int = 7, seed: int = 0,
                    cfg: AttentionConfig | None = None) -> float:
    """Median wall-clock nanoseconds of one forward pass after 2 warmups."""
    if repeats < 5:
        raise ValueError("repeats must be >= 5")
    cfg = cfg or AttentionConfig()
    q, k, v = _random_qkv(n, c, seed)

    if kind == "essa":
        run = lambda: essa_forward(q, k, v, cfg)
    elif kind == "mhsa":
        run = lambda: reference_attention(q, k, v, "mhsa", cfg)
    elif kind == "quadratic":
        run = lambda: reference_attention(q, k, v, "scc-kernel-quadratic", cfg)
    else:
        raise ValueError(f"measure_latency: unknown kind {kind!r}")

    for _ in range(2):
        run()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        run()
        times.append(time.perf_counter_ns() - t0)
    return float(np.median(times))


def fit_scaling(samples: list[tuple[int, float]]) -> float:
    """Least-squares slope of log(flops or time) against log(N)."""
    if len(samples) < 4:
        raise ValueError(f"fit_scaling: need >= 4 samples, got {len(samples)}")
    ns = np.array([s[0] for s in samples], dtype=np.float64)
    if np.any(np.diff(ns) <= 0):
        raise ValueError("fit_scaling: N values must be strictly increasing")
    if ns[-1] / ns[0] < 16:
        raise ValueError("fit_scaling: N range must span at least 16x")
    ys = np.array([s[1] for s in samples], dtype=np.float64)
    slope, _ = np.polyfit(np.log(ns), np.log(ys), 1)
    return float(slope)


@dataclass
class ScalingReport:
    channels: int
    sizes: list[int]
    flops: dict[str, list[int]]
    latency_ns: dict[str, list[float]]
    slopes: dict[str, float]

    def as_csv(self) -> str:
        lines = ["kind,N,flops,macs,latency_ns"]
        for kind in self.flops:
            for n, fl, lt in zip(self.sizes, self.flops[kind], self.latency_ns[kind]):
                lines.append(f"{kind},{n},{fl},{fl // 2},{lt:.0f}")
        return "\n".join(lines) + "\n"

    def as_text(self) -> str:
        out = [f"attention scaling at C={self.channels}",
               f"{'kind':<12}{'N':>8}{'flops':>16}{'MACs':>16}{'latency(ms)':>14}"]
        for kind in self.flops:
            for n, fl, lt in zip(self.sizes, self.flops[kind], self.latency_ns[kind]):
                out.append(f"{kind:<12}{n:>8}{fl:>16}{fl // 2:>16}{lt / 1e6:>14.3f}")
        out += [f"log-log flop slope [{k}] = {s:.4f}" for k, s in self.slopes.items()]
        return "\n".join(out) + "\n"


def run_scaling(sizes: list[int] | None = None, channels: int = 64,
                cfg: AttentionConfig | None = None, repeats: int = 7,
                measure: bool = True) -> ScalingReport:
    """Count and (optionally) time both attention kinds across token counts."""
    sizes = sizes or [256, 1024, 4096, 16384]
    cfg = cfg or AttentionConfig()
    flops = {"essa": [], "mhsa": []}
    lat = {"essa": [], "mhsa": []}
    for n in sizes:
        flops["essa"].append(count_flops("essa", n, channels, cfg))
        flops["mhsa"].append(count_flops("mhsa", n, channels, cfg))
        if measure:
            lat["essa"].append(measure_latency("essa", n, channels, repeats, cfg=cfg))
            if n <= 4096:
                lat["mhsa"].append(measure_latency("quadratic", n, channels, repeats, cfg=cfg))
            else:
                lat["mhsa"].append(float("nan"))
        else:
            lat["essa"].append(float("nan"))
            lat["mhsa"].append(float("nan"))
    slopes = {k: fit_scaling(list(zip(sizes, v))) for k, v in flops.items()}
    return ScalingReport(channels=channels, sizes=list(sizes), flops=flops,
                         latency_ns=lat, slopes=slopes)
