"""Six fidelity measures between a predicted and a ground-truth cube:
mean per-band PSNR, spectral angle, ERGAS, mean per-band SSIM, RMSE, and
mean per-band Pearson correlation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .data import HsiCube

__all__ = ["MetricReport", "evaluate_metrics", "mean_report", "CSV_HEADER"]

_EPS = 1e-12
_PSNR_CAP = 100.0
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_L = 1.0

CSV_HEADER = "mpsnr,sam,ergas,mssim,rmse,cc,scale,ergas_bands_skipped"


@dataclass
class MetricReport:
    mpsnr: float
    sam: float
    ergas: float
    mssim: float
    rmse: float
    cc: float
    scale: int
    ergas_bands_skipped: int = 0

    def as_text(self) -> str:
        return "\n".join(f"{f.name}={getattr(self, f.name)}" for f in fields(self))

    def as_csv_row(self) -> str:
        return ",".join(repr(getattr(self, f.name)) for f in fields(self))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _ssim_band(a: np.ndarray, b: np.ndarray) -> float:
    """Single-scale SSIM with a separable Gaussian window, valid region."""
    win = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA)

    def filt(img):
        out = np.apply_along_axis(lambda r: np.convolve(r, win, mode="valid"), 1, img)
        return np.apply_along_axis(lambda c: np.convolve(c, win, mode="valid"), 0, out)

    c1 = (_SSIM_K1 * _SSIM_L) ** 2
    c2 = (_SSIM_K2 * _SSIM_L) ** 2
    mu_a = filt(a)
    mu_b = filt(b)
    mu_a2, mu_b2, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = filt(a * a) - mu_a2
    var_b = filt(b * b) - mu_b2
    cov = filt(a * b) - mu_ab
    num = (2 * mu_ab + c1) * (2 * cov + c2)
    den = (mu_a2 + mu_b2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    ac = a - a.mean()
    bc = b - b.mean()
    sa = math.sqrt(float(ac @ ac))
    sb = math.sqrt(float(bc @ bc))
    if sa <= _EPS and sb <= _EPS:
        return 1.0 if abs(a.mean() - b.mean()) <= _EPS else 0.0
    return float(ac @ bc) / (sa * sb + _EPS)


def evaluate_metrics(pred: HsiCube, gt: HsiCube, scale: int) -> MetricReport:
    """All six measures on one (prediction, ground truth) pair.

    Values are clamped to [0, 1] on an internal copy; the PSNR peak is 1.
    Bands whose ground-truth mean is ~0 are excluded from ERGAS and counted
    in ``ergas_bands_skipped``.
    """
    if pred.values.shape != gt.values.shape:
        raise ValueError(f"dim mismatch: pred {pred.values.shape} vs gt {gt.values.shape}")
    p = np.clip(pred.values.astype(np.float64), 0.0, 1.0)
    g = np.clip(gt.values.astype(np.float64), 0.0, 1.0)
    c = p.shape[0]
    if pred.height < _SSIM_WINDOW or pred.width < _SSIM_WINDOW:
        raise ValueError(
            f"cube {pred.height}x{pred.width} smaller than the SSIM window "
            f"{_SSIM_WINDOW}")

    # MPSNR: per-band PSNR (peak 1, capped) averaged over bands
    mse_b = np.mean((p - g) ** 2, axis=(1, 2))
    psnr_b = np.where(mse_b > 0, 10.0 * np.log10(1.0 / np.maximum(mse_b, _EPS)), _PSNR_CAP)
    psnr_b = np.minimum(psnr_b, _PSNR_CAP)
    mpsnr = float(np.mean(psnr_b))

    # SAM: mean spectral angle over pixels, degrees
    pv = p.reshape(c, -1)
    gv = g.reshape(c, -1)
    dots = np.sum(pv * gv, axis=0)
    norms = np.linalg.norm(pv, axis=0) * np.linalg.norm(gv, axis=0)
    cosang = np.clip(dots / (norms + _EPS), -1.0, 1.0)
    sam = float(np.degrees(np.mean(np.arccos(cosang))))

    # ERGAS
    mu_b = np.mean(gv, axis=1)
    rmse_b = np.sqrt(mse_b)
    keep = mu_b > _EPS
    skipped = int(np.sum(~keep))
    if np.any(keep):
        ergas = (100.0 / scale) * math.sqrt(float(np.mean((rmse_b[keep] / mu_b[keep]) ** 2)))
    else:
        ergas = 0.0

    mssim = float(np.mean([_ssim_band(p[b], g[b]) for b in range(c)]))
    rmse = float(np.sqrt(np.mean((p - g) ** 2)))
    cc = float(np.mean([_pearson(pv[b], gv[b]) for b in range(c)]))

    return MetricReport(mpsnr=mpsnr, sam=sam, ergas=ergas, mssim=mssim,
                        rmse=rmse, cc=cc, scale=scale, ergas_bands_skipped=skipped)


def mean_report(reports: list[MetricReport]) -> MetricReport:
    if not reports:
        raise ValueError("mean_report: empty report list")
    return MetricReport(
        mpsnr=float(np.mean([r.mpsnr for r in reports])),
        sam=float(np.mean([r.sam for r in reports])),
        ergas=float(np.mean([r.ergas for r in reports])),
        mssim=float(np.mean([r.mssim for r in reports])),
        rmse=float(np.mean([r.rmse for r in reports])),
        cc=float(np.mean([r.cc for r in reports])),
        scale=reports[0].scale,
        ergas_bands_skipped=sum(r.ergas_bands_skipped for r in reports),
    )
