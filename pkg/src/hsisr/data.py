"""Hyperspectral cube container, HSI1 file I/O, bicubic resampling,
patch-pair generation, and a seeded synthetic cube generator.

Synthetic cubes follow a linear mixing model: a few endmember spectra
(each a mixture of two Gaussians over the band index) combined through
per-pixel abundance maps built from low-frequency 2D sinusoids. They stand
in for restricted-access airborne datasets at desk scale.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

__all__ = [
    "HsiCube",
    "PairSet",
    "SynthSpec",
    "CorruptFileError",
    "read_cube",
    "write_cube",
    "bicubic_resize",
    "bicubic_weights",
    "make_pairs",
    "synthesize",
]


class CorruptFileError(ValueError):
    """HSI1 container fails magic, header, or length validation."""


@dataclass
class HsiCube:
    """Hyperspectral image: values (c, h, w) expected in [0, 1]."""

    values: np.ndarray  # (bands, height, width) float32 or float64

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ValueError(f"HsiCube values must be (c, h, w), got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("HsiCube values must be finite")
        self.values = np.ascontiguousarray(v)

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def tensor(self, dtype=np.float32) -> Tensor:
        return Tensor(self.values, dtype)


@dataclass
class PairSet:
    """Low/high-resolution cube pairs at one consistent scale factor."""

    scale: int
    train: list[tuple[HsiCube, HsiCube]] = field(default_factory=list)
    test: list[tuple[HsiCube, HsiCube]] = field(default_factory=list)

    def validate(self) -> None:
        for split in (self.train, self.test):
            for lr, hr in split:
                if lr.bands != hr.bands:
                    raise ValueError(f"pair band mismatch: {lr.bands} vs {hr.bands}")
                if hr.height != self.scale * lr.height or hr.width != self.scale * lr.width:
                    raise ValueError(
                        f"pair dims {hr.height}x{hr.width} != "
                        f"{self.scale} x {lr.height}x{lr.width}")


@dataclass(frozen=True)
class SynthSpec:
    """Seeded generator settings for one synthetic cube."""

    seed: int = 0
    endmembers: int = 4
    bands: int = 31
    height: int = 64
    width: int = 64
    spectral_smoothness: float = 4.0  # Gaussian width in band-index units
    spatial_freqs: int = 6            # sinusoid count per abundance map
    min_cycles: float = 0.0           # lowest sinusoid frequency, cycles per image
    max_cycles: float = 8.0           # highest sinusoid frequency, cycles per image
    contrast: float = 0.9             # peak abundance deviation from uniform, in (0, 1]

    def __post_init__(self):
        if self.endmembers < 1:
            raise ValueError("endmembers must be >= 1")
        if self.spectral_smoothness <= 0 or self.max_cycles <= 0:
            raise ValueError("widths and frequencies must be > 0")
        if not 0.0 <= self.min_cycles <= self.max_cycles:
            raise ValueError("need 0 <= min_cycles <= max_cycles")
        if not 0.0 < self.contrast <= 1.0:
            raise ValueError("contrast must be in (0, 1]")


# -- HSI1 container --------------------------------------------------------------

_HSI_MAGIC = b"HSI1"
_HSI_DTYPE_CODE = 1  # f32 little-endian planes


def write_cube(cube: HsiCube, path) -> None:
    v = cube.values.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_HSI_MAGIC)
        fh.write(struct.pack("<III", cube.height, cube.width, cube.bands))
        fh.write(struct.pack("<B", _HSI_DTYPE_CODE))
        fh.write(v.tobytes())  # band-major planes


def read_cube(path) -> HsiCube:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _HSI_MAGIC:
        raise CorruptFileError(f"{path}: bad magic, not an HSI1 file")
    if len(buf) < 17:
        raise CorruptFileError(f"{path}: truncated header")
    h, w, c = struct.unpack_from("<III", buf, 4)
    (code,) = struct.unpack_from("<B", buf, 16)
    if code != _HSI_DTYPE_CODE:
        raise CorruptFileError(f"{path}: unknown dtype code {code}")
    expect = 17 + 4 * h * w * c
    if len(buf) != expect:
        raise CorruptFileError(f"{path}: payload length {len(buf)} != expected {expect}")
    v = np.frombuffer(buf, dtype="<f4", count=h * w * c, offset=17)
    return HsiCube(v.reshape(c, h, w).astype(np.float32))


# -- bicubic resampling ------------------------------------------------------------

_BICUBIC_A = -0.5  # Catmull-Rom family


def _cubic_kernel(t: np.ndarray) -> np.ndarray:
    a = _BICUBIC_A
    t = np.abs(t)
    t2 = t * t
    t3 = t2 * t
    w = np.where(
        t <= 1.0,
        (a + 2.0) * t3 - (a + 3.0) * t2 + 1.0,
        np.where(t < 2.0, a * t3 - 5.0 * a * t2 + 8.0 * a * t - 4.0 * a, 0.0),
    )
    return w


def bicubic_weights(phase: float) -> np.ndarray:
    """The four tap weights for a sampling point at fractional offset ``phase``
    from its floor grid coordinate. They sum to 1 for any phase."""
    offsets = np.array([-1.0, 0.0, 1.0, 2.0]) - phase
    return _cubic_kernel(offsets)


def _resample_axis(v: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = v.shape[axis]
    factor = n_out / n_in
    # half-pixel-centered coordinate mapping
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    base = np.floor(src).astype(int)
    phase = src - base
    taps = base[:, None] + np.array([-1, 0, 1, 2])[None, :]
    taps = np.clip(taps, 0, n_in - 1)  # clamp-to-edge
    wts = _cubic_kernel((np.array([-1.0, 0.0, 1.0, 2.0])[None, :] - phase[:, None]))
    moved = np.moveaxis(v, axis, 0)
    gathered = moved[taps]                      # (n_out, 4, ...)
    out = np.einsum("ot...,ot->o...", gathered, wts)
    return np.moveaxis(out, 0, axis)


def bicubic_resize(cube: HsiCube, factor: float) -> HsiCube:
    """Per-band separable bicubic resize (a = -0.5, edge-clamped)."""
    if factor <= 0:
        raise ValueError(f"factor must be > 0, got {factor}")
    h_out = int(round(cube.height * factor))
    w_out = int(round(cube.width * factor))
    if h_out < 1 or w_out < 1:
        raise ValueError(f"output dims {h_out}x{w_out} < 1 at factor {factor}")
    v = cube.values.astype(np.float64)
    v = _resample_axis(v, h_out, axis=1)
    v = _resample_axis(v, w_out, axis=2)
    return HsiCube(v.astype(cube.values.dtype))


# -- pair generation ------------------------------------------------------------


def make_pairs(cubes, scale: int, patch: int, test_every: int = 4) -> PairSet:
    """Tile non-overlapping HR patches and pair them with bicubic LR copies.

    Every ``test_every``-th patch (by global index) goes to the test split.
    """
    if patch % scale != 0:
        raise ValueError(f"patch {patch} not divisible by scale {scale}")
    pairs = PairSet(scale=scale)
    idx = 0
    for cube in cubes:
        if patch > cube.height or patch > cube.width:
            raise ValueError(
                f"patch {patch} larger than cube {cube.height}x{cube.width}")
        for top in range(0, cube.height - patch + 1, patch):
            for left in range(0, cube.width - patch + 1, patch):
                hr = HsiCube(cube.values[:, top:top + patch, left:left + patch].copy())
                lr = bicubic_resize(hr, 1.0 / scale)
                split = pairs.test if (test_every > 0 and idx % test_every == test_every - 1) \
                    else pairs.train
                split.append((lr, hr))
                idx += 1
    pairs.validate()
    return pairs


# -- synthetic generator ----------------------------------------------------------


def synthesize(spec: SynthSpec) -> HsiCube:
    """Deterministic linear-mixing cube: abundances x endmember spectra."""
    rng = np.random.default_rng(spec.seed)
    bands = np.arange(spec.bands, dtype=np.float64)

    # endmember spectra: mixtures of two Gaussian bumps over band index
    spectra = np.zeros((spec.endmembers, spec.bands))
    for m in range(spec.endmembers):
        for _ in range(2):
            center = rng.uniform(0, spec.bands - 1)
            amp = rng.uniform(0.3, 1.0)
            width = spec.spectral_smoothness * rng.uniform(0.7, 1.4)
            spectra[m] += amp * np.exp(-0.5 * ((bands - center) / width) ** 2)

    # abundance maps: non-negative sums of 2D sinusoids, then pixelwise simplex.
    # Each map is a uniform base plus a band-limited sinusoid mixture scaled to
    # peak deviation `contrast`, so the map stays non-negative by construction.
    yy, xx = np.meshgrid(np.arange(spec.height), np.arange(spec.width), indexing="ij")
    maps = np.zeros((spec.endmembers, spec.height, spec.width))
    for m in range(spec.endmembers):
        acc = np.zeros((spec.height, spec.width))
        for _ in range(spec.spatial_freqs):
            radius = rng.uniform(spec.min_cycles, spec.max_cycles)
            angle = rng.uniform(0, 2 * np.pi)
            fy = radius * np.sin(angle) / spec.height
            fx = radius * np.cos(angle) / spec.width
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.3, 1.0)
            acc += amp * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        acc *= spec.contrast / max(float(np.abs(acc).max()), 1e-12)
        maps[m] = 1.0 + acc
    maps /= maps.sum(axis=0, keepdims=True)

    cube = np.einsum("mc,mhw->chw", spectra, maps)
    lo, hi = cube.min(), cube.max()
    if hi > lo:
        cube = (cube - lo) / (hi - lo)
    return HsiCube(cube.astype(np.float32))
