"""Cube container and HSI1 file format, bicubic resampling, pair tiling,
and the seeded synthetic generator.
"""

import numpy as np
import pytest

from hsisr.data import (
    CorruptFileError,
    HsiCube,
    SynthSpec,
    bicubic_resize,
    bicubic_weights,
    make_pairs,
    read_cube,
    synthesize,
    write_cube,
)


def rand_cube(rng, c=3, h=8, w=8):
    return HsiCube(rng.uniform(0, 1, (c, h, w)).astype(np.float32))


# -- container ----------------------------------------------------------------


def test_cube_shape_and_finiteness_checked():
    with pytest.raises(ValueError):
        HsiCube(np.zeros((4, 4)))
    bad = np.zeros((1, 2, 2))
    bad[0, 0, 0] = np.inf
    with pytest.raises(ValueError):
        HsiCube(bad)


def test_cube_io_roundtrip(tmp_path):
    cube = rand_cube(np.random.default_rng(0))
    p = tmp_path / "c.hsi1"
    write_cube(cube, p)
    back = read_cube(p)
    assert np.array_equal(back.values, cube.values)


def test_cube_io_single_voxel_layout(tmp_path):
    cube = HsiCube(np.array([[[0.5]]], dtype=np.float32))
    p = tmp_path / "one.hsi1"
    write_cube(cube, p)
    raw = p.read_bytes()
    assert len(raw) == 17 + 4  # header + one f32
    assert raw[:4] == b"HSI1"
    assert np.frombuffer(raw[17:], dtype="<f4")[0] == np.float32(0.5)


def test_cube_io_rejects_corruption(tmp_path):
    cube = rand_cube(np.random.default_rng(1))
    p = tmp_path / "c.hsi1"
    write_cube(cube, p)
    raw = p.read_bytes()
    (tmp_path / "magic.hsi1").write_bytes(b"HSIX" + raw[4:])
    with pytest.raises(CorruptFileError):
        read_cube(tmp_path / "magic.hsi1")
    (tmp_path / "short.hsi1").write_bytes(raw[:-5])
    with pytest.raises(CorruptFileError):
        read_cube(tmp_path / "short.hsi1")
    (tmp_path / "long.hsi1").write_bytes(raw + b"\x00\x00")
    with pytest.raises(CorruptFileError):
        read_cube(tmp_path / "long.hsi1")


# -- bicubic ------------------------------------------------------------------


def test_bicubic_factor1_identity():
    cube = rand_cube(np.random.default_rng(2), c=2, h=6, w=7)
    out = bicubic_resize(cube, 1.0)
    assert np.allclose(out.values, cube.values, atol=1e-6)


def test_bicubic_constant_preserved():
    cube = HsiCube(np.full((2, 6, 6), 0.37, dtype=np.float32))
    for factor in (2.0, 0.5, 4.0):
        out = bicubic_resize(cube, factor)
        assert np.allclose(out.values, 0.37, atol=1e-6)


def _catmull_rom(t):
    """Independent a = -0.5 kernel evaluation for the weight oracle."""
    t = abs(t)
    if t <= 1:
        return 1.5 * t ** 3 - 2.5 * t ** 2 + 1.0
    if t < 2:
        return -0.5 * t ** 3 + 2.5 * t ** 2 - 4.0 * t + 2.0
    return 0.0


def test_bicubic_weights_partition_of_unity():
    rng = np.random.default_rng(3)
    for _ in range(50):
        phase = float(rng.uniform(0, 1))
        w = bicubic_weights(phase)
        assert abs(w.sum() - 1.0) <= 1e-6
        want = [_catmull_rom(off - phase) for off in (-1.0, 0.0, 1.0, 2.0)]
        assert np.allclose(w, want, atol=1e-12)


def test_bicubic_ramp_interior_oracle():
    ramp = np.arange(4.0, dtype=np.float64)[None, None, :] / 3.0
    cube = HsiCube(np.repeat(ramp, 4, axis=1))
    out = bicubic_resize(cube, 2.0).values[0, 4]
    # interior output columns 3..4 depend on no clamped taps
    for j in (3, 4):
        src = (j + 0.5) / 2.0 - 0.5
        base = int(np.floor(src))
        phase = src - base
        want = sum(_catmull_rom(off - phase) * ramp[0, 0, base + off]
                   for off in (-1, 0, 1, 2))
        assert abs(out[j] - want) <= 1e-12


def test_bicubic_rejects_degenerate_output():
    cube = rand_cube(np.random.default_rng(4), c=1, h=4, w=4)
    with pytest.raises(ValueError):
        bicubic_resize(cube, 0.1)


# -- pair tiling ---------------------------------------------------------------


def test_make_pairs_tiling_counts():
    cube = rand_cube(np.random.default_rng(5), c=2, h=64, w=64)
    pairs = make_pairs([cube], 2, 32)
    assert len(pairs.train) + len(pairs.test) == 4


def test_make_pairs_lr_shape():
    cube = rand_cube(np.random.default_rng(6), c=2, h=64, w=64)
    pairs = make_pairs([cube], 2, 32)
    for lr, hr in pairs.train + pairs.test:
        assert (hr.height, hr.width) == (32, 32)
        assert (lr.height, lr.width) == (16, 16)
        assert lr.bands == hr.bands == 2


def test_make_pairs_every_fourth_is_test():
    cube = rand_cube(np.random.default_rng(7), c=1, h=32, w=64)
    pairs = make_pairs([cube], 2, 16)  # 2 x 4 = 8 patches
    assert len(pairs.test) == 2
    assert len(pairs.train) == 6


@pytest.mark.parametrize("s", [2, 4, 8])
def test_make_pairs_dimensional_invariant(s):
    cube = rand_cube(np.random.default_rng(s), c=2, h=32, w=32)
    pairs = make_pairs([cube], s, 32)
    pairs.validate()
    lr, hr = (pairs.train + pairs.test)[0]
    assert hr.height == s * lr.height and hr.width == s * lr.width


def test_make_pairs_patch_too_large():
    cube = rand_cube(np.random.default_rng(9), c=1, h=16, w=16)
    with pytest.raises(ValueError):
        make_pairs([cube], 2, 32)


def test_make_pairs_patch_scale_divisibility():
    cube = rand_cube(np.random.default_rng(10), c=1, h=32, w=32)
    with pytest.raises(ValueError):
        make_pairs([cube], 4, 18)


# -- synthetic generator ---------------------------------------------------------


def test_synthesize_deterministic():
    a = synthesize(SynthSpec(seed=3))
    b = synthesize(SynthSpec(seed=3))
    assert np.array_equal(a.values, b.values)
    c = synthesize(SynthSpec(seed=4))
    assert not np.array_equal(a.values, c.values)


def test_synthesize_range_and_dims():
    cube = synthesize(SynthSpec(seed=5, bands=7, height=24, width=20))
    assert cube.values.shape == (7, 24, 20)
    assert cube.values.min() >= 0.0 and cube.values.max() <= 1.0


def test_synthesize_single_endmember_flat_spectrum_field():
    cube = synthesize(SynthSpec(seed=6, endmembers=1, bands=9, height=12, width=12))
    v = cube.values
    # abundance is identically 1, so every pixel carries the same spectrum
    spread = v.max(axis=(1, 2)) - v.min(axis=(1, 2))
    assert np.all(spread <= 1e-6)


def test_synthesize_adjacent_band_correlation():
    cube = synthesize(SynthSpec()).values.astype(np.float64)
    cors = []
    for b in range(cube.shape[0] - 1):
        a = cube[b].ravel()
        c = cube[b + 1].ravel()
        a = a - a.mean()
        c = c - c.mean()
        cors.append(float(a @ c / (np.linalg.norm(a) * np.linalg.norm(c) + 1e-12)))
    mean_cor = float(np.mean(cors))
    assert mean_cor > 0.9
    assert abs(mean_cor - 0.9710442691227797) <= 1e-6  # pinned regression value


def test_synth_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(endmembers=0)
    with pytest.raises(ValueError):
        SynthSpec(spectral_smoothness=0.0)
    with pytest.raises(ValueError):
        SynthSpec(min_cycles=9.0, max_cycles=8.0)
    with pytest.raises(ValueError):
        SynthSpec(contrast=0.0)
