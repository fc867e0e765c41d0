import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gbaseg.errors import DegenerateInputError, EmptyMaskWarning, InvalidArgumentError, NumericalDivergenceError
from gbaseg.volumes import (
    Mask,
    PointSpreadFunction,
    Volume,
    WeightMask,
    brain_center,
    brain_center_crop,
    build_weight_mask,
    convolve_psf,
    crop_xy,
    normalize_unit,
    resample,
    tumor_slices,
    van_cittert_deconvolve,
)

from oracles import trilinear_resample


def test_type_invariants():
    with pytest.raises(InvalidArgumentError):
        Volume(np.zeros((2, 2)))
    with pytest.raises(InvalidArgumentError):
        Volume(np.zeros((2, 2, 2)), (1, 0, 1))
    with pytest.raises(InvalidArgumentError):
        Mask(np.full((2, 2, 2), 2))
    with pytest.raises(InvalidArgumentError):
        WeightMask(np.full((2, 2, 2), 1.5))
    assert Mask(np.ones((2, 2, 2), bool)).data.dtype == np.uint8


def test_resample_identity_and_shape():
    rng = np.random.default_rng(0)
    v = Volume(rng.random((8, 9, 5)), (0.6, 0.6, 1.0))
    out = resample(v, (0.6, 0.6, 1.0))
    assert np.array_equal(out.data, v.data)
    big = Volume(np.zeros((256, 256, 256), np.float32), (0.4, 0.4, 1.0))
    # extent arithmetic: 256 * 0.4 / 0.6 = 170.67 -> 171
    expected = tuple(int(round(n * s / t)) for n, s, t in zip(big.shape, big.spacing, (0.6, 0.6, 1.0)))
    out = resample(big, (0.6, 0.6, 1.0))
    assert out.shape == expected == (171, 171, 256)
    assert out.spacing == (0.6, 0.6, 1.0)


def test_resample_errors():
    v = Volume(np.zeros((3, 3, 3)))
    with pytest.raises(InvalidArgumentError):
        resample(v, (1, -1, 1))
    with pytest.raises(InvalidArgumentError):
        resample(Mask(np.zeros((3, 3, 3))), (0.5, 0.5, 0.5), "trilinear")


@settings(max_examples=25, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(2, 5), st.integers(2, 5), st.integers(2, 4)), elements=st.floats(0, 1)),
    st.tuples(*[st.sampled_from([0.5, 0.8, 1.0, 1.3, 2.0])] * 3),
    st.tuples(*[st.sampled_from([0.4, 0.7, 1.0, 1.5])] * 3),
)
def test_resample_matches_loop_oracle(data, spacing, target):
    out = resample(Volume(data, spacing), target)
    ref = trilinear_resample(data, spacing, target)
    assert out.shape == ref.shape
    assert np.allclose(out.data, ref, atol=1e-9)
    # physical extent preserved within one output voxel
    for n_in, s, n_out, t in zip(data.shape, spacing, out.shape, target):
        assert abs(n_in * s - n_out * t) <= t / 2 + 1e-9


@settings(max_examples=25, deadline=None)
@given(st.floats(-5, 5), st.tuples(*[st.floats(0.3, 3.0)] * 3))
def test_resample_constant(c, target):
    out = resample(Volume(np.full((6, 5, 4), c)), target)
    assert np.allclose(out.data, c, atol=1e-12)


def test_resample_idempotent():
    rng = np.random.default_rng(1)
    v = resample(Volume(rng.random((10, 10, 6)), (1.0, 1.0, 2.0)), (0.7, 0.7, 1.5))
    again = resample(v, (0.7, 0.7, 1.5))
    assert np.allclose(again.data, v.data, atol=1e-6)


def test_resample_mask_nearest_stays_binary():
    m = np.zeros((10, 10, 4), np.uint8)
    m[3:7, 3:7, 1:3] = 1
    out = resample(Mask(m, (1, 1, 2)), (0.5, 0.5, 1.0), "nearest")
    assert isinstance(out, Mask) and set(np.unique(out.data)) <= {0, 1}


def test_brain_center_cube():
    d = np.zeros((220, 220, 20))
    d[100:110, 150:160, 5:15] = 1.0
    cx, cy = brain_center(Volume(d))
    xs, ys, _ = np.nonzero(d > np.percentile(d, 75))
    assert (cx, cy) == (pytest.approx(104.5), pytest.approx(154.5))
    assert (cx, cy) == (pytest.approx(xs.mean()), pytest.approx(ys.mean()))


def test_brain_center_symmetric_and_degenerate():
    x = np.arange(31) - 15
    field = np.exp(-(x[:, None, None] ** 2 + x[None, :, None] ** 2) / 50.0) * np.ones((1, 1, 3))
    assert brain_center(Volume(field)) == (pytest.approx(15.0), pytest.approx(15.0))
    with pytest.raises(DegenerateInputError):
        brain_center(Volume(np.zeros((4, 4, 4))))


def test_crop_pads_and_shifts_origin():
    v = Volume(np.arange(5 * 5 * 2, dtype=float).reshape(5, 5, 2) + 1, (0.5, 0.5, 1.0))
    out = crop_xy(v, (2.0, 2.0), 9)
    assert out.shape == (9, 9, 2)
    assert out.data.sum() == v.data.sum()
    assert out.origin[:2] == (-1.0, -1.0)  # start index -2 at 0.5 mm
    cropped, center = brain_center_crop(v, 3)
    assert cropped.shape == (3, 3, 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 9), st.integers(3, 9), st.integers(1, 12), st.floats(-3, 12), st.floats(-3, 12))
def test_crop_matches_loop(nx, ny, size, cx, cy):
    rng = np.random.default_rng(nx * 100 + ny)
    d = rng.random((nx, ny, 2))
    out = crop_xy(Volume(d), (cx, cy), size).data
    sx = int(np.floor(cx - (size - 1) / 2 + 0.5))
    sy = int(np.floor(cy - (size - 1) / 2 + 0.5))
    for i in range(size):
        for j in range(size):
            u, v = sx + i, sy + j
            ref = d[u, v] if 0 <= u < nx and 0 <= v < ny else 0.0
            assert np.array_equal(out[i, j], ref if np.ndim(ref) else np.zeros(2))


def test_normalize_examples():
    v = Volume(np.array([2.0, 4.0, 6.0]).reshape(3, 1, 1))
    assert np.allclose(normalize_unit(v).data.ravel(), [0, 0.5, 1])
    u = Volume(np.linspace(0, 1, 27).reshape(3, 3, 3))
    assert np.allclose(normalize_unit(u).data, u.data, atol=1e-12)
    with pytest.raises(DegenerateInputError):
        normalize_unit(Volume(np.ones((2, 2, 2))))


def test_normalize_exclude_background():
    rng = np.random.default_rng(3)
    d = np.zeros((10, 10, 10))
    fg = rng.random(d.shape) < 0.1
    d[fg] = rng.uniform(2, 5, fg.sum())
    out = normalize_unit(Volume(d), exclude_background=True).data
    lo, hi = d[fg].min(), d[fg].max()
    assert out[fg].min() == pytest.approx(0.0)
    assert out[fg].max() == pytest.approx(1.0)
    assert np.allclose(out[~fg], (0 - lo) / (hi - lo))


def test_psf_kernel():
    psf = PointSpreadFunction((1.0, 1.0, 2.5))
    k = psf.kernel((1.0, 1.0, 1.0))
    assert abs(k.sum() - 1) < 1e-6
    assert np.allclose(k, k[::-1, ::-1, ::-1])


def test_convolve_identity_constant_and_impulse():
    rng = np.random.default_rng(4)
    v = Volume(rng.random((6, 6, 6)))
    assert np.array_equal(convolve_psf(v, PointSpreadFunction((0, 0, 0))).data, v.data)
    c = Volume(np.full((7, 7, 7), 0.3))
    assert np.allclose(convolve_psf(c, PointSpreadFunction()).data, 0.3)
    d = np.zeros((21, 21, 31))
    d[10, 10, 15] = 1.0
    sp = (1.0, 1.0, 1.0)
    out = convolve_psf(Volume(d, sp), PointSpreadFunction((1.0, 1.0, 2.5))).data
    x = np.arange(21) - 10
    z = np.arange(31) - 15
    # sampled Gaussian on the truncated support (4 standard deviations)
    gx = np.exp(-0.5 * x**2) * (abs(x) <= 4)
    gz = np.exp(-0.5 * (z / 2.5) ** 2) * (abs(z) <= 10)
    ref = gx[:, None, None] * gx[None, :, None] * gz[None, None, :]
    ref /= ref.sum()
    assert np.allclose(out, ref, atol=1e-6)
    assert out.sum() == pytest.approx(1.0, rel=1e-4)


def test_van_cittert_trivia():
    rng = np.random.default_rng(5)
    v = Volume(rng.random((8, 8, 8)))
    assert np.array_equal(van_cittert_deconvolve(v, PointSpreadFunction(), 0).data, v.data)
    assert np.allclose(van_cittert_deconvolve(v, PointSpreadFunction((0, 0, 0)), 10).data, v.data)
    assert np.array_equal(van_cittert_deconvolve(v, PointSpreadFunction(), 9, relaxation=0.0).data, v.data)
    with pytest.raises(InvalidArgumentError):
        van_cittert_deconvolve(v, PointSpreadFunction(), -1)


def test_van_cittert_step_edge():
    d = np.zeros((24, 24, 24))
    d[:, :, 12:] = 1.0
    d[8:16, 8:16, :] += 0.5
    truth = Volume(d)
    psf = PointSpreadFunction((1.0, 1.0, 2.5))
    blurred = convolve_psf(truth, psf)
    restored = van_cittert_deconvolve(blurred, psf, 15)
    rmse = lambda a: np.sqrt(np.mean((a - d) ** 2))  # noqa: E731
    assert rmse(restored.data) < rmse(blurred.data)
    assert restored.data.min() >= 0


def test_van_cittert_divergence_guard(monkeypatch):
    # the nonnegativity clamp keeps a real Gaussian PSF bounded, so swap in an expanding operator
    import gbaseg.volumes as volumes

    monkeypatch.setattr(volumes, "convolve_psf", lambda vol, psf: vol.with_data(-3.0 * vol.data))
    v = Volume(np.random.default_rng(6).random((10, 10, 10)))
    with pytest.raises(NumericalDivergenceError):
        volumes.van_cittert_deconvolve(v, PointSpreadFunction(), 50)


def test_weight_mask_examples():
    m = np.zeros((9, 9, 3), np.uint8)
    m[3:6, 3:6, 1] = 1
    w = build_weight_mask(Mask(m), 0, 0)
    assert np.array_equal(w.data, m.astype(float))
    full = np.ones((5, 5, 2), np.uint8)
    assert np.allclose(build_weight_mask(Mask(full), 3, 2.0).data, 1.0)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        e = build_weight_mask(Mask(np.zeros((4, 4, 2))))
    assert e.empty and not e.data.any() and any(issubclass(r.category, EmptyMaskWarning) for r in rec)


def test_weight_mask_single_voxel_oracle():
    n = 15
    m = np.zeros((n, n, 1), np.uint8)
    m[7, 7, 0] = 1
    w = build_weight_mask(Mask(m), 2, 1.0).data[:, :, 0]
    # oracle: disk of radius 2, then discrete Gaussian (truncate 4) with reflect, per slice
    disk = np.array([[1.0 if (i - 7) ** 2 + (j - 7) ** 2 <= 4 else 0.0 for j in range(n)] for i in range(n)])
    r = 4
    g = np.exp(-0.5 * np.arange(-r, r + 1) ** 2)
    g /= g.sum()
    tmp = np.zeros_like(disk)
    ref = np.zeros_like(disk)
    for i in range(n):
        for j in range(n):
            tmp[i, j] = sum(g[k + r] * disk[min(max(i + k, 0), n - 1), j] for k in range(-r, r + 1))
    for i in range(n):
        for j in range(n):
            ref[i, j] = sum(g[k + r] * tmp[i, min(max(j + k, 0), n - 1)] for k in range(-r, r + 1))
    ref[7, 7] = 1.0
    assert np.allclose(w, ref, atol=1e-12)
    # radially non-increasing along the axes away from the peak
    assert w[7, 7] == 1.0
    assert np.all(np.diff(w[7, 7:]) <= 1e-15) and np.all(np.diff(w[7:, 7]) <= 1e-15)


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.uint8, st.tuples(st.integers(3, 10), st.integers(3, 10), st.integers(1, 4)), elements=st.integers(0, 1)),
    st.integers(0, 4),
    st.floats(0, 3),
)
def test_weight_mask_is_one_on_mask(m, radius, sigma):
    if not m.any():
        return
    w = build_weight_mask(Mask(m), radius, sigma).data
    assert np.all(w[m == 1] == 1.0)
    assert w.min() >= 0 and w.max() <= 1


def test_tumor_slices():
    m = np.zeros((4, 4, 6), np.uint8)
    m[1, 1, 2] = m[0, 3, 4] = 1
    assert list(tumor_slices(Mask(m))) == [2, 4]


def test_metadata_preserved():
    v = Volume(np.random.default_rng(0).random((5, 5, 5)), (0.5, 0.6, 2.0), (1.0, 2.0, 3.0))
    for out in (normalize_unit(v), convolve_psf(v, PointSpreadFunction()), van_cittert_deconvolve(v, PointSpreadFunction(), 2)):
        assert out.spacing == v.spacing and out.origin == v.origin
