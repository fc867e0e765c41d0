import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from gbaseg.errors import InvalidArgumentError
from gbaseg.singan import (
    HarmonizationRequest,
    SinGANConfig,
    SinGANModel,
    build_scale_schedule,
    default_ratio,
    generator_params,
    harmonize,
    init_singan,
    resize_bilinear,
    train_singan,
)
from oracles import scale_schedule


def test_schedule_paper_scale():
    s = build_scale_schedule((256, 256), 0.8647)
    assert s.K == 16
    assert 25 <= min(s.sizes[-1]) <= 29
    assert s.sizes[0] == (256, 256)


def test_default_ratio_reaches_floor_in_sixteen_steps():
    r = default_ratio()
    assert r == pytest.approx(0.8647, abs=1e-4)
    s = build_scale_schedule((256, 256), r)
    assert s.K == 16 and s.sizes[-1] == (25, 25)


def test_schedule_halving():
    s = build_scale_schedule((50, 50), 0.5)
    assert s.K == 1 and s.sizes == [(50, 50), (25, 25)]


def test_schedule_matches_loop_oracle_r075():
    K, sides = scale_schedule(256, 0.75)
    s = build_scale_schedule((256, 256), 0.75)
    assert s.K == K and [h for h, _ in s.sizes] == sides


@settings(max_examples=100, deadline=None)
@given(size=st.integers(26, 512), r=st.floats(0.5, 0.95))
def test_schedule_matches_loop_oracle(size, r):
    K, sides = scale_schedule(size, r)
    s = build_scale_schedule((size, size), r)
    assert s.K == K
    assert [h for h, _ in s.sizes] == sides


def test_schedule_errors():
    with pytest.raises(InvalidArgumentError):
        build_scale_schedule((20, 64), 0.8)
    for r in (0.0, 1.0, 1.5):
        with pytest.raises(InvalidArgumentError):
            build_scale_schedule((64, 64), r)


@settings(max_examples=40, deadline=None)
@given(
    h=st.integers(8, 64), w=st.integers(8, 64), oh=st.integers(4, 64), ow=st.integers(4, 64),
    c=st.floats(-1, 1, allow_nan=False),
)
def test_resize_constant_roundtrip_exact(h, w, oh, ow, c):
    x = torch.full((1, 1, h, w), c, dtype=torch.float32)
    back = resize_bilinear(resize_bilinear(x, (oh, ow)), (h, w))
    assert torch.equal(back, x)


@pytest.mark.parametrize("size", [(20, 20), (13, 27), (64, 48), (90, 90)])
def test_resize_matches_torch_interpolate(size):
    x = torch.rand(1, 1, 40, 40, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    ref = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    assert torch.allclose(resize_bilinear(x, size), ref, atol=1e-12)


def _slice(n=32):
    yy, xx = np.mgrid[:n, :n] / n
    return 0.5 + 0.3 * np.sin(6 * xx) * np.cos(4 * yy)


CFG = SinGANConfig(r=0.75, steps_per_scale=0, nfc=4, seed=0)


def test_zero_steps_is_initialization():
    m = train_singan(_slice(), CFG)
    ref = init_singan((32, 32), CFG)
    assert m.K == ref.K >= 1 and m.schedule.sizes == ref.schedule.sizes
    # finer scales warm-start from the coarser one, so with no steps every
    # scale carries the coarsest scale's initial weights
    coarsest = generator_params(ref, ref.K)
    for k in range(m.K + 1):
        assert all(np.array_equal(a, b) for a, b in zip(generator_params(m, k), coarsest))


def test_harmonize_shape_range_and_k_errors():
    m = init_singan((32, 32), CFG)
    x = np.random.default_rng(0).random((32, 32))
    for k in range(m.K + 1):
        out = harmonize(m, x, k)
        assert out.shape == x.shape
        assert np.all(np.isfinite(out)) and out.min() >= 0 and out.max() <= 1
    assert np.array_equal(harmonize(m, HarmonizationRequest(x, 1)), harmonize(m, x, 1))
    with pytest.raises(InvalidArgumentError):
        harmonize(m, x, m.K + 1)
    with pytest.raises(InvalidArgumentError):
        harmonize(m, x, -1)
    with pytest.raises(InvalidArgumentError):
        harmonize(m, np.zeros((30, 32)), 0)


def test_harmonize_k0_is_single_generator():
    m = init_singan((32, 32), CFG)
    x = np.random.default_rng(1).random((32, 32))
    t = torch.as_tensor(x, dtype=torch.float32)[None, None] * 2 - 1
    with torch.no_grad():
        g0 = m.generators[0](torch.zeros_like(t), t)
    assert np.allclose(harmonize(m, x, 0), ((g0[0, 0].clamp(-1, 1) + 1) / 2).numpy(), atol=1e-7)


def test_training_deterministic_and_frozen_scales(tmp_path):
    cfg = SinGANConfig(r=0.75, steps_per_scale=3, nfc=4, seed=1)
    snapshots = {}

    def on_done(k, model):
        snapshots[k] = [generator_params(model, j) for j in range(k, model.K + 1)]

    a = train_singan(_slice(), cfg, on_scale_done=on_done)
    b = train_singan(_slice(), cfg)
    assert a.checksum() == b.checksum()
    c = train_singan(_slice(), SinGANConfig(r=0.75, steps_per_scale=3, nfc=4, seed=2))
    assert a.checksum() != c.checksum()
    # every scale's parameters are untouched once it is finished
    for k, snap in snapshots.items():
        for j, params in zip(range(k, a.K + 1), snap):
            assert all(np.array_equal(p, q) for p, q in zip(params, generator_params(a, j)))
    assert set(a.history) == set(range(a.K + 1))
    assert all(len(h) == 3 for h in a.history.values())

    back = SinGANModel.load(a.save(tmp_path / "m"))
    assert back.checksum() == a.checksum()
    x = _slice()
    assert np.array_equal(harmonize(back, x, 1), harmonize(a, x, 1))


def test_non_2d_slice():
    with pytest.raises(InvalidArgumentError):
        train_singan(np.zeros((32, 32, 2)), CFG)
