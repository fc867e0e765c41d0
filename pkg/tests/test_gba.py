import json

import numpy as np
import pytest

from gbaseg.errors import ConfigError, EmptyMaskWarning, InvalidArgumentError
from gbaseg.gba import (
    PolicyRule,
    Provenance,
    apply_policy,
    default_rules,
    gba_augment,
    harmonized_volume,
    load_rules,
    naive_augment,
    reconstruct_augmentation,
    rescale_tumor,
)
from gbaseg.io import checksum_array
from gbaseg.metrics import TumorStats, tumor_stats
from gbaseg.phantom import PhantomParams, make_case
from gbaseg.singan import SinGANConfig, init_singan
from gbaseg.volumes import Mask, Volume, WeightMask, build_weight_mask

SHAPE = (40, 40, 12)
MODEL = init_singan(SHAPE[:2], SinGANConfig(r=0.8, steps_per_scale=0, nfc=4, seed=0))


def _case(seed):
    c = make_case(PhantomParams(shape=SHAPE, seed=seed))
    return c.as_case("target")


def identity_suite(n_cases=50, seed0=1000):
    """Blending identities on randomized phantoms; returns the number of cases where each holds."""
    rng = np.random.default_rng(seed0)
    ok = dict.fromkeys(["lambda_one", "weight_zero", "weight_one", "convex", "non_tumor_slices", "zero_weight_voxels"], 0)
    for i in range(n_cases):
        case = _case(seed0 + i)
        vol, mask = case.image, case.mask
        lam = float(rng.choice([0.6, 0.7, 0.8, 1.2, 1.5]))
        k = int(rng.integers(0, MODEL.K + 1))
        ok["lambda_one"] += np.array_equal(rescale_tumor(vol, mask, 1.0).data, vol.data)
        x_lam = rescale_tumor(vol, mask, lam)
        psi = harmonized_volume(x_lam, mask, k, MODEL)
        zeros = WeightMask(np.zeros(vol.shape))
        ok["weight_zero"] += np.array_equal(gba_augment(vol, mask, lam, k, MODEL, zeros).data, x_lam.data)
        slices = np.zeros(vol.shape)
        slices[:, :, mask.data.any((0, 1))] = 1.0
        ones = gba_augment(vol, mask, lam, k, MODEL, WeightMask(slices)).data
        on = mask.data.any((0, 1))
        ok["weight_one"] += np.array_equal(ones[:, :, on], psi.data[:, :, on])
        w = build_weight_mask(mask)
        out = gba_augment(vol, mask, lam, k, MODEL).data
        lo, hi = np.minimum(x_lam.data, psi.data), np.maximum(x_lam.data, psi.data)
        ok["convex"] += bool(np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12))
        ok["non_tumor_slices"] += np.array_equal(out[:, :, ~on], x_lam.data[:, :, ~on])
        ok["zero_weight_voxels"] += np.array_equal(out[w.data == 0], x_lam.data[w.data == 0])
    return ok


def test_identity_suite():
    ok = identity_suite(50)
    assert ok == dict.fromkeys(ok, 50)


def test_rescale_arithmetic():
    data = np.full((4, 4, 2), 0.2)
    data[1, 1, 0] = 0.5
    data[2, 2, 1] = 0.9
    m = np.zeros((4, 4, 2), np.uint8)
    m[1, 1, 0] = m[2, 2, 1] = 1
    vol, mask = Volume(data), Mask(m)
    out = rescale_tumor(vol, mask, 0.7).data
    assert out[1, 1, 0] == pytest.approx(0.35) and out[2, 2, 1] == pytest.approx(0.63)
    assert np.array_equal(out[m == 0], data[m == 0])
    up = rescale_tumor(vol, mask, 1.5).data
    assert up[2, 2, 1] == 1.0 and up[1, 1, 0] == pytest.approx(0.75)
    assert np.array_equal(up[m == 0], data[m == 0])


def test_rescale_unnormalized_not_clipped():
    data = np.full((3, 3, 1), 2.0)
    m = np.zeros((3, 3, 1), np.uint8)
    m[1, 1, 0] = 1
    assert rescale_tumor(Volume(data), Mask(m), 1.5).data[1, 1, 0] == 3.0


def test_rescale_errors():
    vol = Volume(np.ones((3, 3, 3)) * 0.5)
    with pytest.warns(EmptyMaskWarning):
        out = rescale_tumor(vol, Mask(np.zeros((3, 3, 3), np.uint8)), 0.7)
    assert np.array_equal(out.data, vol.data)
    with pytest.raises(InvalidArgumentError):
        rescale_tumor(vol, Mask(np.ones((3, 3, 3), np.uint8)), 0.0)
    with pytest.raises(InvalidArgumentError):
        rescale_tumor(vol, Mask(np.ones((3, 3, 2), np.uint8)), 1.2)


def test_uniform_half_weight_on_one_slice():
    case = _case(5)
    vol, mask = case.image, case.mask
    z = int(mask.data.sum((0, 1)).argmax())
    w = np.zeros(vol.shape)
    w[:, :, z] = 0.5
    x_lam = rescale_tumor(vol, mask, 1.2)
    psi = harmonized_volume(x_lam, mask, 1, MODEL)
    out = gba_augment(vol, mask, 1.2, 1, MODEL, WeightMask(w)).data
    assert np.abs(out[:, :, z] - (0.5 * psi.data[:, :, z] + 0.5 * x_lam.data[:, :, z])).max() <= 1e-12


def test_naive_is_rescale():
    case = _case(6)
    for lam in (0.6, 1.0, 1.5):
        assert np.array_equal(naive_augment(case.image, case.mask, lam).data, rescale_tumor(case.image, case.mask, lam).data)
    assert np.array_equal(naive_augment(case.image, case.mask, 1.0).data, case.image.data)


def test_naive_differs_from_gba():
    case = _case(7)
    assert not np.array_equal(
        naive_augment(case.image, case.mask, 1.2).data, gba_augment(case.image, case.mask, 1.2, 1, MODEL).data
    )


def test_gba_errors():
    case = _case(8)
    small = init_singan((32, 32), SinGANConfig(r=0.8, steps_per_scale=0, nfc=4))
    with pytest.raises(InvalidArgumentError):
        gba_augment(case.image, case.mask, 1.2, 1, small)
    with pytest.raises(InvalidArgumentError):
        gba_augment(case.image, case.mask, 1.2, MODEL.K + 1, MODEL)
    with pytest.raises(InvalidArgumentError):
        gba_augment(case.image, Mask(np.zeros(SHAPE, np.uint8)), 1.2, 1, MODEL)


def _dummy(center):
    return type("C", (), {"case_id": "x", "center": center})


@pytest.mark.parametrize(
    "stats,center,lambdas",
    [
        (TumorStats(0.5, 2500.0, 0.12), "B", [0.7, 1.2, 1.5]),
        (TumorStats(0.5, 200.0, 0.02), "A", [0.6, 0.8, 1.2]),
        (TumorStats(0.5, 200.0, 0.02), "B", [0.6, 0.8, 1.2]),
        (TumorStats(0.5, 1000.0, 0.05), "B", None),
        (TumorStats(0.5, 2500.0, 0.12), "A", None),
        (TumorStats(0.5, 2500.0, 0.08), "B", None),
    ],
)
def test_default_rule_selection(stats, center, lambdas):
    fired = [r for r in default_rules() if r.matches(stats, center)]
    if lambdas is None:
        assert fired == []
    else:
        assert len(fired) == 1 and fired[0].lambdas == lambdas and fired[0].k_stars == [1, 3] and fired[0].count == 6


def test_apply_policy_counts_and_provenance():
    case = _case(9)
    stats = tumor_stats(case.image, case.mask)
    small = PolicyRule([0.6, 0.8, 1.2], [1, 3], volume_max=stats.volume_mm3 + 1, name="small")
    never = PolicyRule([1.5], [1], volume_min=1e9, name="never")
    other = _case(10)
    res = apply_policy([(case, stats), (other, TumorStats(0.5, 1e8, 0.0))], [never, small], {case.case_id: MODEL})
    assert len(res.passthrough) == 2 and len(res.augmented) == 6
    pairs = {(p.lam, p.k_star) for _, p in res.augmented}
    assert pairs == {(l, k) for l in (0.6, 0.8, 1.2) for k in (1, 3)}
    for aug, prov in res.augmented:
        assert prov.model_checksum == MODEL.checksum() and prov.case_id == case.case_id
        assert prov.output_sha256 == checksum_array(aug.image.data)
        rebuilt = reconstruct_augmentation(case, prov, MODEL)
        assert np.array_equal(rebuilt.data, aug.image.data)
    m = json.loads(json.dumps(res.manifest()))
    assert len(m["augmentations"]) == 6 and [r["rule"] for r in m["records"]] == ["small", None]


def test_apply_policy_missing_model_names_case():
    case = _case(11)
    stats = TumorStats(0.5, 100.0, 0.0)
    with pytest.raises(ConfigError, match=case.case_id):
        apply_policy([(case, stats)], default_rules(), {})


def test_apply_policy_naive_needs_no_model():
    case = _case(12)
    res = apply_policy([(case, TumorStats(0.5, 100.0, 0.0))], default_rules(), method="naive")
    assert len(res.augmented) == 6 and all(p.model_checksum is None for _, p in res.augmented)


def test_reconstruct_rejects_wrong_model():
    case = _case(13)
    prov = Provenance(case.case_id, 1.2, 1, "gba", "small", "0" * 64)
    with pytest.raises(InvalidArgumentError):
        reconstruct_augmentation(case, prov, MODEL)


def test_rule_validation_and_files(tmp_path):
    with pytest.raises(ConfigError):
        PolicyRule([], [1])
    with pytest.raises(ConfigError):
        PolicyRule([-0.5], [1])
    with pytest.raises(ConfigError):
        PolicyRule([0.5], [-1])
    (tmp_path / "r.json").write_text(json.dumps({"rules": [{"lambdas": [0.5], "k_stars": [1], "volume_max": 10}]}))
    (tmp_path / "r.toml").write_text('[[rules]]\nlambdas = [0.5]\nk_stars = [1]\ncenter = "B"\n')
    assert load_rules(tmp_path / "r.json")[0].volume_max == 10
    assert load_rules(tmp_path / "r.toml")[0].center == "B"
