"""Desk-scale experiments; each returns a JSON-serializable dict of results.

The scripts in ``scripts/`` and the acceptance tests call these.
"""
from __future__ import annotations

import time
from pathlib import Path

import numpy as np
import torch

from .config import PipelineConfig, from_dict
from .i2i import I2IArch, I2IConfig, TranslationModel, train_cyclegan, translate_slices
from .metrics import tumor_stats
from .phantom import PhantomParams, make_case
from .singan import SinGANConfig, harmonize, reconstruction_rmse, train_singan
from .volumes import PointSpreadFunction, convolve_psf, van_cittert_deconvolve


def _rmse(a, b) -> float:
    return float(np.sqrt(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2)))


# --------------------------------------------------------------------------
# toy translation


def inversion_slices(seeds, size=64, depth=8) -> np.ndarray:
    out = []
    for s in seeds:
        c = make_case(PhantomParams(shape=(size, size, depth), spacing=(1, 1, 2), seed=s))
        out += [c.source.data[:, :, z] for z in range(depth)]
    return np.stack(out).astype(np.float32)


def toy_inversion(epochs: int = 20, seed: int = 0, n_train: int = 6, n_held: int = 3, size: int = 64) -> dict:
    """CycleGAN on an intensity-inversion domain pair; error is mean |G(s) - (1 - s)| on held-out slices."""
    src = inversion_slices(range(0, n_train), size)
    tgt = 1.0 - inversion_slices(range(100, 100 + n_train), size)
    held = inversion_slices(range(200, 200 + n_held), size)
    arch = I2IArch(ngf=16, ndf=16, n_down=1, n_blocks=2, norm="instance", input_size=size)
    cfg = I2IConfig(epochs=epochs, batch_size=4, seed=seed, arch=arch)
    untrained = TranslationModel.init(arch, cfg.mu_cyc, seed)
    t0 = time.time()
    model = train_cyclegan(src, tgt, cfg)
    seconds = time.time() - t0
    return {
        "untrained_error": float(np.abs(translate_slices(untrained, held) - (1 - held)).mean()),
        "error": float(np.abs(translate_slices(model, held) - (1 - held)).mean()),
        "seconds": seconds,
        "checksum": model.checksum(),
        "history": model.history,
    }


def cyclegan_instability(seeds=(0, 1, 2), epochs: int = 10, repeat_seed: int = 0) -> dict:
    """Different seeds give different translations; a repeated seed gives the same one."""
    held = inversion_slices(range(200, 202))
    runs = {int(s): toy_inversion(epochs, int(s)) for s in seeds}
    again = toy_inversion(epochs, repeat_seed)
    errors = {s: r["error"] for s, r in runs.items()}
    return {
        "errors": errors,
        "error_spread": float(np.ptp(list(errors.values()))),
        "checksums": {s: r["checksum"] for s, r in runs.items()},
        "repeat_identical": again["checksum"] == runs[repeat_seed]["checksum"],
        "n_held_slices": int(len(held)),
    }


# --------------------------------------------------------------------------
# SinGAN


def singan_slice(size: int = 64, seed: int = 3) -> np.ndarray:
    c = make_case(PhantomParams(shape=(size, size, 12), spacing=(1, 1, 2), seed=seed, tumor_radius_mm=(8, 10)))
    z = int(c.mask.data.sum((0, 1)).argmax())
    return c.target.data[:, :, z], c.mask.data[:, :, z]


def singan_reconstruction(steps_per_scale: int = 200, size: int = 64, seed: int = 0) -> dict:
    img, _ = singan_slice(size)
    t0 = time.time()
    model = train_singan(img, SinGANConfig(steps_per_scale=steps_per_scale, seed=seed))
    seconds = time.time() - t0
    return {
        "K": model.K,
        "sizes": [list(s) for s in model.schedule.sizes],
        "reconstruction_rmse": reconstruction_rmse(model, img),
        "harmonize_rmse": {k: _rmse(harmonize(model, img, k), img) for k in range(model.K + 1)},
        "seconds": seconds,
        "model": model,
    }


def kstar_trend(model, img, tumor, lams=(0.6, 0.8, 1.2, 1.5)) -> dict:
    """How far harmonization moves a rescaled tumor, per k* (recorded, not asserted).

    For each k* and lambda: RMSE between the harmonized slice and the edited
    input inside the tumor, and outside it.
    """
    tumor = np.asarray(tumor, bool)
    out = {}
    for k in range(model.K + 1):
        row = {}
        for lam in lams:
            x = np.array(img, np.float64)
            x[tumor] = np.clip(lam * x[tumor], 0, 1)
            h = harmonize(model, x, k)
            row[str(lam)] = {"inside": _rmse(h[tumor], x[tumor]), "outside": _rmse(h[~tumor], x[~tumor])}
        out[k] = row
    return out


# --------------------------------------------------------------------------
# deconvolution


def van_cittert_study(n: int = 20, iterations: int = 15, sigma_mm=(1.0, 1.0, 2.5), seed: int = 0) -> dict:
    """Blur phantoms with a known PSF and check that deconvolution gets closer to the truth."""
    psf = PointSpreadFunction(tuple(sigma_mm))
    rows = []
    for i in range(n):
        c = make_case(PhantomParams(shape=(48, 48, 16), spacing=(1, 1, 2), seed=seed * 1000 + i))
        truth = c.target
        blurred = convolve_psf(truth, psf)
        restored = van_cittert_deconvolve(blurred, psf, iterations)
        rows.append({"blurred": _rmse(blurred.data, truth.data), "restored": _rmse(restored.data, truth.data)})
    return {"cases": rows, "improved": sum(r["restored"] < r["blurred"] for r in rows)}


# --------------------------------------------------------------------------
# end to end


def e2e_config(seed: int, root, **overrides) -> PipelineConfig:
    """Config of the directional end-to-end benchmark: 30 source / 20 target / 20 test cases."""
    d = {"seed": seed, "paths": {"data": f"{root}/data_seed{seed}", "out": f"{root}/run_seed{seed}"}}
    for k, v in overrides.items():
        d.setdefault(k, {}).update(v) if isinstance(v, dict) else d.__setitem__(k, v)
    return from_dict(d)


def directional_e2e(root, seeds=(0, 1, 2), settings=("none", "naive", "gba"), **overrides) -> dict:
    """Teacher Dice per setting, and the GBA arm's self-training trajectory, per seed."""
    from .pipeline import compare_settings

    per_seed = {}
    t0 = time.time()
    for s in seeds:
        cfg = e2e_config(s, root, **overrides)
        reports = compare_settings(cfg, settings, selftrain_for=("gba",))
        per_seed[int(s)] = {
            "teacher": {k: r.mean_dice(0) for k, r in reports.items()},
            "gba_iterations": {it: reports["gba"].mean_dice(it) for it in reports["gba"].iterations},
            "gba_status": reports["gba"].status,
            "n_augmented": {k: r.augmentation.get("n", 0) for k, r in reports.items()},
            "val_history": reports["gba"].selftrain.get("validation_dice_history", []),
        }
    teacher = {k: float(np.mean([p["teacher"][k] for p in per_seed.values()])) for k in settings}
    gba_first = float(np.mean([p["gba_iterations"][0] for p in per_seed.values()]))
    gba_last = float(np.mean([p["gba_iterations"][max(p["gba_iterations"])] for p in per_seed.values()]))
    return {
        "per_seed": per_seed,
        "teacher_mean": teacher,
        "gba_margin": teacher["gba"] - teacher["none"],
        "gba_iter0_mean": gba_first,
        "gba_final_mean": gba_last,
        "seconds": time.time() - t0,
    }


def kde_coverage(run_dir, data_dir) -> dict:
    """Coverage of the real-target tumor distribution before and after augmentation."""
    import json

    from .plots import coverage, kde_panels, plot_data_from_dirs

    dirs = json.loads((Path(run_dir) / "stage_dirs_gba.json").read_text())
    data = plot_data_from_dirs(dirs["translate"], dirs["augment"], [dirs["test"]])
    return coverage(kde_panels(data))


def set_threads(n: int = 1) -> None:
    torch.set_num_threads(n)


def tumor_contrast_summary(cases) -> dict:
    stats = [tumor_stats(c.image, c.mask) for c in cases]
    return {
        "mean_intensity": float(np.mean([s.mean_intensity for s in stats])),
        "volume_mm3": float(np.mean([s.volume_mm3 for s in stats])),
        "std": float(np.mean([s.intensity_std for s in stats])),
    }
