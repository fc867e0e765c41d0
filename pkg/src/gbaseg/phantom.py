"""Synthetic two-modality, two-center tumor phantoms.

A case is a head-like slab of textured tissue with one smoothed ellipsoidal
tumor. The *source* modality shows the tumor strongly enhanced; the *target*
modality is a monotone remap of an independently textured copy of the
anatomy, with a tumor contrast offset drawn per case. Center B cases are
larger, more heterogeneous, and have shifted, wider tumor contrast.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError
from .io import Case, dump_json, write_cases
from .metrics import FULL_CONNECTIVITY, tumor_stats
from .volumes import Mask, Volume


@dataclass
class PhantomParams:
    shape: tuple = (56, 56, 20)
    spacing: tuple = (1.0, 1.0, 2.0)
    texture_scale_mm: float = 1.5
    texture_amp: float = 0.05
    tissue_level: float = 0.45
    tumor_radius_mm: tuple = (3.0, 6.0)
    tumor_contrast: tuple = (0.25, 0.05)  # target modality offset (mean, std)
    source_contrast: tuple = (0.35, 0.03)
    heterogeneity: float = 0.08
    center: str = "A"
    transfer: str = "gamma"
    transfer_param: float = 0.7
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.tumor_radius_mm
        if lo <= 0 or hi < lo:
            raise InvalidArgumentError(f"invalid tumor radius range {self.tumor_radius_mm}")
        if self.transfer == "gamma" and self.transfer_param <= 0:
            raise InvalidArgumentError("gamma transfer needs a positive exponent")
        if self.transfer not in ("gamma", "invert", "identity"):
            raise InvalidArgumentError(f"unknown transfer {self.transfer!r}")


def transfer(x: np.ndarray, kind: str, param: float) -> np.ndarray:
    """Monotone, invertible intensity remap on [0, 1]."""
    x = np.clip(x, 0.0, 1.0)
    if kind == "gamma":
        return x**param
    if kind == "invert":
        return 1.0 - x
    return x


def inverse_transfer(y: np.ndarray, kind: str, param: float) -> np.ndarray:
    y = np.clip(y, 0.0, 1.0)
    if kind == "gamma":
        return y ** (1.0 / param)
    if kind == "invert":
        return 1.0 - y
    return y


@dataclass
class PhantomCase:
    case_id: str
    center: str
    source: Volume
    target: Volume
    mask: Mask
    params: PhantomParams
    tumor_offset: float = 0.0

    def as_case(self, modality: str, with_mask: bool = True) -> Case:
        image = self.source if modality == "source" else self.target
        return Case(
            self.case_id,
            image,
            self.mask if with_mask else None,
            self.center,
            modality,
            {"seed": self.params.seed, "tumor_offset": self.tumor_offset},
        )


def _band_noise(rng, shape, sigma_vox):
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma_vox, mode="reflect")
    return n / (n.std() + 1e-12)


def _coords_mm(shape, spacing):
    axes = [(np.arange(n) - (n - 1) / 2) * s for n, s in zip(shape, spacing)]
    return np.meshgrid(*axes, indexing="ij")


def make_case(params: PhantomParams, case_id: str | None = None) -> PhantomCase:
    """Deterministic per ``params.seed``."""
    p = params
    rng = np.random.default_rng(p.seed)
    shape, spacing = tuple(int(s) for s in p.shape), tuple(float(s) for s in p.spacing)
    extent = np.array(shape) * np.array(spacing)
    if 2 * p.tumor_radius_mm[1] * 1.2 >= extent[:2].min() * 0.8 or p.tumor_radius_mm[1] * 1.2 > extent[2]:
        raise InvalidArgumentError(f"tumor radius {p.tumor_radius_mm} does not fit a grid of extent {extent} mm")

    X, Y, Z = _coords_mm(shape, spacing)
    # head: in-plane ellipse extruded along z
    ax, ay = 0.44 * extent[0], 0.46 * extent[1]
    head = (X / ax) ** 2 + (Y / ay) ** 2 <= 1.0
    inner = (X / (0.35 * ax)) ** 2 + ((Y + 0.1 * ay) / (0.22 * ay)) ** 2 <= 1.0

    tex_sigma = [p.texture_scale_mm / s for s in spacing]
    gradient = 0.04 * (X / ax) + 0.03 * (Y / ay)
    smooth = p.tissue_level + gradient - 0.12 * ndimage.gaussian_filter(inner.astype(float), 1.0)

    # tumor: smoothed ellipsoid placed inside the head
    r_lo, r_hi = p.tumor_radius_mm
    radius = rng.uniform(r_lo, r_hi)
    if r_hi > r_lo:
        semi = radius * rng.uniform(0.85, 1.15, size=3)
    else:
        semi = np.full(3, radius)
    angle = rng.uniform(0, np.pi)
    margin = 1.1 * semi.max() + 2 * max(spacing[:2])
    while True:
        cx = rng.uniform(-(ax - margin), ax - margin)
        cy = rng.uniform(-(ay - margin), ay - margin)
        if (cx / (ax - margin)) ** 2 + (cy / (ay - margin)) ** 2 <= 1:
            break
    cz = rng.uniform(-0.15, 0.15) * extent[2]
    u = (X - cx) * np.cos(angle) + (Y - cy) * np.sin(angle)
    v = -(X - cx) * np.sin(angle) + (Y - cy) * np.cos(angle)
    level = (u / semi[0]) ** 2 + (v / semi[1]) ** 2 + ((Z - cz) / semi[2]) ** 2
    if r_hi > r_lo:
        level = level + 0.12 * _band_noise(rng, shape, [3.0 / s for s in spacing])
    tumor = level <= 1.0
    labels, n = ndimage.label(tumor, structure=FULL_CONNECTIVITY)
    if n > 1:
        sizes = np.bincount(labels.ravel())[1:]
        tumor = labels == (np.argmax(sizes) + 1)
    if not tumor.any():
        raise InvalidArgumentError("tumor voxelized to an empty mask; increase the radius")

    def render(contrast, modality_transfer):
        tissue = smooth + p.texture_amp * _band_noise(rng, shape, tex_sigma)
        img = transfer(tissue, *modality_transfer)
        base = transfer(smooth, *modality_transfer)
        offset = rng.normal(*contrast)
        het = 1.0 + p.heterogeneity * _band_noise(rng, shape, tex_sigma)
        tumor_img = (base + offset) * het + (img - base)
        img = np.where(tumor, tumor_img, img)
        return np.clip(np.where(head, img, 0.0), 0.0, 1.0), offset

    src, _ = render(p.source_contrast, ("identity", 1.0))
    tgt, offset = render(p.tumor_contrast, (p.transfer, p.transfer_param))
    mask = Mask(tumor.astype(np.uint8), spacing)
    return PhantomCase(
        case_id or f"{p.center}{p.seed:05d}",
        p.center,
        Volume(src, spacing),
        Volume(tgt, spacing),
        mask,
        p,
        float(offset),
    )


@dataclass
class CenterShift:
    """How center B departs from center A."""

    radius_scale: float = 1.6
    contrast_shift: float = -0.12
    contrast_std_scale: float = 1.6
    heterogeneity_shift: float = 0.14
    tissue_shift: float = 0.04
    spacing_xy: float = 0.9

    @classmethod
    def none(cls):
        return cls(1.0, 0.0, 1.0, 0.0, 0.0, 1.0)


def center_params(base: PhantomParams, center: str, shift: CenterShift, seed: int) -> PhantomParams:
    if center == "A":
        return replace(base, center="A", seed=seed)
    lo, hi = base.tumor_radius_mm
    mean, std = base.tumor_contrast
    return replace(
        base,
        center="B",
        seed=seed,
        tumor_radius_mm=(lo * shift.radius_scale, hi * shift.radius_scale),
        tumor_contrast=(mean + shift.contrast_shift, std * shift.contrast_std_scale),
        heterogeneity=base.heterogeneity + shift.heterogeneity_shift,
        tissue_level=base.tissue_level + shift.tissue_shift,
        spacing=(base.spacing[0] * shift.spacing_xy, base.spacing[1] * shift.spacing_xy, base.spacing[2]),
    )


@dataclass
class Dataset:
    cases: list
    manifest: dict = field(default_factory=dict)

    def by_center(self, center):
        return [c for c in self.cases if c.center == center]


def make_benchmark(
    nA: int,
    nB: int,
    shift: CenterShift | None = None,
    base: PhantomParams | None = None,
    seed: int = 0,
    prefix: str = "",
) -> Dataset:
    """``nA`` center-A and ``nB`` center-B cases; seeds are ``seed*100000 + i``."""
    if nA < 0 or nB < 0:
        raise InvalidArgumentError("case counts must be >= 0")
    shift = CenterShift() if shift is None else shift
    base = base or PhantomParams()
    cases, entries = [], []
    for center, n in (("A", nA), ("B", nB)):
        for i in range(n):
            case_seed = seed * 100000 + (0 if center == "A" else 50000) + i
            params = center_params(base, center, shift, case_seed)
            case = make_case(params, case_id=f"{prefix}{center}{i:03d}")
            cases.append(case)
            s_src = tumor_stats(case.source, case.mask)
            s_tgt = tumor_stats(case.target, case.mask)
            entries.append(
                {
                    "case_id": case.case_id,
                    "center": center,
                    "seed": case_seed,
                    "tumor_offset": case.tumor_offset,
                    "source_stats": asdict(s_src),
                    "target_stats": asdict(s_tgt),
                }
            )
    manifest = {"shift": asdict(shift), "base": asdict(base), "seed": seed, "cases": entries}
    return Dataset(cases, manifest)


def emit_benchmark(source: Dataset, target: Dataset, out_dir, fmt: str = "nifti", test: Dataset | None = None,
                   val: Dataset | None = None) -> Path:
    """Write an experiment layout with ground truth kept out of training dirs.

    ``source_train`` holds labeled source images. ``target_train`` holds
    unlabeled target images; their masks go to ``oracle/target_train``.
    ``val`` and ``test`` keep masks in their own directories.
    """
    out = Path(out_dir)
    write_cases([c.as_case("source") for c in source.cases], out / "source_train", fmt)
    write_cases([c.as_case("target", with_mask=False) for c in target.cases], out / "target_train", fmt, with_masks=False)
    write_cases([c.as_case("target") for c in target.cases], out / "oracle" / "target_train", fmt)
    if val is not None:
        write_cases([c.as_case("target") for c in val.cases], out / "val", fmt)
    if test is not None:
        write_cases([c.as_case("target") for c in test.cases], out / "test", fmt)
    dump_json(
        {
            "source": source.manifest,
            "target": target.manifest,
            "val": val.manifest if val else None,
            "test": test.manifest if test else None,
            "training_dirs": ["source_train", "target_train"],
            "unlabeled_dirs": ["target_train"],
        },
        out / "benchmark_manifest.json",
    )
    return out


def audit_leaks(root) -> list[str]:
    """Return a list of problems: any label file inside an unlabeled training dir."""
    import json

    root = Path(root)
    manifest = json.loads((root / "benchmark_manifest.json").read_text())
    problems = []
    for d in manifest["unlabeled_dirs"]:
        if (root / d / "labels").exists() and any((root / d / "labels").iterdir()):
            problems.append(f"{d}/labels contains files")
        cases = json.loads((root / d / "cases.json").read_text())["cases"]
        for e in cases:
            if e.get("mask"):
                problems.append(f"{d}: case {e['case_id']} lists a mask")
    return problems
