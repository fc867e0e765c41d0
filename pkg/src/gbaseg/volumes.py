"""Volumetric grid types and the deterministic image operations applied to them.

Axis convention: ``data`` is indexed ``(x, y, z)`` and axial slices are
``data[:, :, z]``. ``origin`` is the physical position (mm) of the center of
voxel ``(0, 0, 0)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import (
    DegenerateInputError,
    EmptyMaskWarning,
    InvalidArgumentError,
    NumericalDivergenceError,
)

Triple = tuple[float, float, float]


def _as_triple(values, name) -> Triple:
    t = tuple(float(v) for v in values)
    if len(t) != 3:
        raise InvalidArgumentError(f"{name} must have 3 components, got {values!r}")
    return t  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise InvalidArgumentError(f"volume data must be 3D, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        object.__setattr__(self, "data", data)
        spacing = _as_triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise InvalidArgumentError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def with_data(self, data):
        return replace(self, data=data)

    def grid_compatible(self, other) -> bool:
        return self.shape == other.shape and np.allclose(self.spacing, other.spacing)

    def diagonal_mm(self) -> float:
        return float(np.sqrt(np.sum((np.array(self.shape) * np.array(self.spacing)) ** 2)))


@dataclass(frozen=True, eq=False)
class Mask(Volume):
    """Binary grid; data is stored as ``uint8`` with values in {0, 1}."""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.uint8:
            if data.dtype == bool:
                data = data.astype(np.uint8)
            else:
                if not np.all((data == 0) | (data == 1)):
                    raise InvalidArgumentError("mask values must be 0 or 1")
                data = data.astype(np.uint8)
        elif data.size and data.max() > 1:
            raise InvalidArgumentError("mask values must be 0 or 1")
        object.__setattr__(self, "data", data)
        if data.ndim != 3:
            raise InvalidArgumentError(f"mask data must be 3D, got shape {data.shape}")
        spacing = _as_triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise InvalidArgumentError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))

    @property
    def bool(self) -> np.ndarray:
        return self.data.astype(bool)

    @property
    def empty(self) -> bool:
        return not self.data.any()

    def count(self) -> int:
        return int(self.data.sum())

    @classmethod
    def like(cls, vol: Volume, data) -> "Mask":
        return cls(np.asarray(data), vol.spacing, vol.origin)


@dataclass(frozen=True, eq=False)
class WeightMask(Volume):
    """Real-valued blending weights in [0, 1]. ``empty`` flags an all-zero result."""

    empty: bool = False

    def __post_init__(self):
        super().__post_init__()
        if self.data.size and (self.data.min() < 0 or self.data.max() > 1):
            raise InvalidArgumentError("weight mask values must lie in [0, 1]")


@dataclass(frozen=True)
class PointSpreadFunction:
    """Separable Gaussian PSF, standard deviations given in mm per axis.

    ``truncate`` sets the discretized support radius in units of the per-axis
    standard deviation (in voxels).
    """

    sigma_mm: Triple = (1.0, 1.0, 2.5)
    truncate: float = 4.0

    def __post_init__(self):
        sigma = _as_triple(self.sigma_mm, "sigma_mm")
        if min(sigma) < 0:
            raise InvalidArgumentError(f"PSF sigmas must be >= 0, got {sigma}")
        object.__setattr__(self, "sigma_mm", sigma)

    def sigma_voxels(self, spacing) -> Triple:
        return tuple(s / sp for s, sp in zip(self.sigma_mm, spacing))  # type: ignore[return-value]

    def radius_voxels(self, spacing) -> tuple[int, int, int]:
        return tuple(int(math.ceil(self.truncate * s)) for s in self.sigma_voxels(spacing))  # type: ignore[return-value]

    def kernels_1d(self, spacing) -> list[np.ndarray]:
        kernels = []
        for sigma, radius in zip(self.sigma_voxels(spacing), self.radius_voxels(spacing)):
            if sigma == 0:
                kernels.append(np.ones(1))
                continue
            x = np.arange(-radius, radius + 1, dtype=np.float64)
            k = np.exp(-0.5 * (x / sigma) ** 2)
            kernels.append(k / k.sum())
        return kernels

    def kernel(self, spacing) -> np.ndarray:
        """Dense 3D kernel (outer product of the per-axis kernels)."""
        kx, ky, kz = self.kernels_1d(spacing)
        return kx[:, None, None] * ky[None, :, None] * kz[None, None, :]


# --------------------------------------------------------------------------
# resampling / cropping / normalization


def resample(vol: Volume, target_spacing, interpolation: str = "trilinear") -> Volume:
    """Resample onto a grid with ``target_spacing``, keeping voxel 0 fixed.

    The output shape is ``round(shape * spacing / target_spacing)`` per axis, so
    the physical extent is preserved to within one output voxel. Samples that
    fall past the last input voxel are clamped to the edge value.
    """
    target = _as_triple(target_spacing, "target_spacing")
    if min(target) <= 0:
        raise InvalidArgumentError(f"target spacing must be positive, got {target}")
    orders = {"nearest": 0, "trilinear": 1}
    if interpolation not in orders:
        raise InvalidArgumentError(f"unknown interpolation {interpolation!r}")
    if isinstance(vol, Mask) and interpolation != "nearest":
        raise InvalidArgumentError("masks must be resampled with nearest interpolation")

    shape = tuple(
        max(1, int(round(n * s / t))) for n, s, t in zip(vol.shape, vol.spacing, target)
    )
    if shape == vol.shape and np.allclose(target, vol.spacing, rtol=0, atol=0):
        return replace(vol, data=vol.data.copy())
    scale = np.array(target) / np.array(vol.spacing)
    out = ndimage.affine_transform(
        vol.data.astype(np.float64),
        matrix=np.diag(scale),
        offset=0.0,
        output_shape=shape,
        order=orders[interpolation],
        mode="nearest",
    )
    if isinstance(vol, Mask):
        return Mask(out.round().astype(np.uint8), target, vol.origin)
    return replace(vol, data=out.astype(vol.data.dtype), spacing=target)


def brain_center(vol: Volume, percentile: float = 75.0) -> tuple[float, float]:
    """Mean (x, y) voxel coordinate of voxels strictly above the percentile."""
    data = vol.data
    if not np.any(data):
        raise DegenerateInputError("cannot locate brain center in an all-zero volume")
    thr = np.percentile(data, percentile)
    idx = np.nonzero(data > thr)
    if idx[0].size == 0:
        raise DegenerateInputError(
            f"no voxels strictly above the {percentile}th percentile ({thr})"
        )
    return float(idx[0].mean()), float(idx[1].mean())


def crop_xy(vol: Volume, center, size: int) -> Volume:
    """Crop (or zero-pad) a ``size x size x Z`` block centered on ``center``."""
    out_shape = (size, size, vol.shape[2])
    starts = [int(math.floor(c - (size - 1) / 2 + 0.5)) for c in center]
    out = np.zeros(out_shape, dtype=vol.data.dtype)
    src, dst = [], []
    for start, n in zip(starts, vol.shape[:2]):
        lo, hi = max(start, 0), min(start + size, n)
        src.append(slice(lo, max(lo, hi)))
        dst.append(slice(lo - start, lo - start + max(0, hi - lo)))
    out[dst[0], dst[1], :] = vol.data[src[0], src[1], :]
    origin = (
        vol.origin[0] + starts[0] * vol.spacing[0],
        vol.origin[1] + starts[1] * vol.spacing[1],
        vol.origin[2],
    )
    return replace(vol, data=out, origin=origin)


def brain_center_crop(vol: Volume, crop_xy_size: int = 256, percentile: float = 75.0):
    """Return ``(cropped, (cx, cy))``; pads with zeros where the crop leaves the grid."""
    center = brain_center(vol, percentile)
    return crop_xy(vol, center, crop_xy_size), center


def modal_value(data: np.ndarray) -> float:
    values, counts = np.unique(data, return_counts=True)
    return float(values[np.argmax(counts)])


def normalize_unit(vol: Volume, exclude_background: bool = False) -> Volume:
    data = vol.data.astype(np.float64)
    included = data
    if exclude_background:
        bg = modal_value(data)
        included = data[data != bg]
    if included.size == 0:
        raise DegenerateInputError("no voxels left to normalize")
    lo, hi = float(included.min()), float(included.max())
    if not hi > lo:
        raise DegenerateInputError("cannot normalize a constant volume")
    return vol.with_data((data - lo) / (hi - lo))


# --------------------------------------------------------------------------
# PSF convolution and deconvolution


def convolve_psf(vol: Volume, psf: PointSpreadFunction) -> Volume:
    data = vol.data.astype(np.float64)
    for axis, k in enumerate(psf.kernels_1d(vol.spacing)):
        if k.size == 1:
            continue
        data = ndimage.correlate1d(data, k, axis=axis, mode="reflect")
    return vol.with_data(data)


def van_cittert_deconvolve(
    vol: Volume,
    psf: PointSpreadFunction,
    iterations: int = 15,
    relaxation: float = 1.0,
    divergence_factor: float = 1e3,
) -> Volume:
    """Van Cittert fixed-point deblurring with nonnegativity clamping.

    f_0 = g;  f_{n+1} = max(0, f_n + relaxation * (g - psf * f_n))
    """
    if iterations < 0:
        raise InvalidArgumentError("iterations must be >= 0")
    g = vol.data.astype(np.float64)
    if iterations == 0 or relaxation == 0:
        return vol.with_data(vol.data.copy())
    limit = divergence_factor * float(np.abs(g).max())
    f = g.copy()
    for n in range(iterations):
        blurred = convolve_psf(vol.with_data(f), psf).data
        f = np.maximum(f + relaxation * (g - blurred), 0.0)
        peak = float(np.abs(f).max())
        if not np.isfinite(peak) or peak > limit:
            raise NumericalDivergenceError(
                f"Van Cittert diverged at iteration {n + 1} (max |f| = {peak:.3g})"
            )
    return vol.with_data(f.astype(vol.data.dtype))


# --------------------------------------------------------------------------
# weight mask


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (xx**2 + yy**2) <= r * r


@dataclass
class WeightMaskConfig:
    dilation_radius: int = 3
    sigma_xy: float = 2.0


def build_weight_mask(mask: Mask, dilation_radius: int = 3, sigma_xy: float = 2.0) -> WeightMask:
    """In-plane dilation followed by a 2D Gaussian, per axial slice.

    The result is raised back to 1 on the original mask so the tumor interior
    is always fully weighted.
    """
    m = mask.bool
    if not m.any():
        warnings.warn("weight mask requested for an empty mask", EmptyMaskWarning, stacklevel=2)
        return WeightMask(np.zeros(mask.shape), mask.spacing, mask.origin, empty=True)
    if dilation_radius > 0:
        se = disk(dilation_radius)[:, :, None]
        dilated = ndimage.binary_dilation(m, structure=se)
    else:
        dilated = m
    w = dilated.astype(np.float64)
    if sigma_xy > 0:
        w = ndimage.gaussian_filter(w, sigma=(sigma_xy, sigma_xy, 0), mode="reflect")
    w = np.clip(np.maximum(w, m), 0.0, 1.0)
    return WeightMask(w, mask.spacing, mask.origin)


def tumor_slices(mask: Mask) -> np.ndarray:
    """Indices of axial slices containing at least one mask voxel."""
    return np.nonzero(mask.data.reshape(-1, mask.shape[2]).any(axis=0))[0]


__all__ = [
    "Volume",
    "Mask",
    "WeightMask",
    "WeightMaskConfig",
    "PointSpreadFunction",
    "resample",
    "brain_center",
    "brain_center_crop",
    "crop_xy",
    "normalize_unit",
    "modal_value",
    "convolve_psf",
    "van_cittert_deconvolve",
    "build_weight_mask",
    "tumor_slices",
    "disk",
]
