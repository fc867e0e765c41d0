"""Segmentation scores, postprocessing, tumor statistics, KDE and ranking."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage, stats

from .errors import DegenerateInputError, InvalidArgumentError, UndefinedScoreError
from .io import dump_json
from .volumes import Mask, Volume

FACE_CONNECTIVITY = ndimage.generate_binary_structure(3, 1)
FULL_CONNECTIVITY = ndimage.generate_binary_structure(3, 3)


@dataclass
class CaseScore:
    case_id: str
    dice: float
    assd: float = math.nan  # nan when undefined
    worst_assd: float | None = None  # substitute used for ranking

    @property
    def assd_defined(self) -> bool:
        return not math.isnan(self.assd)

    def assd_for_ranking(self) -> float:
        if self.assd_defined:
            return self.assd
        if self.worst_assd is None:
            raise InvalidArgumentError(f"case {self.case_id}: undefined ASSD without a substitute")
        return self.worst_assd


@dataclass
class TumorStats:
    mean_intensity: float
    volume_mm3: float
    intensity_std: float


@dataclass
class DensityGrid:
    x: np.ndarray  # intensity axis
    y: np.ndarray  # volume axis
    density: np.ndarray  # shape (len(x), len(y))

    def integral(self) -> float:
        return float(self.density.sum() * (self.x[1] - self.x[0]) * (self.y[1] - self.y[0]))


def _check_grid(a: Mask, b: Mask):
    if a.shape != b.shape or not np.allclose(a.spacing, b.spacing):
        raise InvalidArgumentError(
            f"masks are not grid-compatible: {a.shape}/{a.spacing} vs {b.shape}/{b.spacing}"
        )


def dice(pred: Mask, ref: Mask) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks score 1.0."""
    _check_grid(pred, ref)
    a, b = pred.bool, ref.bool
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one face neighbour outside the mask."""
    m = mask.astype(bool)
    eroded = ndimage.binary_erosion(m, structure=FACE_CONNECTIVITY, border_value=0)
    return m & ~eroded


def surface_distances(pred: Mask, ref: Mask) -> tuple[np.ndarray, np.ndarray]:
    """Distances (mm) from each pred surface voxel to ref surface, and vice versa."""
    _check_grid(pred, ref)
    if pred.empty or ref.empty:
        raise UndefinedScoreError("surface distance undefined for an empty mask")
    sp, sr = surface(pred.data), surface(ref.data)
    dt_ref = ndimage.distance_transform_edt(~sr, sampling=ref.spacing)
    dt_pred = ndimage.distance_transform_edt(~sp, sampling=pred.spacing)
    return dt_ref[sp], dt_pred[sr]


def assd(pred: Mask, ref: Mask) -> float:
    d_pr, d_rp = surface_distances(pred, ref)
    return float((d_pr.sum() + d_rp.sum()) / (d_pr.size + d_rp.size))


def score_case(case_id: str, pred: Mask, ref: Mask) -> CaseScore:
    d = dice(pred, ref)
    try:
        a = assd(pred, ref)
    except UndefinedScoreError:
        a = math.nan
    return CaseScore(case_id, d, a, worst_assd=ref.diagonal_mm())


def largest_connected_component(prob: Volume, threshold: float = 0.5) -> Mask:
    """Keep the largest 26-connected component of ``prob > threshold``.

    Size ties go to the component whose first voxel comes first in C order.
    """
    fg = prob.data > threshold
    labels, n = ndimage.label(fg, structure=FULL_CONNECTIVITY)
    if n == 0:
        return Mask(np.zeros(prob.shape, np.uint8), prob.spacing, prob.origin)
    sizes = np.bincount(labels.ravel())[1:]
    keep = int(np.argmax(sizes)) + 1
    return Mask((labels == keep).astype(np.uint8), prob.spacing, prob.origin)


def tumor_stats(vol: Volume, mask: Mask) -> TumorStats:
    if mask.shape != vol.shape:
        raise InvalidArgumentError("volume and mask shapes differ")
    vals = vol.data[mask.bool].astype(np.float64)
    if vals.size == 0:
        raise DegenerateInputError("tumor statistics need a non-empty mask")
    return TumorStats(
        mean_intensity=float(vals.mean()),
        volume_mm3=float(vals.size * np.prod(vol.spacing)),
        intensity_std=float(vals.std()),
    )


def scott_bandwidth(values: np.ndarray, d: int = 2) -> float:
    values = np.asarray(values, dtype=np.float64)
    s = float(values.std(ddof=1)) if values.size > 1 else 0.0
    bw = s * values.size ** (-1.0 / (d + 4))
    if bw <= 0:
        # degenerate spread: fall back to a small fraction of the magnitude
        bw = max(abs(float(values.mean())) * 0.05, 1e-3)
    return bw


def kde2d(points, bandwidth=None, n_grid: int = 128, grid=None) -> DensityGrid:
    """Gaussian product-kernel density on a regular grid, normalized to 1.

    ``points`` is an iterable of (mean_intensity, volume_mm3). The grid spans
    the data range extended by 3 bandwidths on each side, unless ``grid``
    gives the (x, y) axes explicitly (for comparing several sets).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] < 2:
        raise InvalidArgumentError("kde2d needs at least 2 points")
    if bandwidth is None:
        bandwidth = (scott_bandwidth(pts[:, 0]), scott_bandwidth(pts[:, 1]))
    bx, by = (float(b) for b in bandwidth)
    if bx <= 0 or by <= 0:
        raise InvalidArgumentError("bandwidths must be positive")
    if grid is None:
        x = np.linspace(pts[:, 0].min() - 3 * bx, pts[:, 0].max() + 3 * bx, n_grid)
        y = np.linspace(pts[:, 1].min() - 3 * by, pts[:, 1].max() + 3 * by, n_grid)
    else:
        x, y = (np.asarray(a, dtype=np.float64) for a in grid)
    kx = np.exp(-0.5 * ((x[:, None] - pts[None, :, 0]) / bx) ** 2)  # (nx, n)
    ky = np.exp(-0.5 * ((y[:, None] - pts[None, :, 1]) / by) ** 2)  # (ny, n)
    density = kx @ ky.T
    density /= density.sum() * (x[1] - x[0]) * (y[1] - y[0])
    return DensityGrid(x, y, density)


def density_region(grid: DensityGrid, mass: float = 0.9) -> np.ndarray:
    """Boolean mask of the highest-density cells holding ``mass`` of the total."""
    flat = np.sort(grid.density.ravel())[::-1]
    cum = np.cumsum(flat) / flat.sum()
    level = flat[min(np.searchsorted(cum, mass), flat.size - 1)]
    return grid.density >= level


def rank_cases(scores_by_method: dict[str, list[CaseScore]]) -> dict[str, float]:
    """Mean rank per method over all (case, metric) pairs; lower is better.

    Dice is ranked descending and ASSD ascending; ties share the mean rank.
    """
    methods = list(scores_by_method)
    if not methods:
        return {}
    by_case = {m: {s.case_id: s for s in scores_by_method[m]} for m in methods}
    case_ids = sorted(by_case[methods[0]])
    for m in methods:
        if set(by_case[m]) != set(case_ids):
            missing = set(case_ids) ^ set(by_case[m])
            raise InvalidArgumentError(f"method {m!r} does not score cases {sorted(missing)}")
    totals = dict.fromkeys(methods, 0.0)
    for cid in case_ids:
        d = np.array([by_case[m][cid].dice for m in methods])
        a = np.array([by_case[m][cid].assd_for_ranking() for m in methods])
        for r_d, r_a, m in zip(stats.rankdata(-d), stats.rankdata(a), methods):
            totals[m] += r_d + r_a
    n = 2 * len(case_ids)
    return {m: totals[m] / n for m in methods}


# --------------------------------------------------------------------------
# export

QUANTILES = (1, 5, 25, 50, 75, 95, 99)


def summarize(values, higher_is_better: bool = True) -> dict:
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return {"n": 0}
    out = {
        "n": int(v.size),
        "mean": float(v.mean()),
        "std": float(v.std()),
        "worst": float(v.min() if higher_is_better else v.max()),
    }
    # quantiles are ordered worst to best, matching the usual table layout
    for q in QUANTILES:
        p = q if higher_is_better else 100 - q
        out[f"p{q}"] = float(np.percentile(v, p))
    out["best"] = float(v.max() if higher_is_better else v.min())
    return out


def write_scores_csv(scores: list[CaseScore], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "dice", "assd", "worst_assd"])
        for s in scores:
            w.writerow([
                s.case_id,
                repr(float(s.dice)),
                "" if not s.assd_defined else repr(float(s.assd)),
                "" if s.worst_assd is None else repr(float(s.worst_assd)),
            ])
    return path


def read_scores_csv(path) -> list[CaseScore]:
    out = []
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            worst = row.get("worst_assd") or None
            out.append(
                CaseScore(
                    row["case_id"],
                    float(row["dice"]),
                    float(row["assd"]) if row["assd"] else math.nan,
                    None if worst is None else float(worst),
                )
            )
    return out


def summary_json(scores: list[CaseScore], path=None) -> dict:
    summary = {
        "dice": summarize([s.dice for s in scores], higher_is_better=True),
        "assd": summarize([s.assd for s in scores], higher_is_better=False),
        "n_cases": len(scores),
        "n_assd_undefined": sum(not s.assd_defined for s in scores),
    }
    if path is not None:
        dump_json(summary, path)
    return summary


def paired_ttest(a, b) -> tuple[float, float]:
    """Two-sided paired t-test; returns (statistic, p-value)."""
    res = stats.ttest_rel(np.asarray(a, float), np.asarray(b, float))
    return float(res.statistic), float(res.pvalue)
