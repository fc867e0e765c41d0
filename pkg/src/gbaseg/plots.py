"""Report figures: tumor-distribution KDE maps, per-center histograms, score boxplots."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import read_cases  # noqa: E402
from .metrics import DensityGrid, TumorStats, density_region, kde2d, scott_bandwidth, tumor_stats  # noqa: E402


@dataclass
class PlotData:
    """Tumor statistics for the KDE panels and raw intensities for the histograms.

    ``augmented`` holds only the generated cases; the augmented panel shows
    the unaugmented set plus these.
    """

    unaugmented: list = field(default_factory=list)  # TumorStats
    augmented: list = field(default_factory=list)
    real_target: list = field(default_factory=list)
    center_intensities: dict = field(default_factory=dict)  # center -> list of 1D arrays


def _points(stats: list[TumorStats]) -> np.ndarray:
    return np.array([[s.mean_intensity, s.volume_mm3] for s in stats], dtype=np.float64).reshape(-1, 2)


def kde_panels(data: PlotData, n_grid: int = 128) -> dict[str, DensityGrid]:
    """Densities of the three tumor sets on one shared grid.

    Bandwidths come from the unaugmented set so the panels are comparable.
    """
    sets = {
        "unaugmented": _points(data.unaugmented),
        "augmented": np.concatenate([_points(data.unaugmented), _points(data.augmented)]),
        "real_target": _points(data.real_target),
    }
    sets = {k: v for k, v in sets.items() if len(v) >= 2}
    if not sets:
        return {}
    ref = sets.get("unaugmented", next(iter(sets.values())))
    bw = (scott_bandwidth(ref[:, 0]), scott_bandwidth(ref[:, 1]))
    allp = np.concatenate(list(sets.values()))
    x = np.linspace(allp[:, 0].min() - 3 * bw[0], allp[:, 0].max() + 3 * bw[0], n_grid)
    y = np.linspace(allp[:, 1].min() - 3 * bw[1], allp[:, 1].max() + 3 * bw[1], n_grid)
    return {k: kde2d(v, bw, grid=(x, y)) for k, v in sets.items()}


def coverage(panels: dict[str, DensityGrid], mass: float = 0.9) -> dict:
    """Does the augmented 90% region contain the unaugmented one, and is it larger?"""
    if "unaugmented" not in panels or "augmented" not in panels:
        return {}
    a = density_region(panels["augmented"], mass)
    u = density_region(panels["unaugmented"], mass)
    out = {
        "unaugmented_cells": int(u.sum()),
        "augmented_cells": int(a.sum()),
        "contains": bool(np.all(a[u])),
        "strict_superset": bool(np.all(a[u]) and a.sum() > u.sum()),
    }
    if "real_target" in panels:
        r = density_region(panels["real_target"], mass)
        out["real_covered_by_unaugmented"] = float((r & u).sum() / max(r.sum(), 1))
        out["real_covered_by_augmented"] = float((r & a).sum() / max(r.sum(), 1))
    return out


def center_histograms(center_intensities: dict, bins=None):
    """Per center: mean normalized histogram over cases and its std."""
    bins = np.linspace(0, 1, 41) if bins is None else bins
    out = {}
    for center, arrays in sorted(center_intensities.items()):
        hists = np.array([np.histogram(a, bins=bins, density=True)[0] for a in arrays if len(a)])
        if len(hists) == 0:
            continue
        out[center] = (bins, hists.mean(0), hists.std(0))
    return out


def _save(fig, path: Path, fmt: str) -> Path:
    path = path.with_suffix("." + fmt)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format=fmt)
    plt.close(fig)
    return path


def emit_plots(reports: dict, data: PlotData | None, out_dir, fmt: str = "svg") -> list[Path]:
    """Write all figures; returns the written paths. ``reports`` maps setting -> ExperimentReport."""
    out_dir = Path(out_dir)
    written = []
    if data is not None:
        panels = kde_panels(data)
        if panels:
            fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 3.5), squeeze=False)
            for ax, (name, g) in zip(axes[0], panels.items()):
                ax.contourf(g.x, g.y, g.density.T, levels=12, cmap="viridis")
                ax.contour(g.x, g.y, density_region(g, 0.9).T.astype(float), levels=[0.5], colors="w", linewidths=1)
                ax.set_title(name.replace("_", " "))
                ax.set_xlabel("mean tumor intensity")
                ax.set_ylabel("tumor volume (mm³)")
            fig.tight_layout()
            written.append(_save(fig, out_dir / "kde_tumor_distribution", fmt))
            (out_dir / "kde_coverage.json").write_text(json.dumps(coverage(panels), indent=2))
        hist = center_histograms(data.center_intensities)
        if hist:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            for center, (bins, mean, std) in hist.items():
                mid = 0.5 * (bins[1:] + bins[:-1])
                ax.plot(mid, mean, label=f"center {center}")
                ax.fill_between(mid, mean - std, mean + std, alpha=0.3)
            ax.set_xlabel("normalized intensity")
            ax.set_ylabel("density")
            ax.legend()
            fig.tight_layout()
            written.append(_save(fig, out_dir / "center_histograms", fmt))
    if reports:
        names = list(reports)
        final = [[s.dice for s in reports[n].scores[reports[n].final_iteration]] for n in names]
        fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(names), 3.5))
        ax.boxplot(final)
        ax.set_xticks(range(1, len(names) + 1), names)
        ax.set_ylabel("Dice")
        fig.tight_layout()
        written.append(_save(fig, out_dir / "boxplot_settings", fmt))
        for n in names:
            r = reports[n]
            if len(r.iterations) < 2:
                continue
            fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(r.iterations), 3.5))
            ax.boxplot([[s.dice for s in r.scores[it]] for it in r.iterations])
            ax.set_xticks(range(1, len(r.iterations) + 1), [str(i) for i in r.iterations])
            ax.set_xlabel("self-training iteration")
            ax.set_ylabel("Dice")
            fig.tight_layout()
            written.append(_save(fig, out_dir / f"boxplot_iterations_{n}", fmt))
    return written


def plot_data_from_dirs(pseudo_dir, augment_dir=None, target_dirs=()) -> PlotData:
    """Collect tumor statistics from stage output directories.

    ``target_dirs`` must hold labeled target cases (validation/test or oracle).
    """
    pseudo = read_cases(pseudo_dir)
    aug = read_cases(augment_dir) if augment_dir is not None else []
    real = [c for d in target_dirs for c in read_cases(d)]
    center_int: dict = {}
    for c in real:
        center_int.setdefault(c.center, []).append(c.image.data[c.mask.bool])
    return PlotData(
        [tumor_stats(c.image, c.mask) for c in pseudo],
        [tumor_stats(c.image, c.mask) for c in aug],
        [tumor_stats(c.image, c.mask) for c in real],
        center_int,
    )
