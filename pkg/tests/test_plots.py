import json

import numpy as np
import pytest

from gbaseg.metrics import CaseScore, TumorStats
from gbaseg.pipeline import ExperimentReport
from gbaseg.plots import PlotData, center_histograms, coverage, emit_plots, kde_panels


def _stats(n, seed, shift=0.0, scale=1.0):
    rng = np.random.default_rng(seed)
    return [TumorStats(float(0.5 + shift + 0.05 * rng.standard_normal()), float(scale * 500 * (1 + 0.2 * rng.standard_normal())), 0.05)
            for _ in range(n)]


def test_no_augmentation_gives_equal_panels():
    data = PlotData(_stats(12, 0), [], _stats(8, 1))
    p = kde_panels(data)
    assert np.array_equal(p["unaugmented"].density, p["augmented"].density)
    for g in p.values():
        assert g.integral() == pytest.approx(1.0, abs=1e-3)
    c = coverage(p)
    assert c["contains"] and not c["strict_superset"]


def test_augmentation_widens_region():
    base = _stats(12, 0)
    spread = [TumorStats(s.mean_intensity * lam, s.volume_mm3, s.intensity_std) for s in base for lam in (0.6, 1.5)]
    c = coverage(kde_panels(PlotData(base, spread, _stats(8, 2, shift=-0.1))))
    assert c["augmented_cells"] > c["unaugmented_cells"]
    assert 0 <= c["real_covered_by_unaugmented"] <= 1


def test_center_histograms_normalized():
    rng = np.random.default_rng(0)
    h = center_histograms({"A": [rng.random(500), rng.random(300)], "B": [rng.random(200) * 0.5]})
    for bins, mean, std in h.values():
        assert np.sum(mean * np.diff(bins)) == pytest.approx(1.0, abs=1e-9)
        assert np.all(std >= 0)


def _report(name, n_iter):
    scores = {it: [CaseScore(f"c{i}", 0.5 + 0.01 * i + 0.02 * it, 1.0) for i in range(5)] for it in range(n_iter)}
    return ExperimentReport(name, 0, scores)


def test_emit_plots_single_setting(tmp_path):
    paths = emit_plots({"gba": _report("gba", 1)}, None, tmp_path, "svg")
    assert [p.name for p in paths] == ["boxplot_settings.svg"]
    assert paths[0].read_text().lstrip().startswith("<?xml")


def test_emit_plots_full(tmp_path):
    data = PlotData(_stats(12, 0), _stats(6, 3, shift=0.2), _stats(8, 1), {"A": [np.random.default_rng(0).random(100)]})
    reports = {"none": _report("none", 1), "gba": _report("gba", 4)}
    names = {p.name for p in emit_plots(reports, data, tmp_path, "pdf")}
    assert names == {
        "kde_tumor_distribution.pdf", "center_histograms.pdf", "boxplot_settings.pdf", "boxplot_iterations_gba.pdf"
    }
    assert set(json.loads((tmp_path / "kde_coverage.json").read_text())) >= {"contains", "strict_superset"}
