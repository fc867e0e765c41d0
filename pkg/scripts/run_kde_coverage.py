"""KDE coverage of real-target tumors before and after augmentation, plus the report figures."""
import argparse
import json
from pathlib import Path

from _common import dump, setup

from gbaseg.experiments import kde_coverage
from gbaseg.pipeline import ExperimentReport
from gbaseg.plots import emit_plots, plot_data_from_dirs

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--run", required=True, help="pipeline output directory holding stage_dirs_gba.json")
    ap.add_argument("--plots", help="write figures here")
    ap.add_argument("--format", default="svg", choices=["svg", "pdf"])
    ap.add_argument("--out")
    args = ap.parse_args()
    setup()
    run = Path(args.run)
    res = kde_coverage(run, None)
    if args.plots:
        dirs = json.loads((run / "stage_dirs_gba.json").read_text())
        data = plot_data_from_dirs(dirs["translate"], dirs["augment"], [dirs["test"]])
        reports = {p.stem[len("report_"):]: ExperimentReport.load(p) for p in sorted(run.glob("report_*.json"))}
        res["plots"] = [str(p) for p in emit_plots(reports, data, args.plots, args.format)]
    dump(res, args.out)
