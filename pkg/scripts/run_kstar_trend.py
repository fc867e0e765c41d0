"""How far harmonization moves a rescaled tumor for each injection scale k* (recorded, not asserted)."""
import argparse

from _common import dump, setup

from gbaseg.experiments import kstar_trend, singan_slice
from gbaseg.singan import SinGANModel

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", required=True, help="directory written by run_singan.py --save")
    ap.add_argument("--lambdas", type=float, nargs="+", default=[0.6, 0.8, 1.2, 1.5])
    ap.add_argument("--out")
    args = ap.parse_args()
    setup()
    img, tumor = singan_slice()
    dump(kstar_trend(SinGANModel.load(args.model), img, tumor, tuple(args.lambdas)), args.out)
