"""Blur phantoms with a known PSF, deconvolve, and count how often the RMSE to the truth drops."""
import argparse

from _common import dump, setup

from gbaseg.experiments import van_cittert_study

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=20)
    ap.add_argument("--iterations", type=int, default=15)
    ap.add_argument("--out")
    args = ap.parse_args()
    setup()
    dump(van_cittert_study(args.n, args.iterations), args.out)
