"""Train the CycleGAN on the intensity-inversion toy and report held-out error."""
import argparse

from _common import dump, setup

from gbaseg.experiments import toy_inversion

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="write the result JSON here")
    args = ap.parse_args()
    setup()
    res = toy_inversion(args.epochs, args.seed)
    res["history"] = res["history"][-1:]
    dump(res, args.out)
