"""Retrain the toy CycleGAN with several seeds: outputs differ per seed, repeat per seed is identical."""
import argparse

from _common import dump, setup

from gbaseg.experiments import cyclegan_instability

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--out")
    args = ap.parse_args()
    setup()
    dump(cyclegan_instability(args.seeds, args.epochs, args.seeds[0]), args.out)
