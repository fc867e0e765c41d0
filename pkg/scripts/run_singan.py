"""Train a SinGAN on one 64x64 phantom slice; report reconstruction and harmonization RMSE per k*."""
import argparse

from _common import dump, setup

from gbaseg.experiments import singan_reconstruction

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=200, help="steps per scale")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--save", help="directory for the trained model")
    ap.add_argument("--out")
    args = ap.parse_args()
    setup()
    res = singan_reconstruction(args.steps, seed=args.seed)
    model = res.pop("model")
    if args.save:
        model.save(args.save)
    dump(res, args.out)
