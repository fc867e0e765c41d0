"""Directional benchmark: teacher Dice per augmentation setting and the GBA self-training trajectory."""
import argparse

from _common import dump, setup

from gbaseg.experiments import directional_e2e, set_threads

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--root", default="runs/e2e")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--settings", default="none,naive,gba")
    ap.add_argument("--threads", type=int, default=0, help="torch threads (0 keeps the default)")
    ap.add_argument("--out")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    setup(args.verbose)
    if args.threads:
        set_threads(args.threads)
    res = directional_e2e(args.root, args.seeds, tuple(args.settings.split(",")))
    res["margin_ok"] = res["gba_margin"] >= 0.02
    res["selftrain_ok"] = res["gba_final_mean"] >= res["gba_iter0_mean"] - 0.01
    dump(res, args.out)
