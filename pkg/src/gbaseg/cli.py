"""Command line interface.

Exit codes: 0 success, 2 configuration or argument error, 3 numerical
failure, 4 self-training failure gate.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gba as gba_mod
from . import pipeline as pl
from .config import load_config
from .errors import ConfigError, GBASegError, SelfTrainFailure
from .i2i import TranslationModel
from .io import dump_json, load_volume, read_cases, save_volume, write_cases
from .metrics import rank_cases
from .selftrain import UNetSegmenter, self_train_loop
from .singan import SinGANModel, harmonize, train_singan

log = logging.getLogger("gbaseg")


def _common(p):
    p.add_argument("--config", help="pipeline TOML file")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--out", help="output directory")


def _cfg(args):
    return load_config(args.config, seed=args.seed, out=args.out)


def _need(args, *names):
    for n in names:
        if getattr(args, n, None) in (None, []):
            raise ConfigError(f"--{n.replace('_', '-')} is required")


def cmd_phantoms(args):
    cfg = _cfg(args)
    _need(args, "out")
    cfg.paths.data = args.out
    root = pl.ensure_benchmark(cfg)
    print(root)


def cmd_preprocess(args):
    cfg = _cfg(args)
    _need(args, "cases", "out")
    pl.preprocess_dir(args.cases, args.out, cfg, with_masks=not args.no_masks)


def cmd_train_i2i(args):
    cfg = _cfg(args)
    _need(args, "source", "target", "out")
    src, tgt = read_cases(args.source), read_cases(args.target, with_masks=False)
    model = pl.train_i2i(src, tgt, cfg, src[0].image.shape[0])
    model.save(args.out)


def _save_file(vol, out) -> Path:
    """Save to an explicit file name; ``.raw`` selects the raw format, anything else NIfTI."""
    out = Path(out)
    if out.name.endswith(".raw"):
        return save_volume(vol, out.with_name(out.name[: -len(".raw")]), "raw")
    for ext in (".nii.gz", ".nii"):
        if out.name.endswith(ext):
            out = out.with_name(out.name[: -len(ext)])
    return save_volume(vol, out, "nifti")


def cmd_translate(args):
    cfg = _cfg(args)
    _need(args, "model", "out")
    model = TranslationModel.load(args.model)
    if args.input:
        _save_file(pl.translate_image(model, load_volume(args.input), cfg), args.out)
        return
    _need(args, "cases")
    write_cases([pl.translate_case(model, c, cfg) for c in read_cases(args.cases)], args.out, cfg.fmt)


def cmd_train_singan(args):
    cfg = _cfg(args)
    _need(args, "out")
    if args.r is not None:
        cfg.singan.r = args.r
    if args.steps is not None:
        cfg.singan.steps_per_scale = args.steps
    if args.slice:
        vol = load_volume(args.slice)
        img = vol.data if vol.data.ndim == 2 else vol.data[:, :, vol.shape[2] // 2]
        train_singan(np.asarray(img, np.float64), pl.singan_config(cfg, cfg.seed)).save(args.out)
        return
    _need(args, "cases")
    if args.rules:
        cfg.gba.rules = args.rules
    cases = read_cases(args.cases)
    if args.case:
        cases = [c for c in cases if c.case_id in set(args.case)]
        rules = [gba_mod.PolicyRule([1.0], [0], name="explicit")]
    else:
        rules = pl.load_rules(cfg)
    for cid, m in pl.train_singans(cases, rules, cfg).items():
        m.save(Path(args.out) / cid)


def cmd_harmonize(args):
    _need(args, "model", "image", "out")
    model = SinGANModel.load(args.model)
    vol = load_volume(args.image)
    z = args.slice if args.slice is not None else vol.shape[2] // 2
    data = vol.data.astype(np.float64).copy()
    data[:, :, z] = harmonize(model, data[:, :, z], args.k_star)
    _save_file(vol.with_data(data), args.out)


def cmd_augment(args):
    cfg = _cfg(args)
    _need(args, "cases", "out")
    if args.rules:
        cfg.gba.rules = args.rules
    if args.method:
        cfg.gba.method = args.method
    cases = read_cases(args.cases)
    models = {}
    if cfg.gba.method == "gba" and args.models:
        models = {p.name: SinGANModel.load(p) for p in sorted(Path(args.models).iterdir()) if p.is_dir()}
    res = pl.augment(cases, pl.load_rules(cfg), models, cfg)
    write_cases([c for c, _ in res.augmented], args.out, cfg.fmt, extra={"provenance": res.manifest()})
    dump_json(res.manifest(), Path(args.out) / "augment_manifest.json")


def cmd_selftrain(args):
    cfg = _cfg(args)
    _need(args, "train", "targets", "out")
    initial = [c for d in args.train for c in read_cases(d)]
    targets = read_cases(args.targets, with_masks=False)
    val = read_cases(args.val) if args.val else None
    _, state = self_train_loop(initial, targets, val, pl.selftrain_config(cfg), pl.seg_factory(cfg), run_dir=args.out, fmt=cfg.fmt)
    print(json.dumps({"status": state.status, "history": state.validation_dice_history}))
    if state.status == "failure_gate":
        raise SelfTrainFailure(f"teacher validation Dice {state.validation_dice_history[0]:.3f} at or below the failure gate", state)


def cmd_evaluate(args):
    cfg = _cfg(args)
    _need(args, "model", "cases", "out")
    seg = UNetSegmenter.load(args.model)
    scores = pl.evaluate(seg, read_cases(args.cases), cfg.evaluate.threshold, args.out, cfg.fmt)
    print(json.dumps({"n": len(scores), "mean_dice": float(np.mean([s.dice for s in scores]))}))


def cmd_rank(args):
    from .metrics import read_scores_csv

    _need(args, "scores")
    table = {p: read_scores_csv(p) for p in args.scores}
    print(json.dumps(rank_cases(table), indent=2))


def cmd_plot(args):
    from .plots import emit_plots, plot_data_from_dirs

    _need(args, "out")
    data = None
    if args.pseudo:
        data = plot_data_from_dirs(args.pseudo, args.augmented, args.targets or ())
    reports = {}
    for p in args.reports or []:
        r = pl.ExperimentReport.load(p)
        reports[r.setting] = r
    for path in emit_plots(reports, data, args.out, args.format):
        print(path)


def cmd_run(args):
    cfg = _cfg(args)
    settings = [s.strip() for s in args.settings.split(",")] if args.settings else [cfg.gba.method]
    if len(settings) > 1:
        reports = pl.compare_settings(cfg, settings, selftrain_for=settings if args.selftrain_all else (settings[-1],))
    else:
        reports = {settings[0]: pl.run_pipeline(cfg.replace(gba={"method": settings[0]}))}
    print(pl.comparison_table(reports))
    if any(r.status == "failure_gate" for r in reports.values()):
        raise SelfTrainFailure("self-training failure gate triggered")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gbaseg", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.set_defaults(fn=fn)
        return p

    p = verb("phantoms", cmd_phantoms, "generate the two-center phantom benchmark")

    p = verb("preprocess", cmd_preprocess, "resample, crop and normalize a case directory")
    p.add_argument("--cases", help="input case directory")
    p.add_argument("--no-masks", action="store_true")

    p = verb("train-i2i", cmd_train_i2i, "train the CycleGAN on preprocessed source/target dirs")
    p.add_argument("--source", "--src")
    p.add_argument("--target", "--tgt")

    p = verb("translate", cmd_translate, "translate source cases into pseudo-targets")
    p.add_argument("--model")
    p.add_argument("--cases")
    p.add_argument("--in", dest="input", help="translate a single volume file instead of --cases")

    p = verb("train-singan", cmd_train_singan, "train one SinGAN per policy-selected case")
    p.add_argument("--cases")
    p.add_argument("--rules")
    p.add_argument("--case", nargs="*", help="train these cases regardless of the rules")
    p.add_argument("--slice", help="train one model on this image (3D volumes use the middle slice)")
    p.add_argument("--r", type=float, help="scale ratio")
    p.add_argument("--steps", type=int, help="steps per scale")

    p = verb("harmonize", cmd_harmonize, "harmonize one axial slice of a volume")
    p.add_argument("--model")
    p.add_argument("--image", "--in", dest="image")
    p.add_argument("--k-star", "--kstar", dest="k_star", type=int, default=1)
    p.add_argument("--slice", type=int)

    p = verb("augment", cmd_augment, "apply the augmentation policy")
    p.add_argument("--cases")
    p.add_argument("--rules")
    p.add_argument("--models")
    p.add_argument("--method", choices=["none", "naive", "gba"])

    p = verb("selftrain", cmd_selftrain, "teacher-student self-training")
    p.add_argument("--train", nargs="+")
    p.add_argument("--targets")
    p.add_argument("--val")

    p = verb("evaluate", cmd_evaluate, "score a saved segmenter on labeled cases")
    p.add_argument("--model")
    p.add_argument("--cases")

    p = verb("rank", cmd_rank, "rank methods from scores.csv files")
    p.add_argument("--scores", nargs="+")

    p = verb("plot", cmd_plot, "KDE maps, per-center histograms and score boxplots")
    p.add_argument("--pseudo")
    p.add_argument("--augmented")
    p.add_argument("--targets", nargs="*")
    p.add_argument("--reports", nargs="*")
    p.add_argument("--format", default="svg", choices=["svg", "pdf"])

    p = verb("run", cmd_run, "full pipeline")
    p.add_argument("--settings", help="comma-separated augmentation settings, e.g. none,naive,gba")
    p.add_argument("--selftrain-all", action="store_true", help="self-train every setting, not only the last")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except GBASegError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
