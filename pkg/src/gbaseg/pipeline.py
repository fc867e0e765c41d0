"""End-to-end orchestration with content-hash stage caching.

Each stage writes into ``<out>/<stage>/<key>/`` where ``key`` hashes the
stage name, its config section, the global seed and the digests of its input
directories. A directory holding a matching ``stage.json`` is reused, so
settings that share upstream stages (none / naive / gba) train the
translation model only once.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import shutil
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import gba as gba_mod
from .config import PipelineConfig
from .errors import GBASegError, StageError
from .i2i import I2IArch, I2IConfig, TranslationModel, train_cyclegan, translate_volume, volume_slices
from .io import Case, dump_json, read_cases, save_volume, write_cases
from .metrics import CaseScore, largest_connected_component, score_case, summary_json, tumor_stats, write_scores_csv
from .phantom import CenterShift, PhantomParams, emit_benchmark, make_benchmark
from .selftrain import SegConfig, SelfTrainConfig, UNetSegmenter, self_train_loop
from .singan import SinGANConfig, SinGANModel, default_ratio, train_singan
from .volumes import (
    Mask,
    PointSpreadFunction,
    WeightMaskConfig,
    brain_center_crop,
    crop_xy,
    normalize_unit,
    resample,
    Volume,
    tumor_slices,
    van_cittert_deconvolve,
)

log = logging.getLogger(__name__)

STAGES = ("preprocess", "train-i2i", "translate", "train-singan", "augment", "selftrain", "evaluate")


# --------------------------------------------------------------------------
# caching


def dir_digest(path) -> str:
    """sha256 over every file under ``path`` (relative name + bytes), stage.json excluded."""
    path = Path(path)
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file() and p.name != "stage.json"):
        h.update(str(f.relative_to(path)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def stage_key(name: str, section: dict, seed: int, inputs: list[str]) -> str:
    blob = json.dumps({"stage": name, "config": section, "seed": seed, "inputs": inputs}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


class StageCache:
    def __init__(self, root, enabled: bool = True):
        self.root = Path(root)
        self.enabled = enabled

    def path(self, name, key) -> Path:
        return self.root / name / key[:16]

    def hit(self, name, key) -> Path | None:
        d = self.path(name, key)
        meta = d / "stage.json"
        if self.enabled and meta.exists() and json.loads(meta.read_text()).get("key") == key:
            return d
        return None

    def begin(self, name, key) -> Path:
        d = self.path(name, key)
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        return d

    def commit(self, d: Path, key, extra=None) -> None:
        dump_json({"key": key, **(extra or {})}, d / "stage.json")


def _run_stage(cache: StageCache, name, section, seed, inputs, fn, case=None):
    """Run ``fn(out_dir)`` unless cached; wrap failures in StageError."""
    key = stage_key(name, section, seed, inputs)
    hit = cache.hit(name, key)
    if hit is not None:
        log.info("stage %s: cached at %s", name, hit)
        return hit
    d = cache.begin(name, key)
    try:
        extra = fn(d)
    except StageError:
        raise
    except GBASegError as e:
        raise StageError(name, getattr(e, "case", case), e) from e
    cache.commit(d, key, extra)
    return d


# --------------------------------------------------------------------------
# stages (in-memory)


def preprocess_case(case: Case, spacing, crop: int, percentile: float = 75.0) -> Case:
    """Resample, crop around the brain center, normalize to [0, 1]."""
    img = resample(case.image, spacing, "trilinear")
    img, center = brain_center_crop(img, crop, percentile)
    img = normalize_unit(img.with_data(np.clip(img.data, 0, None)))
    mask = None
    if case.mask is not None:
        mask = crop_xy(resample(case.mask, spacing, "nearest"), center, crop)
    return Case(case.case_id, img, mask, case.center, case.modality, dict(case.meta))


def select_centers(cases, centers: str):
    return [c for c in cases if centers == "both" or c.center == centers]


def train_i2i(source: list[Case], target: list[Case], cfg: PipelineConfig, size: int) -> TranslationModel:
    icfg = cfg.i2i
    src = select_centers(source, icfg.centers)
    tgt = select_centers(target, icfg.centers)
    arch = I2IArch(ngf=icfg.ngf, ndf=icfg.ndf, n_blocks=icfg.n_blocks, input_size=size)
    conf = I2IConfig(
        epochs=icfg.epochs, lr=icfg.lr, batch_size=icfg.batch_size, mu_cyc=icfg.mu_cyc, seed=cfg.seed, arch=arch
    )
    return train_cyclegan(volume_slices([c.image for c in src]), volume_slices([c.image for c in tgt]), conf)


def translate_image(model: TranslationModel, vol: Volume, cfg: PipelineConfig) -> Volume:
    """Source -> pseudo-target, optionally deblurred, clipped to [0, 1]."""
    out = translate_volume(model, vol, "s2t")
    tcfg = cfg.translate
    if tcfg.deconvolve and tcfg.iterations > 0:
        out = van_cittert_deconvolve(out, PointSpreadFunction(tuple(tcfg.psf_sigma_mm)), tcfg.iterations, tcfg.relaxation)
    return out.with_data(np.clip(out.data, 0.0, 1.0))


def translate_case(model: TranslationModel, case: Case, cfg: PipelineConfig) -> Case:
    out = translate_image(model, case.image, cfg)
    return Case(case.case_id, out, case.mask, case.center, "pseudo_target", dict(case.meta))


def load_rules(cfg: PipelineConfig):
    return gba_mod.load_rules(cfg.gba.rules) if cfg.gba.rules else gba_mod.default_rules()


def central_tumor_slice(mask: Mask) -> int:
    zs = tumor_slices(mask)
    return int(zs[len(zs) // 2])


def case_seed(seed: int, case_id: str) -> int:
    return seed * 1_000_003 + zlib.crc32(case_id.encode()) % 1_000_003


def singan_config(cfg: PipelineConfig, seed: int) -> SinGANConfig:
    s = cfg.singan
    r = s.r if s.r is not None else default_ratio()
    return SinGANConfig(r=r, min_size=s.min_size, steps_per_scale=s.steps_per_scale, lr=s.lr, nfc=s.nfc, seed=seed)


def selected_cases(cases: list[Case], rules) -> list[tuple[Case, object]]:
    out = []
    for c in cases:
        st = tumor_stats(c.image, c.mask)
        if gba_mod.select_rule(st, c.center, rules) is not None:
            out.append((c, st))
    return out


def train_singans(cases: list[Case], rules, cfg: PipelineConfig) -> dict[str, SinGANModel]:
    """One model per rule-matching case, trained on its central tumor slice."""
    models = {}
    for c, _ in selected_cases(cases, rules):
        z = central_tumor_slice(c.mask)
        try:
            models[c.case_id] = train_singan(c.image.data[:, :, z], singan_config(cfg, case_seed(cfg.seed, c.case_id)))
        except GBASegError as e:
            raise StageError("train-singan", c.case_id, e) from e
    return models


def augment(cases: list[Case], rules, models, cfg: PipelineConfig) -> gba_mod.PolicyOutput:
    g = cfg.gba
    if g.method == "none":
        return gba_mod.PolicyOutput(list(cases), [], [])
    dataset = [(c, tumor_stats(c.image, c.mask)) for c in cases]
    wcfg = WeightMaskConfig(g.dilation_radius, g.sigma_xy)
    return gba_mod.apply_policy(dataset, rules, models, g.method, wcfg)


def seg_factory(cfg: PipelineConfig):
    s = cfg.selftrain

    def factory(iteration, epochs):
        return UNetSegmenter(
            SegConfig(
                folds=s.folds,
                epochs=s.epochs if epochs is None else epochs,
                iters_per_epoch=s.iters_per_epoch,
                batch_size=s.batch_size,
                lr=s.lr,
                base=s.base,
                dims=s.dims,
                seed=cfg.seed * 100 + iteration,
            )
        )

    return factory


def selftrain_config(cfg: PipelineConfig) -> SelfTrainConfig:
    s = cfg.selftrain
    return SelfTrainConfig(s.max_iters, s.eps, s.failure_gate, s.iter_epochs, s.final_epochs, cfg.evaluate.threshold)


def evaluate(seg, cases: list[Case], threshold: float = 0.5, out_dir=None, fmt="nifti") -> list[CaseScore]:
    """Score ``seg`` on labeled cases; predictions are stored when ``out_dir`` is given."""
    scores = []
    for c in cases:
        pred = largest_connected_component(seg.predict(c.image), threshold)
        if out_dir is not None:
            save_volume(pred, Path(out_dir) / "predictions" / c.case_id, fmt)
        scores.append(score_case(c.case_id, pred, c.mask))
    if out_dir is not None:
        write_scores_csv(scores, Path(out_dir) / "scores.csv")
        summary_json(scores, Path(out_dir) / "summary.json")
    return scores


# --------------------------------------------------------------------------
# report


@dataclass
class ExperimentReport:
    setting: str
    seed: int
    scores: dict  # iteration -> list[CaseScore]
    status: str = "ok"
    selftrain: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)  # name -> sha256
    plots: list = field(default_factory=list)
    augmentation: dict = field(default_factory=dict)

    @property
    def iterations(self) -> list[int]:
        return sorted(self.scores)

    @property
    def final_iteration(self) -> int:
        return self.iterations[-1]

    def mean_dice(self, iteration: int | None = None) -> float:
        it = self.final_iteration if iteration is None else iteration
        return float(np.mean([s.dice for s in self.scores[it]]))

    def summaries(self) -> dict:
        return {it: summary_json(self.scores[it]) for it in self.iterations}

    def to_dict(self) -> dict:
        return {
            "setting": self.setting,
            "seed": self.seed,
            "status": self.status,
            "scores": {str(it): [asdict(s) for s in sc] for it, sc in self.scores.items()},
            "summaries": {str(k): v for k, v in self.summaries().items()},
            "selftrain": self.selftrain,
            "artifacts": self.artifacts,
            "plots": self.plots,
            "augmentation": self.augmentation,
        }

    def save(self, path) -> Path:
        return dump_json(self.to_dict(), path)

    @classmethod
    def load(cls, path) -> "ExperimentReport":
        d = json.loads(Path(path).read_text())
        scores = {
            int(it): [CaseScore(**{**s, "assd": math.nan if s["assd"] is None else s["assd"]}) for s in sc]
            for it, sc in d["scores"].items()
        }
        return cls(d["setting"], d["seed"], scores, d["status"], d["selftrain"], d["artifacts"], d["plots"], d.get("augmentation", {}))


def _fmt(values) -> str:
    v = np.asarray([x for x in values if not math.isnan(x)])
    return "n/a" if v.size == 0 else f"{v.mean():.3f} ± {v.std():.3f}"


def comparison_table(reports: dict[str, ExperimentReport], metric: str = "dice") -> str:
    """Markdown table: one row per self-training iteration, one column per setting."""
    names = list(reports)
    iters = sorted({it for r in reports.values() for it in r.iterations})
    lines = ["| iteration | " + " | ".join(names) + " |", "|---" * (len(names) + 1) + "|"]
    for it in iters:
        cells = []
        for n in names:
            sc = reports[n].scores.get(it)
            cells.append(_fmt([getattr(s, metric) for s in sc]) if sc else "")
        lines.append(f"| {it} | " + " | ".join(cells) + " |")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# directory-level stages (CLI and run_pipeline share these)


def ensure_benchmark(cfg: PipelineConfig) -> Path:
    """Generate the phantom benchmark into ``paths.data`` unless it exists."""
    root = Path(cfg.paths.data)
    if (root / "benchmark_manifest.json").exists():
        return root
    p = cfg.phantom
    base = PhantomParams(shape=tuple(p.shape), spacing=tuple(p.spacing))
    shift = CenterShift()

    def split(n, offset):
        nb = int(round(n * p.frac_b))
        return make_benchmark(n - nb, nb, shift, base, seed=cfg.seed * 10 + offset, prefix=["src", "tgt", "val", "test"][offset] + "_")

    emit_benchmark(split(p.n_source, 0), split(p.n_target, 1), root, p.fmt,
                   test=split(p.n_test, 3) if p.n_test else None, val=split(p.n_val, 2) if p.n_val else None)
    return root


def preprocess_dir(in_dir, out_dir, cfg: PipelineConfig, with_masks=True) -> Path:
    pc = cfg.preprocess
    cases = [preprocess_case(c, pc.spacing, pc.crop_xy, pc.percentile) for c in read_cases(in_dir, with_masks)]
    return write_cases(cases, out_dir, cfg.fmt, with_masks)


@dataclass
class PipelineState:
    """Directories of every stage's output for one run."""

    dirs: dict = field(default_factory=dict)


def run_pipeline(cfg: PipelineConfig, cache: bool = True, stop_after: str | None = None) -> ExperimentReport:
    """preprocess -> train-i2i -> translate -> train-singan -> augment -> selftrain -> evaluate."""
    out = Path(cfg.paths.out)
    sc = StageCache(out / "stages", cache)
    data = ensure_benchmark(cfg)
    d = cfg.to_dict()
    seed = cfg.seed
    dirs = {}

    # preprocess: every split
    splits = [s for s in ("source_train", "target_train", "val", "test") if (data / s / "cases.json").exists()]
    for s in splits:
        dirs[s] = _run_stage(
            sc, f"preprocess-{s}", d["preprocess"] | {"fmt": cfg.fmt}, 0, [dir_digest(data / s)],
            lambda o, s=s: (preprocess_dir(data / s, o, cfg, with_masks=s != "target_train"), None)[1],
        )
    if stop_after == "preprocess":
        return _partial(cfg, "preprocess")

    size = cfg.preprocess.crop_xy

    def do_i2i(o):
        model = train_i2i(read_cases(dirs["source_train"]), read_cases(dirs["target_train"], False), cfg, size)
        model.save(o / "model")
        return {"checksum": model.checksum()}

    dirs["train-i2i"] = _run_stage(
        sc, "train-i2i", d["i2i"] | {"size": size}, seed, [dir_digest(dirs["source_train"]), dir_digest(dirs["target_train"])], do_i2i
    )
    if stop_after == "train-i2i":
        return _partial(cfg, "train-i2i")

    def do_translate(o):
        model = TranslationModel.load(dirs["train-i2i"] / "model")
        cases = []
        for c in read_cases(dirs["source_train"]):
            try:
                cases.append(translate_case(model, c, cfg))
            except GBASegError as e:
                raise StageError("translate", c.case_id, e) from e
        write_cases(cases, o, cfg.fmt)
        return None

    dirs["translate"] = _run_stage(
        sc, "translate", d["translate"] | {"fmt": cfg.fmt}, seed,
        [dir_digest(dirs["train-i2i"]), dir_digest(dirs["source_train"])], do_translate,
    )
    if stop_after == "translate":
        return _partial(cfg, "translate")

    rules = load_rules(cfg)
    rules_blob = [asdict(r) for r in rules]
    pseudo = read_cases(dirs["translate"])
    need_models = cfg.gba.method == "gba"

    def do_singan(o):
        models = train_singans(pseudo, rules, cfg)
        for cid, m in models.items():
            m.save(o / "models" / cid)
        return {"cases": sorted(models)}

    if need_models:
        dirs["train-singan"] = _run_stage(
            sc, "train-singan", d["singan"] | {"rules": rules_blob}, seed, [dir_digest(dirs["translate"])], do_singan
        )
    if stop_after == "train-singan":
        return _partial(cfg, "train-singan")

    def do_augment(o):
        models = {}
        if need_models:
            mdir = dirs["train-singan"] / "models"
            models = {p.name: SinGANModel.load(p) for p in sorted(mdir.iterdir())} if mdir.exists() else {}
        res = augment(pseudo, rules, models, cfg)
        write_cases([c for c, _ in res.augmented], o, cfg.fmt, extra={"provenance": res.manifest()})
        return {"n_augmented": len(res.augmented)}

    aug_inputs = [dir_digest(dirs["translate"])] + ([dir_digest(dirs["train-singan"])] if need_models else [])
    dirs["augment"] = _run_stage(sc, "augment", d["gba"] | {"rules": rules_blob}, seed, aug_inputs, do_augment)
    if stop_after == "augment":
        return _partial(cfg, "augment")

    def do_selftrain(o):
        initial = read_cases(dirs["translate"]) + read_cases(dirs["augment"])
        targets = read_cases(dirs["target_train"], False)
        val = read_cases(dirs["val"]) if "val" in dirs else None
        _, state = self_train_loop(initial, targets, val, selftrain_config(cfg), seg_factory(cfg), run_dir=o, fmt=cfg.fmt)
        return {"status": state.status, "iteration": state.iteration}

    st_inputs = [dir_digest(dirs["translate"]), dir_digest(dirs["augment"]), dir_digest(dirs["target_train"])]
    if "val" in dirs:
        st_inputs.append(dir_digest(dirs["val"]))
    dirs["selftrain"] = _run_stage(sc, "selftrain", d["selftrain"] | {"threshold": cfg.evaluate.threshold}, seed, st_inputs, do_selftrain)
    manifest = json.loads((dirs["selftrain"] / "run_manifest.json").read_text())
    if stop_after == "selftrain":
        return _partial(cfg, "selftrain")

    iters = sorted(int(p.name.split("_")[1]) for p in dirs["selftrain"].glob("iter_*"))
    if not cfg.evaluate.all_iterations:
        iters = iters[-1:]

    def do_evaluate(o):
        test = read_cases(dirs["test"])
        for it in iters:
            seg = UNetSegmenter.load(dirs["selftrain"] / f"iter_{it}" / "model")
            evaluate(seg, test, cfg.evaluate.threshold, o / f"iter_{it}", cfg.fmt)
        return {"iterations": iters}

    dirs["evaluate"] = _run_stage(
        sc, "evaluate", d["evaluate"], seed, [dir_digest(dirs["selftrain"]), dir_digest(dirs["test"])], do_evaluate
    )

    scores, artifacts = {}, {}
    from .metrics import read_scores_csv

    for it in iters:
        it_dir = dirs["evaluate"] / f"iter_{it}"
        scores[it] = read_scores_csv(it_dir / "scores.csv")
        artifacts[f"predictions/iter_{it}"] = dir_digest(it_dir / "predictions")
    for name in ("train-i2i", "translate", "train-singan", "augment", "selftrain"):
        if name in dirs:
            artifacts[name] = dir_digest(dirs[name])
    aug_manifest = json.loads((dirs["augment"] / "cases.json").read_text()).get("provenance", {})
    report = ExperimentReport(
        cfg.gba.method, seed, scores, manifest["status"], manifest, artifacts,
        augmentation={"n": len(aug_manifest.get("augmentations", [])), "records": aug_manifest.get("records", [])},
    )
    report.save(out / f"report_{cfg.gba.method}.json")
    dump_json({k: str(v) for k, v in dirs.items()}, out / f"stage_dirs_{cfg.gba.method}.json")
    return report


def _partial(cfg, stage) -> ExperimentReport:
    return ExperimentReport(cfg.gba.method, cfg.seed, {}, status=f"stopped_after_{stage}")


def compare_settings(cfg: PipelineConfig, settings=("none", "naive", "gba"), selftrain_for=("gba",)) -> dict:
    """Run one pipeline per augmentation setting on shared upstream stages.

    Settings not in ``selftrain_for`` stop after the teacher.
    """
    reports = {}
    for s in settings:
        sub = cfg.replace(gba={"method": s})
        if s not in selftrain_for:
            sub.selftrain.max_iters = 0
        reports[s] = run_pipeline(sub)
    out = Path(cfg.paths.out)
    (out / "comparison_dice.md").write_text(comparison_table(reports, "dice") + "\n")
    (out / "comparison_assd.md").write_text(comparison_table(reports, "assd") + "\n")
    return reports
