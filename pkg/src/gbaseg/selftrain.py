"""Teacher-student self-training with a compact reference U-Net.

The loop:

* iteration 0 fits a teacher on the (augmented) pseudo-target images with
  their real labels;
* every later iteration predicts pseudo-labels for the unlabeled targets with
  the previous model, then fits a fresh student on the union of the initial
  set and the pseudo-labeled targets;
* it stops once the validation Dice moves by less than ``eps``, or after
  ``max_iters`` students. A teacher at or below ``failure_gate`` stops the loop.
"""
from __future__ import annotations

import abc
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .errors import InvalidArgumentError
from .io import Case, checksum_array, dump_json, save_volume
from .metrics import dice, largest_connected_component
from .volumes import Mask, Volume, resample

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# augmentation stack


def _affine_inplane(arr, matrix2, order):
    """Apply a 2x2 in-plane linear map about the slice center to axes (0, 1)."""
    h, w = arr.shape[:2]
    c = np.array([(h - 1) / 2, (w - 1) / 2])
    full = np.eye(arr.ndim)
    full[:2, :2] = matrix2
    offset = np.zeros(arr.ndim)
    offset[:2] = c - matrix2 @ c
    return ndimage.affine_transform(arr, full, offset=offset, order=order, mode="constant", cval=0.0)


@dataclass
class Transform:
    p: float
    geometric: bool = False

    def sample(self, rng):
        raise NotImplementedError

    def apply_image(self, img, params):
        return img

    def apply_mask(self, mask, params):
        return mask


@dataclass
class Rotation(Transform):
    p: float = 0.2
    max_deg: float = 15.0
    geometric: bool = True

    def sample(self, rng):
        return {"deg": float(rng.uniform(-self.max_deg, self.max_deg))}

    def _m(self, params):
        a = np.deg2rad(params["deg"])
        return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])

    def apply_image(self, img, params):
        return _affine_inplane(img, self._m(params), 1)

    def apply_mask(self, mask, params):
        return _affine_inplane(mask, self._m(params), 0)


@dataclass
class Scaling(Transform):
    p: float = 0.2
    lo: float = 0.85
    hi: float = 1.25
    geometric: bool = True

    def sample(self, rng):
        return {"factor": float(rng.uniform(self.lo, self.hi))}

    def apply_image(self, img, params):
        return _affine_inplane(img, np.eye(2) / params["factor"], 1)

    def apply_mask(self, mask, params):
        return _affine_inplane(mask, np.eye(2) / params["factor"], 0)


@dataclass
class Mirror(Transform):
    p: float = 0.5
    geometric: bool = True

    def sample(self, rng):
        return {"axes": [int(a) for a in (0, 1) if rng.random() < 0.5]}

    def apply_image(self, img, params):
        for a in params["axes"]:
            img = np.flip(img, axis=a)
        return np.ascontiguousarray(img)

    apply_mask = apply_image


@dataclass
class GaussianNoise(Transform):
    p: float = 0.1
    max_var: float = 0.1

    def sample(self, rng):
        return {"var": float(rng.uniform(0, self.max_var)), "seed": int(rng.integers(2**31))}

    def apply_image(self, img, params):
        noise = np.random.default_rng(params["seed"]).standard_normal(img.shape)
        return img + math.sqrt(params["var"]) * noise


@dataclass
class GaussianBlur(Transform):
    p: float = 0.2
    lo: float = 0.5
    hi: float = 1.0

    def sample(self, rng):
        return {"sigma": float(rng.uniform(self.lo, self.hi))}

    def apply_image(self, img, params):
        sig = [params["sigma"]] * 2 + [0] * (img.ndim - 2)
        return ndimage.gaussian_filter(img, sig, mode="reflect")


@dataclass
class Brightness(Transform):
    p: float = 0.15
    lo: float = 0.75
    hi: float = 1.25

    def sample(self, rng):
        return {"factor": float(rng.uniform(self.lo, self.hi))}

    def apply_image(self, img, params):
        return img * params["factor"]


@dataclass
class Contrast(Transform):
    p: float = 0.15
    lo: float = 0.75
    hi: float = 1.25

    def sample(self, rng):
        return {"factor": float(rng.uniform(self.lo, self.hi))}

    def apply_image(self, img, params):
        m, lo, hi = img.mean(), img.min(), img.max()
        return np.clip((img - m) * params["factor"] + m, lo, hi)


@dataclass
class SimulateLowRes(Transform):
    """Aliasing: nearest-neighbour downsampling followed by linear upsampling."""

    p: float = 0.25
    lo: float = 0.5
    hi: float = 1.0

    def sample(self, rng):
        return {"zoom": float(rng.uniform(self.lo, self.hi))}

    def apply_image(self, img, params):
        z = params["zoom"]
        factors = [z, z] + [1] * (img.ndim - 2)
        small = ndimage.zoom(img, factors, order=0)
        back = [n / s for n, s in zip(img.shape, small.shape)]
        up = ndimage.zoom(small, back, order=1)
        out = np.zeros_like(img)
        sl = tuple(slice(0, min(a, b)) for a, b in zip(img.shape, up.shape))
        out[sl] = up[sl]
        return out


@dataclass
class Gamma(Transform):
    p: float = 0.3
    lo: float = 0.7
    hi: float = 1.5

    def sample(self, rng):
        return {"gamma": float(rng.uniform(self.lo, self.hi))}

    def apply_image(self, img, params):
        lo, hi = img.min(), img.max()
        rng_ = hi - lo
        if rng_ <= 0:
            return img
        return ((img - lo) / rng_) ** params["gamma"] * rng_ + lo


def default_stack() -> list[Transform]:
    return [
        Rotation(), Scaling(), GaussianNoise(), GaussianBlur(), Brightness(), Contrast(),
        SimulateLowRes(), Gamma(), Mirror(),
    ]


@dataclass
class AugmentationStack:
    transforms: list = field(default_factory=default_stack)

    def __call__(self, image, mask, rng):
        """Returns ``(image, mask, record)``; ``record`` replays the draw."""
        record = []
        for i, t in enumerate(self.transforms):
            if rng.random() >= t.p:
                continue
            params = t.sample(rng)
            image = t.apply_image(image, params)
            if t.geometric and mask is not None:
                mask = t.apply_mask(mask, params)
            record.append((i, params))
        return image, mask, record

    def replay_mask(self, mask, record):
        for i, params in record:
            t = self.transforms[i]
            if t.geometric:
                mask = t.apply_mask(mask, params)
        return mask


# --------------------------------------------------------------------------
# reference U-Net


def _conv(dims):
    return nn.Conv2d if dims == 2 else nn.Conv3d


def _inorm(dims):
    return nn.InstanceNorm2d if dims == 2 else nn.InstanceNorm3d


class _Double(nn.Sequential):
    def __init__(self, dims, cin, cout):
        C, N = _conv(dims), _inorm(dims)
        super().__init__(
            C(cin, cout, 3, padding=1), N(cout, affine=True), nn.LeakyReLU(0.01, True),
            C(cout, cout, 3, padding=1), N(cout, affine=True), nn.LeakyReLU(0.01, True),
        )


class UNet(nn.Module):
    """Three-level U-Net with one logit channel."""

    def __init__(self, dims=2, base=8):
        super().__init__()
        self.dims = dims
        C = _conv(dims)
        T = nn.ConvTranspose2d if dims == 2 else nn.ConvTranspose3d
        self.enc1 = _Double(dims, 1, base)
        self.enc2 = _Double(dims, base, base * 2)
        self.bott = _Double(dims, base * 2, base * 4)
        self.pool = nn.MaxPool2d(2) if dims == 2 else nn.MaxPool3d(2)
        self.up2 = T(base * 4, base * 2, 2, stride=2)
        self.dec2 = _Double(dims, base * 4, base * 2)
        self.up1 = T(base * 2, base, 2, stride=2)
        self.dec1 = _Double(dims, base * 2, base)
        self.head = C(base, 1, 1)
        # foreground is rare: start from a low prior so early steps go to shape, not bias
        nn.init.constant_(self.head.bias, -3.0)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        b = self.bott(self.pool(e2))
        d2 = self.dec2(torch.cat([self.up2(b), e2], 1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], 1))
        return self.head(d1)


def _pad4(x: torch.Tensor, spatial: int):
    pads = []
    for n in reversed(x.shape[-spatial:]):
        pads += [0, (-n) % 4]
    return F.pad(x, pads), x.shape[-spatial:]


def zscore(data: np.ndarray) -> np.ndarray:
    """Z-score over nonzero voxels; background stays at zero."""
    inside = data > 0
    if inside.sum() < 2:
        return data.astype(np.float32)
    fg = data[inside]
    return np.where(inside, (data - fg.mean()) / (fg.std() + 1e-8), 0.0).astype(np.float32)


@dataclass
class SegConfig:
    folds: int = 2
    epochs: int = 10
    iters_per_epoch: int = 25
    batch_size: int = 16
    lr: float = 1e-2
    base: int = 8
    dims: int = 2
    fg_fraction: float = 0.5
    augment: bool = True
    seed: int = 0


# --------------------------------------------------------------------------
# segmenter interface


class Segmenter(abc.ABC):
    """fit(cases) trains on labeled cases; predict(volume) returns probabilities in [0, 1]."""

    @abc.abstractmethod
    def fit(self, cases: list[Case]) -> "Segmenter": ...

    @abc.abstractmethod
    def predict(self, vol: Volume) -> Volume: ...

    def checksum(self) -> str:
        return f"{type(self).__name__}:{id(self)}"

    def save(self, directory) -> None:
        Path(directory).mkdir(parents=True, exist_ok=True)
        dump_json({"type": type(self).__name__, "checksum": self.checksum()}, Path(directory) / "manifest.json")


def fold_splits(n_cases: int, folds: int, seed: int) -> list[np.ndarray]:
    """Validation indices per fold, from a seeded permutation."""
    perm = np.random.default_rng(seed).permutation(n_cases)
    return [np.sort(perm[f::folds]) for f in range(folds)]


class UNetSegmenter(Segmenter):
    def __init__(self, config: SegConfig | None = None, stack: AugmentationStack | None = None):
        self.config = config or SegConfig()
        self.stack = stack if stack is not None else AugmentationStack()
        self.models: list[UNet] = []
        self.fold_val_dice: list[float] = []
        self.fold_val_ids: list[list[str]] = []
        self.loss_history: list[list[float]] = []

    # ---- training
    def _new_model(self, fold):
        torch.manual_seed(self.config.seed * 1000 + fold)
        return UNet(self.config.dims, self.config.base)

    def _train_items(self, cases):
        items = []
        for c in cases:
            img = zscore(c.image.data)
            lbl = c.mask.data.astype(np.float32)
            if self.config.dims == 2:
                for z in range(img.shape[2]):
                    items.append((img[:, :, z], lbl[:, :, z]))
            else:
                items.append((img, lbl))
        return items

    def _train_one(self, model, items, fold):
        cfg = self.config
        rng = np.random.default_rng(cfg.seed * 7919 + fold)
        fg = [i for i, (_, m) in enumerate(items) if m.any()]
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
        total = cfg.epochs * cfg.iters_per_epoch
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: (1 - s / max(total, 1)) ** 0.9)
        spatial = cfg.dims
        losses = []
        model.train()
        for step in range(total):
            xs, ys = [], []
            for b in range(cfg.batch_size):
                pool = fg if (fg and rng.random() < cfg.fg_fraction) else None
                idx = int(rng.choice(pool)) if pool else int(rng.integers(len(items)))
                img, lbl = items[idx]
                if cfg.augment:
                    img, lbl, _ = self.stack(img.astype(np.float64), lbl, rng)
                xs.append(np.asarray(img, np.float32))
                ys.append(np.asarray(lbl, np.float32))
            x = torch.from_numpy(np.stack(xs))[:, None]
            y = torch.from_numpy(np.stack(ys))[:, None]
            x, shape = _pad4(x, spatial)
            y, _ = _pad4(y, spatial)
            logits = model(x)
            prob = torch.sigmoid(logits)
            inter = (prob * y).sum()
            soft_dice = 1 - (2 * inter + 1) / (prob.sum() + y.sum() + 1)
            loss = F.binary_cross_entropy_with_logits(logits, y) + soft_dice
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
        model.eval()
        return losses

    def fit(self, cases: list[Case]) -> "UNetSegmenter":
        cfg = self.config
        if len(cases) < cfg.folds:
            raise InvalidArgumentError(f"{len(cases)} cases cannot be split into {cfg.folds} folds")
        if any(c.mask is None for c in cases):
            raise InvalidArgumentError("every training case needs a label")
        self.models, self.fold_val_dice, self.fold_val_ids, self.loss_history = [], [], [], []
        splits = fold_splits(len(cases), cfg.folds, cfg.seed) if cfg.folds > 1 else [np.array([], int)]
        for fold, val_idx in enumerate(splits):
            val_set = set(val_idx.tolist())
            train = [c for i, c in enumerate(cases) if i not in val_set]
            val = [cases[i] for i in val_idx]
            model = self._new_model(fold)
            self.loss_history.append(self._train_one(model, self._train_items(train), fold))
            self.models.append(model)
            self.fold_val_ids.append([c.case_id for c in val])
            if val:
                scores = [dice(largest_connected_component(self._predict_with([model], c.image)), c.mask) for c in val]
                self.fold_val_dice.append(float(np.mean(scores)))
            else:
                self.fold_val_dice.append(math.nan)
        return self

    # ---- inference
    @torch.no_grad()
    def _predict_with(self, models, vol: Volume) -> Volume:
        img = zscore(vol.data)
        probs = np.zeros(vol.shape, np.float64)
        if self.config.dims == 2:
            x = torch.from_numpy(np.moveaxis(img, 2, 0).copy())[:, None]
        else:
            x = torch.from_numpy(img)[None, None]
        xp, shape = _pad4(x, self.config.dims)
        for m in models:
            m.eval()
            p = torch.sigmoid(m(xp))
            p = p[(...,) + tuple(slice(0, n) for n in shape)][:, 0]
            p = p.numpy().astype(np.float64)
            probs += np.moveaxis(p, 0, 2) if self.config.dims == 2 else p[0]
        return vol.with_data(np.clip(probs / len(models), 0.0, 1.0))

    def predict(self, vol: Volume) -> Volume:
        if not self.models:
            self.models = [self._new_model(0)]
        return self._predict_with(self.models, vol)

    @property
    def mean_val_dice(self) -> float:
        vals = [d for d in self.fold_val_dice if not math.isnan(d)]
        return float(np.mean(vals)) if vals else math.nan

    def checksum(self) -> str:
        if not self.models:
            self.models = [self._new_model(0)]
        arrays = [v.numpy() for m in self.models for v in m.state_dict().values()]
        return checksum_array(*arrays)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i, m in enumerate(self.models):
            torch.save(m.state_dict(), directory / f"fold_{i}.pt")
        dump_json(
            {
                "type": "UNetSegmenter",
                "config": asdict(self.config),
                "fold_val_dice": self.fold_val_dice,
                "fold_val_ids": self.fold_val_ids,
                "checksum": self.checksum(),
            },
            directory / "manifest.json",
        )

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        m = json.loads((directory / "manifest.json").read_text())
        seg = cls(SegConfig(**m["config"]))
        seg.fold_val_dice = m["fold_val_dice"]
        seg.fold_val_ids = m["fold_val_ids"]
        n = len(list(directory.glob("fold_*.pt")))
        for i in range(n):
            model = UNet(seg.config.dims, seg.config.base)
            model.load_state_dict(torch.load(directory / f"fold_{i}.pt", weights_only=True))
            model.eval()
            seg.models.append(model)
        return seg


def fit_reference_unet(cases: list[Case], config: SegConfig | None = None, stack=None) -> UNetSegmenter:
    return UNetSegmenter(config, stack).fit(cases)


# --------------------------------------------------------------------------
# pseudo-labels and the loop


def generate_pseudo_labels(seg: Segmenter, targets, threshold: float = 0.5) -> dict[str, Mask]:
    """Predict, threshold and keep the largest component, per target case.

    ``targets`` is a list of Case or a mapping case_id -> Volume. Empty
    predictions come back as empty masks (``mask.empty`` is the flag).
    """
    items = targets.items() if isinstance(targets, dict) else ((c.case_id, c.image) for c in targets)
    out = {}
    for cid, vol in items:
        out[cid] = largest_connected_component(seg.predict(vol), threshold)
        if out[cid].empty:
            log.info("empty pseudo-label for %s", cid)
    return out


def should_stop(history: list[float], eps: float) -> bool:
    """True once the last two validation scores differ by less than ``eps``."""
    return len(history) >= 2 and abs(history[-1] - history[-2]) < eps


def validation_dice(seg: Segmenter, validation: list[Case]) -> tuple[float, list[float]]:
    scores = [dice(largest_connected_component(seg.predict(c.image)), c.mask) for c in validation]
    return float(np.mean(scores)), scores


@dataclass
class SelfTrainConfig:
    max_iters: int = 3
    eps: float = 0.003
    failure_gate: float = 0.4
    iter_epochs: int | None = None
    final_epochs: int | None = None
    threshold: float = 0.5


@dataclass
class SelfTrainState:
    iteration: int = 0
    pseudo_labels: dict = field(default_factory=dict)
    validation_dice_history: list = field(default_factory=list)
    validation_per_case: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    status: str = "running"
    score_source: str = "validation"

    def manifest(self) -> dict:
        return {
            "iteration": self.iteration,
            "status": self.status,
            "score_source": self.score_source,
            "validation_dice_history": self.validation_dice_history,
            "validation_per_case": self.validation_per_case,
            "snapshots": self.snapshots,
            "pseudo_label_empty": {k: bool(m.empty) for k, m in self.pseudo_labels.items()},
        }


def _composition(cases, label_source):
    return [{"case_id": c.case_id, "label": label_source} for c in cases]


def self_train_loop(
    initial_train: list[Case],
    targets: list[Case],
    validation: list[Case] | None,
    config: SelfTrainConfig | None = None,
    segmenter_factory=None,
    run_dir=None,
    resample_hook=None,
    fmt: str = "nifti",
):
    """Run the teacher-student loop; returns ``(segmenter, state)``.

    ``segmenter_factory(iteration, epochs)`` must return a fresh, untrained
    Segmenter. ``epochs`` is ``config.final_epochs`` for the planned last
    iteration and ``config.iter_epochs`` otherwise (None means the
    factory's default). ``resample_hook(cases)``, if given, is applied to the
    target cases before the planned last iteration.
    """
    cfg = config or SelfTrainConfig()
    if not initial_train:
        raise InvalidArgumentError("self-training needs a non-empty initial training set")
    factory = segmenter_factory or (lambda it, ep: UNetSegmenter(SegConfig() if ep is None else SegConfig(epochs=ep)))
    run_dir = Path(run_dir) if run_dir is not None else None
    state = SelfTrainState(score_source="validation" if validation else "pseudo_label_agreement")
    targets = list(targets)

    def epochs_for(it):
        return cfg.final_epochs if it == cfg.max_iters and cfg.final_epochs is not None else cfg.iter_epochs

    def score(seg, it, prev_labels):
        if validation:
            mean, per_case = validation_dice(seg, validation)
            state.validation_per_case.append(per_case)
            return mean
        if prev_labels is None:
            return math.nan
        # no labels anywhere: agreement between this model's labels and the ones it was trained on
        current = generate_pseudo_labels(seg, targets, cfg.threshold)
        return float(np.mean([dice(current[k], prev_labels[k]) for k in prev_labels]))

    def record(it, seg, train_comp, labels_from):
        snap = {
            "iteration": it,
            "model_checksum": seg.checksum(),
            "pseudo_labels_from": labels_from,
            "training_set": train_comp,
            "score": state.validation_dice_history[-1],
        }
        state.snapshots.append(snap)
        if run_dir is not None:
            d = run_dir / f"iter_{it}"
            seg.save(d / "model")
            for cid, m in state.pseudo_labels.items() if it > 0 else ():
                save_volume(m, d / "pseudo_labels" / cid, fmt)
            dump_json(state.manifest(), run_dir / "run_manifest.json")

    seg = factory(0, epochs_for(0))
    seg.fit(list(initial_train))
    state.validation_dice_history.append(score(seg, 0, None))
    record(0, seg, _composition(initial_train, "real"), None)
    teacher_score = state.validation_dice_history[0]
    if not math.isnan(teacher_score) and teacher_score <= cfg.failure_gate:
        state.status = "failure_gate"
        if run_dir is not None:
            dump_json(state.manifest(), run_dir / "run_manifest.json")
        return seg, state

    for it in range(1, cfg.max_iters + 1):
        if it == cfg.max_iters and resample_hook is not None:
            targets = resample_hook(targets)
        prev_checksum = seg.checksum()
        labels = generate_pseudo_labels(seg, targets, cfg.threshold)
        state.pseudo_labels = labels
        pseudo_cases = [
            Case(c.case_id, c.image, labels[c.case_id], c.center, c.modality, {"pseudo_label": True})
            for c in targets
        ]
        train = list(initial_train) + pseudo_cases
        student = factory(it, epochs_for(it))
        student.fit(train)
        seg = student
        state.iteration = it
        state.validation_dice_history.append(score(seg, it, labels))
        record(it, seg, _composition(initial_train, "real") + _composition(pseudo_cases, "pseudo"), prev_checksum)
        if should_stop(state.validation_dice_history, cfg.eps):
            state.status = "converged"
            break
    else:
        state.status = "max_iters" if cfg.max_iters > 0 else "teacher_only"
    if run_dir is not None:
        dump_json(state.manifest(), run_dir / "run_manifest.json")
    return seg, state


def fine_resample_hook(spacing):
    """Factory for a hook that resamples target images to a finer spacing."""

    def hook(cases):
        return [
            Case(c.case_id, resample(c.image, spacing, "trilinear"), None, c.center, c.modality, c.meta)
            for c in cases
        ]

    return hook
