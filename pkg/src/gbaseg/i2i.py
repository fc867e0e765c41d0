"""Unpaired slice-level image-to-image translation (CycleGAN).

Volumes live in [0, 1]; the networks see ``2x - 1`` and emit tanh outputs in
[-1, 1], which are mapped back with ``(y + 1) / 2``.

Loss conventions. ``adversarial_loss`` is the value function

    E[log D(real)] + E[log(1 - D(G(x)))]

which the discriminator maximizes. Training minimizes its negation for D and
uses the non-saturating ``-E[log D(G(x))]`` for G.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgumentError, NumericalDivergenceError
from .volumes import Volume

log = logging.getLogger(__name__)

EPS = 1e-7


@dataclass
class I2IArch:
    ngf: int = 16
    ndf: int = 16
    n_down: int = 1
    n_blocks: int = 2
    norm: str = "instance"
    input_size: int = 64


@dataclass
class I2IConfig:
    epochs: int = 50
    lr: float = 2e-4
    beta1: float = 0.5
    batch_size: int = 8
    mu_cyc: float = 10.0
    seed: int = 0
    arch: I2IArch = field(default_factory=I2IArch)
    log_every: int = 1

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        arch = I2IArch(**d.pop("arch", {}))
        return cls(arch=arch, **d)


def _norm(kind, ch):
    if kind == "instance":
        return nn.InstanceNorm2d(ch, affine=True)
    if kind == "batch":
        return nn.BatchNorm2d(ch)
    return nn.Identity()


class ResBlock(nn.Module):
    def __init__(self, ch, norm):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), _norm(norm, ch), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), _norm(norm, ch),
        )

    def forward(self, x):
        return x + self.body(x)


class ResnetGenerator(nn.Module):
    """Reduced ResNet-style generator: stem, ``n_down`` strided convs, residual blocks, mirror."""

    def __init__(self, ngf=16, n_down=1, n_blocks=2, norm="instance"):
        super().__init__()
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(1, ngf, 7), _norm(norm, ngf), nn.ReLU(True)]
        ch = ngf
        for _ in range(n_down):
            layers += [nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1), _norm(norm, ch * 2), nn.ReLU(True)]
            ch *= 2
        layers += [ResBlock(ch, norm) for _ in range(n_blocks)]
        for _ in range(n_down):
            layers += [
                nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1),
                _norm(norm, ch // 2),
                nn.ReLU(True),
            ]
            ch //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(ch, 1, 7), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class PatchDiscriminator(nn.Module):
    """3-layer PatchGAN; returns per-patch logits."""

    def __init__(self, ndf=16, norm="instance"):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, ndf, 4, stride=2, padding=1), nn.LeakyReLU(0.2, True),
            nn.Conv2d(ndf, ndf * 2, 4, stride=2, padding=1), _norm(norm, ndf * 2), nn.LeakyReLU(0.2, True),
            nn.Conv2d(ndf * 2, ndf * 4, 4, stride=1, padding=1), _norm(norm, ndf * 4), nn.LeakyReLU(0.2, True),
            nn.Conv2d(ndf * 4, 1, 4, stride=1, padding=1),
        )

    def forward(self, x):
        return self.net(x)


@dataclass
class SliceBatch:
    """A stack of 2D slices ``(N, 1, H, W)`` in network range [-1, 1]."""

    images: torch.Tensor
    domain: str = "source"
    case_ids: tuple = ()
    batch_id: int = 0

    @classmethod
    def from_unit(cls, slices, domain="source", case_ids=(), batch_id=0, dtype=torch.float32):
        arr = torch.as_tensor(np.asarray(slices), dtype=dtype)
        if arr.ndim == 3:
            arr = arr[:, None]
        return cls(arr * 2 - 1, domain, tuple(case_ids), batch_id)


def _tensor(x):
    return x.images if isinstance(x, SliceBatch) else x


def _batch_id(*xs):
    for x in xs:
        if isinstance(x, SliceBatch):
            return x.batch_id
    return None


@dataclass
class TranslationModel:
    gen_s2t: nn.Module
    gen_t2s: nn.Module
    disc_s: nn.Module
    disc_t: nn.Module
    mu_cyc: float = 10.0
    arch: I2IArch = field(default_factory=I2IArch)
    seed: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.mu_cyc < 0:
            raise InvalidArgumentError("mu_cyc must be >= 0")

    @classmethod
    def init(cls, arch: I2IArch, mu_cyc=10.0, seed=0):
        torch.manual_seed(seed)
        g = lambda: ResnetGenerator(arch.ngf, arch.n_down, arch.n_blocks, arch.norm)  # noqa: E731
        d = lambda: PatchDiscriminator(arch.ndf, arch.norm)  # noqa: E731
        model = cls(g(), g(), d(), d(), mu_cyc, arch, seed)
        for m in model.modules():
            m.apply(_init_weights)
        return model

    def modules(self):
        return [self.gen_s2t, self.gen_t2s, self.disc_s, self.disc_t]

    def generator(self, direction):
        if direction == "s2t":
            return self.gen_s2t
        if direction == "t2s":
            return self.gen_t2s
        raise InvalidArgumentError(f"direction must be 's2t' or 't2s', got {direction!r}")

    def state_dict(self):
        return {
            "gen_s2t": self.gen_s2t.state_dict(),
            "gen_t2s": self.gen_t2s.state_dict(),
            "disc_s": self.disc_s.state_dict(),
            "disc_t": self.disc_t.state_dict(),
        }

    def checksum(self) -> str:
        from .io import checksum_array

        arrays = [v.detach().cpu().numpy() for sd in self.state_dict().values() for v in sd.values()]
        return checksum_array(*arrays)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict(), directory / "params.pt")
        manifest = {
            "arch": asdict(self.arch),
            "mu_cyc": self.mu_cyc,
            "seed": self.seed,
            "epoch": self.epoch,
            "checksum": self.checksum(),
            "loss_history": self.history,
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
        return directory

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        model = cls.init(I2IArch(**manifest["arch"]), manifest["mu_cyc"], manifest["seed"])
        state = torch.load(directory / "params.pt", weights_only=True)
        for name, module in zip(("gen_s2t", "gen_t2s", "disc_s", "disc_t"), model.modules()):
            module.load_state_dict(state[name])
        model.epoch = manifest["epoch"]
        model.history = manifest["loss_history"]
        return model


def _init_weights(m):
    if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(m.weight, 0.0, 0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, (nn.InstanceNorm2d, nn.BatchNorm2d)) and m.weight is not None:
        nn.init.normal_(m.weight, 1.0, 0.02)
        nn.init.zeros_(m.bias)


# --------------------------------------------------------------------------
# losses


def _disc_prob(disc, x, which, batch_id):
    logits = disc(x)
    if not torch.isfinite(logits).all():
        raise NumericalDivergenceError(f"non-finite discriminator activations on {which} (batch {batch_id})")
    return torch.sigmoid(logits).clamp(EPS, 1 - EPS)


def adversarial_loss(gen_out, disc, real) -> torch.Tensor:
    """E[log D(real)] + E[log(1 - D(fake))], D outputs clamped to (eps, 1-eps)."""
    bid = _batch_id(gen_out, real)
    fake = _tensor(gen_out)
    if not torch.isfinite(fake).all():
        raise NumericalDivergenceError(f"non-finite generator output (batch {bid})")
    p_real = _disc_prob(disc, _tensor(real), "real", bid)
    p_fake = _disc_prob(disc, fake, "fake", bid)
    return torch.log(p_real).mean() + torch.log(1 - p_fake).mean()


def cycle_loss(model: TranslationModel, src, tgt) -> torch.Tensor:
    xs, xt = _tensor(src), _tensor(tgt)
    rec_s = model.gen_t2s(model.gen_s2t(xs))
    rec_t = model.gen_s2t(model.gen_t2s(xt))
    loss = (rec_s - xs).abs().mean() + (rec_t - xt).abs().mean()
    if not torch.isfinite(loss):
        raise NumericalDivergenceError(f"non-finite cycle loss (batch {_batch_id(src, tgt)})")
    return loss


def full_objective(model: TranslationModel, src, tgt):
    """Returns ``(total, {"adv_s2t", "adv_t2s", "cyc"})`` as tensors."""
    xs, xt = _tensor(src), _tensor(tgt)
    bid = _batch_id(src, tgt)
    fake_t = SliceBatch(model.gen_s2t(xs), "target", batch_id=bid or 0)
    fake_s = SliceBatch(model.gen_t2s(xt), "source", batch_id=bid or 0)
    adv_s2t = adversarial_loss(fake_t, model.disc_t, xt)
    adv_t2s = adversarial_loss(fake_s, model.disc_s, xs)
    cyc = cycle_loss(model, src, tgt)
    total = adv_s2t + adv_t2s + model.mu_cyc * cyc
    return total, {"adv_s2t": adv_s2t, "adv_t2s": adv_t2s, "cyc": cyc}


# --------------------------------------------------------------------------
# training


def _bce_logits(logits, target: float):
    return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, target))


def _as_slices(x) -> torch.Tensor:
    """Accept an (N,H,W) array in [0,1] or a SliceBatch; return (N,1,H,W) in [-1,1]."""
    if isinstance(x, SliceBatch):
        return x.images.float()
    return SliceBatch.from_unit(x).images


def train_cyclegan(src_slices, tgt_slices, config: I2IConfig | None = None, model=None) -> TranslationModel:
    """Alternating generator / discriminator updates; deterministic for a seed."""
    cfg = config or I2IConfig()
    xs, xt = _as_slices(src_slices), _as_slices(tgt_slices)
    if len(xs) == 0 or len(xt) == 0:
        raise InvalidArgumentError("both domains need at least one slice")
    if model is None:
        model = TranslationModel.init(cfg.arch, cfg.mu_cyc, cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    opt_g = torch.optim.Adam(
        list(model.gen_s2t.parameters()) + list(model.gen_t2s.parameters()), lr=cfg.lr, betas=(cfg.beta1, 0.999)
    )
    opt_d = torch.optim.Adam(
        list(model.disc_s.parameters()) + list(model.disc_t.parameters()), lr=cfg.lr, betas=(cfg.beta1, 0.999)
    )
    n = max(len(xs), len(xt))
    steps = max(1, n // cfg.batch_size)
    for epoch in range(cfg.epochs):
        perm_s = torch.randperm(len(xs), generator=gen)
        perm_t = torch.randperm(len(xt), generator=gen)
        acc = {"g": 0.0, "d": 0.0, "adv_s2t": 0.0, "adv_t2s": 0.0, "cyc": 0.0}
        for step in range(steps):
            idx = torch.arange(step * cfg.batch_size, (step + 1) * cfg.batch_size)
            s = xs[perm_s[idx % len(xs)]]
            t = xt[perm_t[idx % len(xt)]]

            fake_t = model.gen_s2t(s)
            fake_s = model.gen_t2s(t)
            cyc = (model.gen_t2s(fake_t) - s).abs().mean() + (model.gen_s2t(fake_s) - t).abs().mean()
            loss_g = (
                _bce_logits(model.disc_t(fake_t), 1.0)
                + _bce_logits(model.disc_s(fake_s), 1.0)
                + model.mu_cyc * cyc
            )
            opt_g.zero_grad(set_to_none=True)
            loss_g.backward()
            opt_g.step()

            loss_d = 0.5 * (
                _bce_logits(model.disc_t(t), 1.0)
                + _bce_logits(model.disc_t(fake_t.detach()), 0.0)
                + _bce_logits(model.disc_s(s), 1.0)
                + _bce_logits(model.disc_s(fake_s.detach()), 0.0)
            )
            opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            opt_d.step()

            if not (torch.isfinite(loss_g) and torch.isfinite(loss_d)):
                raise NumericalDivergenceError(
                    f"non-finite CycleGAN loss at epoch {epoch}, step {step}", history=model.history
                )
            acc["g"] += loss_g.item()
            acc["d"] += loss_d.item()
            acc["cyc"] += cyc.item()
        with torch.no_grad():
            b = min(cfg.batch_size, len(xs), len(xt))
            _, comps = full_objective(model, SliceBatch(xs[:b], batch_id=epoch), SliceBatch(xt[:b], "target", batch_id=epoch))
        entry = {
            "epoch": epoch + 1,
            "loss_g": acc["g"] / steps,
            "loss_d": acc["d"] / steps,
            "cyc_train": acc["cyc"] / steps,
            **{k: float(v) for k, v in comps.items()},
        }
        if not all(np.isfinite(v) for v in entry.values()):
            raise NumericalDivergenceError(f"non-finite loss component at epoch {epoch + 1}", history=model.history)
        model.history.append(entry)
        model.epoch = epoch + 1
        if cfg.log_every and (epoch + 1) % cfg.log_every == 0:
            log.debug("cyclegan epoch %d: %s", epoch + 1, entry)
    return model


# --------------------------------------------------------------------------
# inference


@torch.no_grad()
def translate_slices(model: TranslationModel, slices: np.ndarray, direction="s2t", batch_size=16) -> np.ndarray:
    """Translate an (N, H, W) stack of [0,1] slices; output has the same shape."""
    g = model.generator(direction)
    was_training = g.training
    g.eval()
    try:
        slices = np.asarray(slices, dtype=np.float32)
        n, h, w = slices.shape
        size = model.arch.input_size
        out = np.empty_like(slices)
        for i in range(0, n, batch_size):
            x = torch.from_numpy(slices[i : i + batch_size])[:, None] * 2 - 1
            resized = (h, w) != (size, size)
            if resized:
                x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
            y = g(x)
            if resized:
                y = F.interpolate(y, size=(h, w), mode="bilinear", align_corners=False)
            out[i : i + batch_size] = ((y[:, 0] + 1) / 2).clamp(0, 1).numpy()
        return out
    finally:
        g.train(was_training)


def translate_volume(model: TranslationModel, vol: Volume, direction: str = "s2t") -> Volume:
    """Axial slice-wise generator inference; spacing, origin and shape are preserved."""
    data = np.asarray(vol.data)
    if data.ndim != 3 or min(data.shape[:2]) < 4:
        raise InvalidArgumentError(f"cannot translate a volume of shape {data.shape}")
    slices = np.moveaxis(data, 2, 0)
    out = translate_slices(model, slices, direction)
    return vol.with_data(np.moveaxis(out, 0, 2).astype(np.float64))


def volume_slices(volumes, only_nonzero: bool = True) -> np.ndarray:
    """Stack the axial slices of several volumes into an (N, H, W) array."""
    out = []
    for v in volumes:
        for z in range(v.shape[2]):
            s = v.data[:, :, z]
            if only_nonzero and not np.any(s > 0):
                continue
            out.append(s)
    return np.stack(out).astype(np.float32)


def clone(model: TranslationModel) -> TranslationModel:
    return copy.deepcopy(model)
