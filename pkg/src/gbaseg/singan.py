"""Single-image multi-scale GAN and the harmonization forward pass.

Scale ``k = 0`` is the full-resolution image and ``k = K`` the coarsest. Each
generator is residual: ``G_k(z, prev) = prev + net(z + prev)``. Training runs
coarse to fine, freezing every finished scale. Images enter the networks in
[-1, 1]; the public API works in [0, 1].
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import InvalidArgumentError, NumericalDivergenceError

log = logging.getLogger(__name__)


@dataclass
class ScaleSchedule:
    r: float
    K: int
    sizes: list  # [(H_k, W_k)] for k = 0..K

    def size(self, k):
        return tuple(self.sizes[k])


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def build_scale_schedule(size, r: float, min_size: int = 25) -> ScaleSchedule:
    """K is the smallest k >= 1 with round(min(H, W) * r**k) <= min_size.

    Rounding is half-up; sides are rounded from the exact product, not chained.
    """
    h, w = (int(s) for s in size)
    if not 0 < r < 1:
        raise InvalidArgumentError(f"scale ratio must lie in (0, 1), got {r}")
    if min(h, w) <= min_size:
        raise InvalidArgumentError(f"image {h}x{w} is not larger than min_size={min_size}")
    k = 1
    while _round_half_up(min(h, w) * r**k) > min_size:
        k += 1
    sizes = [(_round_half_up(h * r**i), _round_half_up(w * r**i)) for i in range(k + 1)]
    return ScaleSchedule(r, k, sizes)


def default_ratio(size: int = 256, K: int = 16, min_size: int = 25) -> float:
    """The ratio that reaches ``min_size`` from ``size`` in exactly ``K`` steps."""
    return (min_size / size) ** (1.0 / K)


def _axis_lerp(n_in, n_out):
    # align_corners=False source coordinates, clamped to the valid range
    pos = (torch.arange(n_out, dtype=torch.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = pos.clamp(0, n_in - 1)
    i0 = pos.floor().long()
    i1 = torch.clamp(i0 + 1, max=n_in - 1)
    w = pos - i0
    return i0, i1, w


def resize_bilinear(x: torch.Tensor, size) -> torch.Tensor:
    """Separable bilinear resize of an (N, C, H, W) tensor.

    Written as ``a + w * (b - a)`` so constant images map to themselves exactly.
    """
    h, w = x.shape[-2:]
    oh, ow = size
    if (h, w) == (oh, ow):
        return x
    i0, i1, wy = _axis_lerp(h, oh)
    a, b = x[..., i0, :], x[..., i1, :]
    x = a + wy.to(x.dtype)[:, None] * (b - a)
    j0, j1, wx = _axis_lerp(w, ow)
    a, b = x[..., j0], x[..., j1]
    return a + wx.to(x.dtype) * (b - a)


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1, padding_mode="reflect"),
            nn.BatchNorm2d(cout, track_running_stats=False),
            nn.LeakyReLU(0.2, inplace=True),
        )


class ScaleGenerator(nn.Module):
    """Five 3x3 conv layers (receptive field 11x11), residual on the upsampled input."""

    def __init__(self, nfc=16):
        super().__init__()
        self.body = nn.Sequential(
            ConvBlock(1, nfc), ConvBlock(nfc, nfc), ConvBlock(nfc, nfc), ConvBlock(nfc, nfc),
            nn.Conv2d(nfc, 1, 3, padding=1, padding_mode="reflect"), nn.Tanh(),
        )

    def forward(self, noise, prev):
        return self.body(noise + prev) + prev


class ScaleDiscriminator(nn.Module):
    """Five 3x3 conv layers, one score per 11x11 patch."""

    def __init__(self, nfc=16):
        super().__init__()
        self.body = nn.Sequential(
            ConvBlock(1, nfc), ConvBlock(nfc, nfc), ConvBlock(nfc, nfc), ConvBlock(nfc, nfc),
            nn.Conv2d(nfc, 1, 3, padding=1, padding_mode="reflect"),
        )

    def forward(self, x):
        return self.body(x)


@dataclass
class SinGANConfig:
    r: float = default_ratio()
    min_size: int = 25
    steps_per_scale: int = 400
    lr: float = 5e-4
    nfc: int = 16
    d_steps: int = 1
    g_steps: int = 1
    rec_weight: float = 10.0
    gp_weight: float = 0.1
    noise_amp_factor: float = 1.0
    lr_decay_at: float = 0.5
    seed: int = 0


@dataclass
class SinGANModel:
    schedule: ScaleSchedule
    generators: list  # index k -> ScaleGenerator
    discriminators: list
    noise_amps: list
    rec_noise: torch.Tensor  # fixed noise at the coarsest scale
    config: SinGANConfig = field(default_factory=SinGANConfig)
    history: dict = field(default_factory=dict)  # k -> list of per-step dicts

    @property
    def K(self):
        return self.schedule.K

    def checksum(self) -> str:
        from .io import checksum_array

        arrays = [p.detach().numpy() for g in self.generators for p in g.state_dict().values()]
        arrays.append(self.rec_noise.numpy())
        arrays.append(np.asarray(self.noise_amps, dtype=np.float64))
        return checksum_array(*arrays)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for k, (g, d) in enumerate(zip(self.generators, self.discriminators)):
            torch.save({"G": g.state_dict(), "D": d.state_dict()}, directory / f"scale_{k:02d}.pt")
        torch.save(self.rec_noise, directory / "rec_noise.pt")
        manifest = {
            "r": self.schedule.r,
            "K": self.schedule.K,
            "sizes": [list(s) for s in self.schedule.sizes],
            "noise_amps": list(map(float, self.noise_amps)),
            "seed": self.config.seed,
            "config": asdict(self.config),
            "checksum": self.checksum(),
            "history": {str(k): v for k, v in self.history.items()},
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
        return directory

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        m = json.loads((directory / "manifest.json").read_text())
        cfg = SinGANConfig(**m["config"])
        sched = ScaleSchedule(m["r"], m["K"], [tuple(s) for s in m["sizes"]])
        gens, discs = [], []
        for k in range(sched.K + 1):
            state = torch.load(directory / f"scale_{k:02d}.pt", weights_only=True)
            g, d = ScaleGenerator(cfg.nfc), ScaleDiscriminator(cfg.nfc)
            g.load_state_dict(state["G"])
            d.load_state_dict(state["D"])
            gens.append(g)
            discs.append(d)
        rec_noise = torch.load(directory / "rec_noise.pt", weights_only=True)
        hist = {int(k): v for k, v in m.get("history", {}).items()}
        return cls(sched, gens, discs, m["noise_amps"], rec_noise, cfg, hist)


def _to_net(img) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(img, dtype=np.float32))
    if t.ndim != 2:
        raise InvalidArgumentError(f"expected a 2D slice, got shape {tuple(t.shape)}")
    return (t * 2 - 1)[None, None]


def _from_net(t: torch.Tensor) -> np.ndarray:
    return ((t[0, 0].clamp(-1, 1) + 1) / 2).detach().numpy().astype(np.float64)


def _init(m):
    if isinstance(m, nn.Conv2d):
        nn.init.normal_(m.weight, 0.0, 0.02)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.BatchNorm2d):
        nn.init.normal_(m.weight, 1.0, 0.02)
        nn.init.zeros_(m.bias)


def _gradient_penalty(disc, real, fake, gen):
    alpha = torch.rand(1, generator=gen).item()
    mix = (alpha * real + (1 - alpha) * fake).requires_grad_(True)
    out = disc(mix)
    (grad,) = torch.autograd.grad(out.sum(), mix, create_graph=True)
    return ((grad.flatten(1).norm(2, dim=1) - 1) ** 2).mean()


def _cascade(model: SinGANModel, start_k: int, stop_k: int, x: torch.Tensor | None, noises=None) -> torch.Tensor:
    """Run generators ``start_k`` down to ``stop_k`` (inclusive).

    ``x`` is the input at scale ``start_k`` (None means zeros). ``noises[k]``
    is added at scale k; missing entries mean zero noise.
    """
    sizes = model.schedule.sizes
    noises = noises or {}
    if x is None:
        x = torch.zeros(1, 1, *sizes[start_k])
    for k in range(start_k, stop_k - 1, -1):
        z = noises.get(k)
        x = model.generators[k](torch.zeros_like(x) if z is None else z, x)
        if k > stop_k:
            x = resize_bilinear(x, sizes[k - 1])
    return x


def _random_noises(model, lo_k, gen):
    out = {}
    for k in range(model.K, lo_k - 1, -1):
        amp = model.noise_amps[k]
        out[k] = amp * torch.randn(1, 1, *model.schedule.sizes[k], generator=gen)
    return out


def init_singan(size, config: SinGANConfig | None = None) -> SinGANModel:
    cfg = config or SinGANConfig()
    sched = build_scale_schedule(size, cfg.r, cfg.min_size)
    torch.manual_seed(cfg.seed)
    gens, discs = [], []
    for _ in range(sched.K + 1):
        g, d = ScaleGenerator(cfg.nfc), ScaleDiscriminator(cfg.nfc)
        g.apply(_init)
        d.apply(_init)
        gens.append(g)
        discs.append(d)
    gen = torch.Generator().manual_seed(cfg.seed + 7)
    rec_noise = torch.randn(1, 1, *sched.sizes[sched.K], generator=gen)
    return SinGANModel(sched, gens, discs, [1.0] * (sched.K + 1), rec_noise, cfg, {})


def reconstruct(model: SinGANModel, stop_k: int = 0) -> torch.Tensor:
    """Fixed-noise reconstruction path down to scale ``stop_k`` (network range)."""
    with torch.no_grad():
        return _cascade(model, model.K, stop_k, None, {model.K: model.rec_noise * model.noise_amps[model.K]})


def _rec_input(model, k):
    with torch.no_grad():
        if k == model.K:
            return torch.zeros(1, 1, *model.schedule.sizes[k])
        return resize_bilinear(reconstruct(model, k + 1), model.schedule.sizes[k])


def train_singan(image, config: SinGANConfig | None = None, on_scale_done=None) -> SinGANModel:
    """Coarse-to-fine training on a single [0, 1] slice; deterministic for a seed."""
    cfg = config or SinGANConfig()
    real_full = _to_net(image)
    model = init_singan(real_full.shape[-2:], cfg)
    sched = model.schedule
    gen = torch.Generator().manual_seed(cfg.seed + 11)
    reals = [resize_bilinear(real_full, s) for s in sched.sizes]

    for k in range(sched.K, -1, -1):
        G, D = model.generators[k], model.discriminators[k]
        if k < sched.K:
            # warm start from the finished coarser scale (a copy, not shared)
            G.load_state_dict(model.generators[k + 1].state_dict())
            D.load_state_dict(model.discriminators[k + 1].state_dict())
        real = reals[k]
        prev_rec = _rec_input(model, k)
        if k < sched.K:
            model.noise_amps[k] = cfg.noise_amp_factor * float(torch.sqrt(((real - prev_rec) ** 2).mean()))
        rec_z = model.rec_noise * model.noise_amps[k] if k == sched.K else torch.zeros_like(real)

        opt_g = torch.optim.Adam(G.parameters(), lr=cfg.lr, betas=(0.5, 0.999))
        opt_d = torch.optim.Adam(D.parameters(), lr=cfg.lr, betas=(0.5, 0.999))
        milestone = [max(1, int(cfg.lr_decay_at * cfg.steps_per_scale))]
        sch_g = torch.optim.lr_scheduler.MultiStepLR(opt_g, milestone, 0.1)
        sch_d = torch.optim.lr_scheduler.MultiStepLR(opt_d, milestone, 0.1)
        hist = []
        for step in range(cfg.steps_per_scale):
            with torch.no_grad():
                if k == sched.K:
                    prev = torch.zeros_like(real)
                else:
                    noises = _random_noises(model, k + 1, gen)
                    prev = resize_bilinear(_cascade(model, sched.K, k + 1, None, noises), sched.sizes[k])
            z = model.noise_amps[k] * torch.randn(real.shape, generator=gen)

            for _ in range(cfg.d_steps):
                fake = G(z, prev)
                loss_d = -D(real).mean() + D(fake.detach()).mean()
                if cfg.gp_weight:
                    loss_d = loss_d + cfg.gp_weight * _gradient_penalty(D, real, fake.detach(), gen)
                opt_d.zero_grad(set_to_none=True)
                loss_d.backward()
                opt_d.step()

            for _ in range(cfg.g_steps):
                fake = G(z, prev)
                adv = -D(fake).mean()
                rec = ((G(rec_z, prev_rec) - real) ** 2).mean()
                loss_g = adv + cfg.rec_weight * rec
                opt_g.zero_grad(set_to_none=True)
                loss_g.backward()
                opt_g.step()

            sch_g.step()
            sch_d.step()
            if not (torch.isfinite(loss_d) and torch.isfinite(loss_g)):
                raise NumericalDivergenceError(f"non-finite SinGAN loss at scale {k}, step {step}", history=hist)
            # rmse in [0, 1] units is half the network-range rmse
            hist.append({"d": loss_d.item(), "adv": adv.item(), "rec_rmse": 0.5 * rec.sqrt().item()})
        model.history[k] = hist
        for p in list(G.parameters()) + list(D.parameters()):
            p.requires_grad_(False)
        G.eval()
        D.eval()
        if on_scale_done is not None:
            on_scale_done(k, model)
        log.debug("singan scale %d done: %s", k, hist[-1] if hist else None)
    return model


@dataclass
class HarmonizationRequest:
    slice: np.ndarray
    k_star: int


def harmonize_tensor(model: SinGANModel, x: torch.Tensor, k_star: int) -> torch.Tensor:
    sizes = model.schedule.sizes
    with torch.no_grad():
        xk = resize_bilinear(x, sizes[k_star])
        return _cascade(model, k_star, 0, xk)


def harmonize(model: SinGANModel, req: HarmonizationRequest | np.ndarray, k_star: int | None = None) -> np.ndarray:
    """Downsample to scale k*, run G_{k*} ... G_0 with zero noise, return a [0,1] slice."""
    if not isinstance(req, HarmonizationRequest):
        req = HarmonizationRequest(np.asarray(req), int(k_star))
    if not 0 <= req.k_star <= model.K:
        raise InvalidArgumentError(f"k_star={req.k_star} outside [0, {model.K}]")
    x = _to_net(req.slice)
    if tuple(x.shape[-2:]) != tuple(model.schedule.sizes[0]):
        raise InvalidArgumentError(
            f"slice shape {tuple(x.shape[-2:])} does not match the model's finest scale {tuple(model.schedule.sizes[0])}"
        )
    return _from_net(harmonize_tensor(model, x, req.k_star))


def reconstruction_rmse(model: SinGANModel, image) -> float:
    """RMSE in [0, 1] units between the fixed-noise reconstruction and ``image``."""
    rec = _from_net(reconstruct(model, 0))
    return float(np.sqrt(np.mean((rec - np.asarray(image, dtype=np.float64)) ** 2)))


def generator_params(model: SinGANModel, k: int) -> list[np.ndarray]:
    return [p.detach().numpy().copy() for p in model.generators[k].state_dict().values()]


def clone(model: SinGANModel) -> SinGANModel:
    return copy.deepcopy(model)
