"""Noise predictors and the reverse-process kernels built on them."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from hetpure.classifier import xavier_uniform_
from hetpure.rng import NoiseStream, derive_seed
from hetpure.schedule import NoiseSchedule, q_sample


def _check_t(schedule: NoiseSchedule, t: int):
    if not 1 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside [1, {schedule.T}]")


class AnalyticDenoiser(nn.Module):
    """Bayes-optimal noise predictor for data ``x0 ~ N(mu0, sigma0^2 I)``."""

    kind = "analytic"

    def __init__(self, mu0: torch.Tensor, sigma0: float):
        super().__init__()
        if sigma0 < 0:
            raise ValueError("sigma0 must be non-negative")
        self.register_buffer("mu0", torch.as_tensor(mu0))
        self.sigma0 = float(sigma0)

    def predict_eps(self, x: torch.Tensor, t: int, schedule: NoiseSchedule) -> torch.Tensor:
        _check_t(schedule, t)
        if not torch.isfinite(x).all():
            raise ValueError("non-finite denoiser input")
        ab = schedule.alpha_bar(t)
        scale = math.sqrt(1.0 - ab) / (ab * self.sigma0**2 + 1.0 - ab)
        return (x - math.sqrt(ab) * self.mu0) * scale


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class LearnedDenoiser(nn.Module):
    """Three-level conv encoder/decoder with additive sinusoidal time embedding."""

    kind = "learned"

    def __init__(self, in_channels=3, base=16, emb_dim=32, seed=0):
        super().__init__()
        self.config = dict(in_channels=in_channels, base=base, emb_dim=emb_dim, seed=seed)
        c = base
        self.emb = nn.Sequential(nn.Linear(emb_dim, 2 * c), nn.SiLU(), nn.Linear(2 * c, 2 * c))
        self.emb_proj = nn.ModuleList([nn.Linear(2 * c, c), nn.Linear(2 * c, 2 * c), nn.Linear(2 * c, 2 * c)])
        self.enc0 = nn.Conv2d(in_channels, c, 3, padding=1)
        self.enc0b = nn.Conv2d(c, c, 3, padding=1)
        self.down1 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.enc1b = nn.Conv2d(2 * c, 2 * c, 3, padding=1)
        self.down2 = nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1)
        self.mid = nn.Conv2d(2 * c, 2 * c, 3, padding=1)
        self.up1 = nn.Conv2d(2 * c, 2 * c, 3, padding=1)
        self.dec1 = nn.Conv2d(4 * c, 2 * c, 3, padding=1)
        self.up0 = nn.Conv2d(2 * c, c, 3, padding=1)
        self.dec0 = nn.Conv2d(2 * c, c, 3, padding=1)
        self.out = nn.Conv2d(c, in_channels, 3, padding=1)
        gen = torch.Generator().manual_seed(derive_seed(seed, 0xD3))
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                xavier_uniform_(m.weight, gen)
                nn.init.zeros_(m.bias)
        # zero output layer: an untrained model predicts eps = 0
        nn.init.zeros_(self.out.weight)
        self.final_loss: float | None = None

    @property
    def descriptor(self) -> dict:
        return {"arch": "denoiser", **self.config}

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        e = self.emb(timestep_embedding(t, self.config["emb_dim"]).to(x.dtype))
        e0, e1, e2 = (p(e)[:, :, None, None] for p in self.emb_proj)
        h0 = F.silu(self.enc0(x) + e0)
        h0 = F.silu(self.enc0b(h0))
        h1 = F.silu(self.down1(h0) + e1)
        h1 = F.silu(self.enc1b(h1))
        h2 = F.silu(self.down2(h1) + e2)
        h2 = F.silu(self.mid(h2))
        u1 = F.silu(self.up1(F.interpolate(h2, size=h1.shape[-2:], mode="nearest")))
        u1 = F.silu(self.dec1(torch.cat([u1, h1], dim=1)) + e1)
        u0 = F.silu(self.up0(F.interpolate(u1, size=h0.shape[-2:], mode="nearest")))
        u0 = F.silu(self.dec0(torch.cat([u0, h0], dim=1)) + e0)
        return self.out(u0)

    def predict_eps(self, x: torch.Tensor, t: int, schedule: NoiseSchedule) -> torch.Tensor:
        _check_t(schedule, t)
        if not torch.isfinite(x).all():
            raise ValueError("non-finite denoiser input")
        return self(x, torch.full((x.shape[0],), t, dtype=torch.long))


class CountingDenoiser:
    """Per-run wrapper that counts ``predict_eps`` invocations."""

    def __init__(self, model):
        self.model = model.model if isinstance(model, CountingDenoiser) else model
        self.calls = 0

    def predict_eps(self, x, t, schedule):
        self.calls += 1
        return self.model.predict_eps(x, t, schedule)


def predict_eps(model, x, t, schedule):
    return model.predict_eps(x, t, schedule)


def ddpm_step(model, x_t: torch.Tensor, t: int, schedule: NoiseSchedule, z: torch.Tensor | None = None) -> torch.Tensor:
    """One ancestral step ``x_t -> x_{t-1}`` with fixed variance ``sigma_t^2 = beta_t``.

    ``z`` is ignored (treated as zero) at ``t = 1``.
    """
    _check_t(schedule, t)
    eps = model.predict_eps(x_t, t, schedule)
    beta, ab = schedule.beta(t), schedule.alpha_bar(t)
    mean = (x_t - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(schedule.alpha(t))
    if t == 1 or z is None:
        return mean
    return mean + schedule.sigma(t) * z


def ddim_jump(
    model,
    x: torch.Tensor,
    from_t: int,
    to_t: int,
    schedule: NoiseSchedule,
    sigma: float = 0.0,
    z: torch.Tensor | None = None,
) -> torch.Tensor:
    """Single DDIM update from ``from_t`` down to ``to_t`` (``to_t = 0`` gives the x0 estimate)."""
    _check_t(schedule, from_t)
    if not 0 <= to_t < from_t:
        raise ValueError(f"need 0 <= to_t < from_t, got {to_t}, {from_t}")
    ab_from, ab_to = schedule.alpha_bar(from_t), schedule.alpha_bar(to_t)
    if sigma < 0 or sigma**2 > 1.0 - ab_to:
        raise ValueError(f"sigma={sigma} exceeds sqrt(1 - alpha_bar[{to_t}])")
    eps = model.predict_eps(x, from_t, schedule)
    x0_hat = (x - math.sqrt(1.0 - ab_from) * eps) / math.sqrt(ab_from)
    out = math.sqrt(ab_to) * x0_hat + math.sqrt(1.0 - ab_to - sigma**2) * eps
    if sigma > 0 and z is not None:
        out = out + sigma * z
    return out


def reverse_chain(model, x_t: torch.Tensor, t_start: int, schedule: NoiseSchedule, stream: NoiseStream) -> torch.Tensor:
    """Plain ancestral sampling from ``t_start`` to 0; step ``t`` uses the stream's ``('z', t)`` draw."""
    x = x_t
    for t in range(t_start, 0, -1):
        z = stream.normal("z", t, x.shape[1:], x.dtype) if t > 1 else None
        x = ddpm_step(model, x, t, schedule, z)
    return x


def denoising_loss(model, x0, schedule, t: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Batch mean of the per-image squared error ``||eps_hat - eps||^2``."""
    ab = torch.tensor(schedule.alpha_bars.tolist(), dtype=x0.dtype)[t - 1].view(-1, *[1] * (x0.dim() - 1))
    xt = ab.sqrt() * x0 + (1 - ab).sqrt() * eps
    return (model(xt, t) - eps).pow(2).flatten(1).sum(1).mean()


@torch.no_grad()
def eval_mse(model, x0: torch.Tensor, schedule: NoiseSchedule, t: int, seed: int = 0) -> float:
    """Per-pixel MSE of the noise prediction at a fixed timestep."""
    gen = torch.Generator().manual_seed(seed)
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    xt = q_sample(schedule, x0, t, eps)
    return float((model.predict_eps(xt, t, schedule) - eps).pow(2).mean())


def train_denoiser(
    images: torch.Tensor,
    schedule: NoiseSchedule,
    epochs: int = 100,
    lr: float = 2e-3,
    seed: int = 0,
    batch: int = 64,
    base: int = 16,
    log=None,
    t_max: int | None = None,
) -> LearnedDenoiser:
    """Fit the noise predictor with Adam on timesteps drawn uniformly from ``[1, t_max]``.

    ``t_max`` defaults to ``T``; purification only visits small timesteps, so a
    lower cap spends the capacity where it is used.
    """
    if len(images) == 0:
        raise ValueError("empty dataset")
    t_max = schedule.T if t_max is None else int(t_max)
    if not 1 <= t_max <= schedule.T:
        raise ValueError(f"t_max={t_max} outside [1, {schedule.T}]")
    model = LearnedDenoiser(images.shape[1], base=base, seed=seed)
    gen = torch.Generator().manual_seed(derive_seed(seed, 0xD5))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    n_steps = epochs * math.ceil(len(images) / batch)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(n_steps, 1))
    last = None
    for epoch in range(epochs):
        order = torch.randperm(len(images), generator=gen)
        total = 0.0
        for i in range(0, len(images), batch):
            x0 = images[order[i : i + batch]]
            t = torch.randint(1, t_max + 1, (len(x0),), generator=gen)
            eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
            loss = denoising_loss(model, x0, schedule, t, eps)
            opt.zero_grad()
            (loss / x0[0].numel()).backward()
            opt.step()
            sched.step()
            total += loss.item() * len(x0)
        last = total / len(images)
        if log and (epoch + 1) % max(1, epochs // 10) == 0:
            log(f"denoiser epoch {epoch + 1}/{epochs} loss {last:.4f}")
    if last is None:
        # no training: record the loss of the initial model on one pass
        t = torch.randint(1, t_max + 1, (len(images),), generator=gen)
        eps = torch.randn(images.shape, generator=gen, dtype=images.dtype)
        with torch.no_grad():
            last = float(denoising_loss(model, images, schedule, t, eps))
    model.final_loss = last
    model.eval()
    return model
