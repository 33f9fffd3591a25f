"""White-box attacks: FGSM, PGD (L-inf / L2), EOT averaging, BPDA and the full adaptive attack."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F

from hetpure.classifier import input_gradient
from hetpure.rng import NoiseStream, derive_seed

MODES = ("fgsm", "pgd", "bpda_eot", "pgd_eot_adaptive")


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "linf"
    epsilon: float = 8 / 255
    step_size: float = 0.007
    iterations: int = 40
    eot_samples: int = 1
    mode: str = "pgd"
    seed: int = 0
    random_start: bool = True

    def validate(self) -> None:
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if self.epsilon < 0 or self.step_size <= 0 or self.iterations < 1 or self.eot_samples < 1:
            raise ValueError("attack budget, step, iterations and EOT count must be positive")
        if self.mode != "fgsm" and self.norm == "linf" and self.step_size > self.epsilon > 0:
            raise ValueError("L-inf PGD step size must not exceed epsilon")


def _flat_norm(v: torch.Tensor) -> torch.Tensor:
    return v.flatten(1).norm(dim=1).view(-1, *[1] * (v.dim() - 1))


def project(x_adv: torch.Tensor, x: torch.Tensor, epsilon: float, norm: str) -> torch.Tensor:
    """Project onto the epsilon ball around ``x`` intersected with the unit box."""
    delta = x_adv - x
    if norm == "linf":
        delta = delta.clamp(-epsilon, epsilon)
    else:
        n = _flat_norm(delta)
        delta = delta * torch.where(n > epsilon, epsilon / n.clamp_min(1e-30), torch.ones_like(n))
    return (x + delta).clamp(0.0, 1.0)


def random_start(x: torch.Tensor, epsilon: float, norm: str, stream: NoiseStream) -> torch.Tensor:
    if epsilon == 0:
        return x.clone()
    if norm == "linf":
        u = stream.uniform("start", 0, x.shape[1:], x.dtype)
        return project(x + (2 * u - 1) * epsilon, x, epsilon, norm)
    d = x[0].numel()
    g = stream.normal("start", 0, x.shape[1:], x.dtype)
    r = stream.uniform("start", 1, (1,), x.dtype).view(-1, *[1] * (x.dim() - 1)) ** (1.0 / d)
    return project(x + epsilon * r * g / _flat_norm(g), x, epsilon, norm)


def fgsm(x: torch.Tensor, y: torch.Tensor, classifier, epsilon: float) -> torch.Tensor:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    g = input_gradient(classifier, x, y)
    return (x + epsilon * g.sign()).clamp(0.0, 1.0).detach()


def eot_gradient(
    x: torch.Tensor,
    stochastic_loss: Callable[[torch.Tensor, int], torch.Tensor],
    n_samples: int,
) -> torch.Tensor:
    """Mean of ``n_samples`` gradients of ``stochastic_loss(x, k)``; sample ``k`` owns its randomness."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    total = None
    for k in range(n_samples):
        xr = x.detach().requires_grad_(True)
        (g,) = torch.autograd.grad(stochastic_loss(xr, k), xr)
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in EOT sample {k}")
        total = g if total is None else total + g
    return total / n_samples


def pgd(
    x: torch.Tensor,
    y: torch.Tensor,
    loss_fn: Callable[[torch.Tensor, torch.Tensor, int], torch.Tensor],
    cfg: AttackConfig,
    stream: NoiseStream | None = None,
) -> torch.Tensor:
    """Projected gradient ascent on ``loss_fn(x_adv, y, key)``.

    ``key`` is a distinct integer per (iteration, EOT sample) used to seed any
    randomness in the loss; the gradient each iteration is the EOT mean.
    """
    cfg.validate()
    if stream is None:
        stream = NoiseStream([cfg.seed] * len(x))
    x = x.detach()
    x_adv = random_start(x, cfg.epsilon, cfg.norm, stream) if cfg.random_start else x.clone()
    for it in range(cfg.iterations):
        g = eot_gradient(
            x_adv, lambda xr, k: loss_fn(xr, y, derive_seed(cfg.seed, it, k)), cfg.eot_samples
        )
        if cfg.norm == "linf":
            step = cfg.step_size * g.sign()
        else:
            step = cfg.step_size * g / _flat_norm(g).clamp_min(1e-12)
        x_adv = project(x_adv + step, x, cfg.epsilon, cfg.norm).detach()
    return x_adv


def classifier_loss(classifier):
    def loss(xa, y, key):
        return F.cross_entropy(classifier(xa), y, reduction="sum")

    return loss


def bpda_loss(classifier, purifier_fn):
    """Forward through the purifier, backward through identity."""

    def loss(xa, y, key):
        with torch.no_grad():
            purified = purifier_fn(xa.detach(), key)
        return F.cross_entropy(classifier(xa + (purified - xa).detach()), y, reduction="sum")

    return loss


def adaptive_loss(classifier, purifier_fn):
    """Exact reverse-mode gradient through the whole purify -> classify composition."""

    def loss(xa, y, key):
        try:
            purified = purifier_fn(xa, key)
        except (RuntimeError, MemoryError) as err:
            calls = getattr(purifier_fn, "last_calls", "unknown")
            raise RuntimeError(f"adaptive gradient failed after {calls} denoiser calls per run: {err}") from err
        return F.cross_entropy(classifier(purified), y, reduction="sum")

    return loss


def pgd_attack(x, y, classifier, cfg: AttackConfig, stream=None):
    return pgd(x, y, classifier_loss(classifier), cfg, stream)


def bpda_attack(x, y, purifier_fn, classifier, cfg: AttackConfig, stream=None):
    if cfg.mode != "bpda_eot":
        raise ValueError("bpda_attack expects mode 'bpda_eot'")
    return pgd(x, y, bpda_loss(classifier, purifier_fn), cfg, stream)


def adaptive_attack(x, y, purifier_fn, classifier, cfg: AttackConfig, stream=None):
    if cfg.mode != "pgd_eot_adaptive":
        raise ValueError("adaptive_attack expects mode 'pgd_eot_adaptive'")
    return pgd(x, y, adaptive_loss(classifier, purifier_fn), cfg, stream)


def run_attack(x, y, classifier, cfg: AttackConfig, purifier_fn=None, stream=None):
    """Dispatch on ``cfg.mode``; purifier-aware modes require ``purifier_fn(x, key)``."""
    cfg.validate()
    if cfg.mode == "fgsm":
        return fgsm(x, y, classifier, cfg.epsilon)
    if cfg.mode == "pgd":
        return pgd_attack(x, y, classifier, cfg, stream)
    if purifier_fn is None:
        raise ValueError(f"mode {cfg.mode!r} needs a purifier")
    if cfg.mode == "bpda_eot":
        return bpda_attack(x, y, purifier_fn, classifier, cfg, stream)
    return adaptive_attack(x, y, purifier_fn, classifier, cfg, stream)
