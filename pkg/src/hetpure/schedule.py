"""Discrete diffusion schedule and the closed-form forward marginal.

Timesteps are 1-based: ``t`` runs over ``1..T`` and ``t = 0`` stands for the
clean image (``alpha_bar(0) == 1``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable tables of ``beta``, ``alpha``, ``alpha_bar`` and reverse stds.

    Arrays are stored 0-based (``betas[t - 1]`` is beta at step ``t``); use the
    accessor methods to index with diffusion timesteps.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    posterior_sigmas: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.shape != (self.T,):
            raise ValueError(f"expected {self.T} betas, got shape {betas.shape}")
        if not np.all((betas > 0) & (betas < 1)):
            raise ValueError("betas must lie in (0, 1)")
        alphas = 1.0 - betas
        for name, arr in [
            ("betas", betas),
            ("alphas", alphas),
            ("alpha_bars", np.cumprod(alphas)),
            ("posterior_sigmas", np.sqrt(betas)),
        ]:
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def _check(self, t: int, allow_zero: bool = False) -> int:
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")
        return int(t)

    def beta(self, t: int) -> float:
        return float(self.betas[self._check(t) - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._check(t) - 1])

    def alpha_bar(self, t: int) -> float:
        t = self._check(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def sigma(self, t: int) -> float:
        return float(self.posterior_sigmas[self._check(t) - 1])


def build_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be positive, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(T=int(T), betas=np.linspace(beta_start, beta_end, T, dtype=np.float64))


def q_sample(schedule: NoiseSchedule, x0: torch.Tensor, t: int, eps: torch.Tensor) -> torch.Tensor:
    """Draw ``x_t ~ q(x_t | x_0)`` using caller-supplied noise ``eps``.

    ``t = 0`` returns ``x0`` unchanged.
    """
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    ab = schedule.alpha_bar(t)
    if ab == 1.0:
        return x0.clone()
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def step_of_fraction(schedule: NoiseSchedule, t_star: float) -> int:
    """Map a continuous diffusion time in [0, 1] to a discrete timestep in [1, T]."""
    if not 0.0 <= t_star <= 1.0:
        raise ValueError(f"t_star must lie in [0, 1], got {t_star}")
    # floor(x + 0.5) keeps rounding monotone; Python's round() is banker's
    return min(max(int(math.floor(t_star * schedule.T + 0.5)), 1), schedule.T)
