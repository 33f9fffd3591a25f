"""Attention-guided heterogeneous diffusion purification.

Noise at level ``t_l`` is injected inside the attention mask and at ``t_s``
outside it. Stage 1 (``t_s <= t <= t_l``) inpaints the masked region while the
rest is re-drawn from the forward marginal of the input; each Stage-1 step is
followed by a renoise-then-DDIM-jump refinement costing one extra denoiser
call. Stage 2 (``t < t_s``) is ordinary ancestral sampling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import torch

from hetpure.attention import attention_mask
from hetpure.classifier import Prediction
from hetpure.denoiser import CountingDenoiser, ddim_jump, ddpm_step, reverse_chain
from hetpure.rng import NoiseStream
from hetpure.schedule import NoiseSchedule, q_sample, step_of_fraction


@dataclass(frozen=True)
class PurifyConfig:
    t_l_frac: float = 0.2
    t_s_frac: float = 0.05
    tau: float = 0.8
    U: int = 10
    pool_mode: str = "sum_p"
    p: int = 2
    S: int = 1
    rng_seed: int = 0
    blocks: tuple[int, ...] | None = None
    # predicted pixels inside the mask; True swaps them (input kept inside, prediction outside)
    swap_mask_roles: bool = False
    legacy_resample: bool = False
    shared_eps: bool = True
    ddim_sigma: float = 0.0
    # map [0, 1] pixels to [-1, 1] model space and clip on the way back
    rescale: bool = True

    def steps(self, schedule: NoiseSchedule) -> tuple[int, int]:
        self.validate(schedule)
        return step_of_fraction(schedule, self.t_l_frac), step_of_fraction(schedule, self.t_s_frac)

    def validate(self, schedule: NoiseSchedule) -> None:
        t_l = step_of_fraction(schedule, self.t_l_frac)
        t_s = step_of_fraction(schedule, self.t_s_frac)
        if not t_l > t_s >= 1:
            raise ValueError(f"need t_l > t_s >= 1, got t_l={t_l}, t_s={t_s}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.U < 0:
            raise ValueError("U must be non-negative")
        if self.S < 1:
            raise ValueError("ensemble size S must be >= 1")
        if self.U and t_l - 1 + self.U > schedule.T:
            raise ValueError(f"t_l - 1 + U = {t_l - 1 + self.U} exceeds T = {schedule.T}")


@dataclass
class PurifiedResult:
    image: torch.Tensor
    mask: torch.Tensor
    denoiser_calls: int
    stage_trace: list[tuple[int, str]] = field(default_factory=list)
    states: dict[int, torch.Tensor] | None = None


def expected_calls(t_l: int, t_s: int, U: int, legacy: bool = False) -> int:
    """Closed-form denoiser invocations for one purification run."""
    per_stage1 = (U + 1) if legacy else (2 if U > 0 else 1)
    return (t_l - t_s + 1) * per_stage1 + (t_s - 1)


def _bcast(mask: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    m = mask.to(like.dtype)
    return m.unsqueeze(-3) if m.dim() == like.dim() - 1 else m


def hetero_forward(
    x_adv: torch.Tensor,
    mask: torch.Tensor,
    t_l: int,
    t_s: int,
    schedule: NoiseSchedule,
    eps: torch.Tensor,
    eps_s: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mix of the ``t_l`` marginal inside the mask and the ``t_s`` marginal outside.

    Both marginals share ``eps`` unless a separate ``eps_s`` is supplied.
    """
    if t_l <= t_s:
        raise ValueError(f"need t_l > t_s, got {t_l}, {t_s}")
    if mask.shape[-2:] != x_adv.shape[-2:]:
        raise ValueError("mask and image spatial sizes differ")
    m = _bcast(mask, x_adv)
    hi = q_sample(schedule, x_adv, t_l, eps)
    lo = q_sample(schedule, x_adv, t_s, eps if eps_s is None else eps_s)
    return hi * m + lo * (1 - m)


def _draw(stream: NoiseStream, tag: str, t: int, like: torch.Tensor, u: int = 0) -> torch.Tensor:
    return stream.normal(tag, t, like.shape[1:], like.dtype, u=u)


def stage1_step(
    x_t: torch.Tensor,
    t: int,
    x_adv: torch.Tensor,
    mask: torch.Tensor,
    model,
    schedule: NoiseSchedule,
    stream: NoiseStream,
    swap_mask_roles: bool = False,
    u: int = 0,
) -> torch.Tensor:
    """Inpainting step: predicted pixels inside the mask, forward-marginal pixels outside."""
    if t < 1:
        raise ValueError(f"stage-1 step needs t >= 1, got {t}")
    eps = _draw(stream, "known", t, x_adv, u) if t > 1 else torch.zeros_like(x_adv)
    known = q_sample(schedule, x_adv, t - 1, eps)
    z = _draw(stream, "z", t, x_t, u) if t > 1 else None
    unknown = ddpm_step(model, x_t, t, schedule, z)
    m = _bcast(mask, x_t)
    if swap_mask_roles:
        return m * known + (1 - m) * unknown
    return m * unknown + (1 - m) * known


def resample_refine(
    x: torch.Tensor,
    t: int,
    U: int,
    model,
    schedule: NoiseSchedule,
    stream: NoiseStream,
    sigma: float = 0.0,
) -> torch.Tensor:
    """Renoise ``x_{t-1}`` up ``U`` single steps, then jump back with one DDIM call."""
    if U == 0:
        return x
    top = t - 1 + U
    if top > schedule.T:
        raise ValueError(f"t - 1 + U = {top} exceeds T = {schedule.T}")
    noise = stream.normal_block("renoise", t, U, x.shape[1:], x.dtype) if t > 1 else None
    for u in range(1, U + 1):
        a = schedule.alpha(t - 1 + u)
        if noise is not None:
            x = math.sqrt(a) * x + math.sqrt(1 - a) * noise[:, u - 1]
        else:
            x = math.sqrt(a) * x
    z = _draw(stream, "jump", t, x) if sigma > 0 else None
    return ddim_jump(model, x, top, t - 1, schedule, sigma=sigma, z=z)


def legacy_resample(
    x: torch.Tensor,
    t: int,
    U: int,
    x_adv: torch.Tensor,
    mask: torch.Tensor,
    model,
    schedule: NoiseSchedule,
    stream: NoiseStream,
    swap_mask_roles: bool = False,
) -> torch.Tensor:
    """Multi-step baseline: ``U`` rounds of one-step renoise plus a full Stage-1 step."""
    for u in range(1, U + 1):
        a = schedule.alpha(t)
        noise = _draw(stream, "renoise", t, x, U + u) if t > 1 else torch.zeros_like(x)
        x_t = math.sqrt(a) * x + math.sqrt(1 - a) * noise
        x = stage1_step(x_t, t, x_adv, mask, model, schedule, stream, swap_mask_roles, u=u)
    return x


def to_model_space(x: torch.Tensor, cfg: PurifyConfig) -> torch.Tensor:
    return x * 2 - 1 if cfg.rescale else x


def to_pixel_space(x: torch.Tensor, cfg: PurifyConfig) -> torch.Tensor:
    return ((x.clamp(-1, 1) + 1) / 2) if cfg.rescale else x


def purify(
    x: torch.Tensor,
    classifier,
    denoiser,
    schedule: NoiseSchedule,
    cfg: PurifyConfig,
    stream: NoiseStream | None = None,
    mask: torch.Tensor | None = None,
    keep_states: bool = False,
) -> PurifiedResult:
    """Purify a batch ``(N, C, H, W)`` of pixel-space images.

    The attention mask is built from ``x`` itself unless ``mask`` is given.
    Gradients flow to ``x`` through every denoiser call; the mask is constant.
    """
    t_l, t_s = cfg.steps(schedule)
    if stream is None:
        stream = NoiseStream([cfg.rng_seed] * len(x))
    if len(stream) != len(x):
        raise ValueError(f"stream has {len(stream)} seeds for {len(x)} images")
    if mask is None:
        mask = attention_mask(classifier, x.detach(), cfg.tau, cfg.pool_mode, cfg.p, cfg.blocks)
    model = CountingDenoiser(denoiser)
    x0 = to_model_space(x, cfg)
    eps = _draw(stream, "forward", 0, x0)
    eps_s = None if cfg.shared_eps else _draw(stream, "forward", 0, x0, u=1)
    xt = hetero_forward(x0, mask, t_l, t_s, schedule, eps, eps_s)
    trace: list[tuple[int, str]] = []
    states = {t_l: xt} if keep_states else None
    for t in range(t_l, 0, -1):
        if t >= t_s:
            xt = stage1_step(xt, t, x0, mask, model, schedule, stream, cfg.swap_mask_roles)
            if cfg.legacy_resample:
                xt = legacy_resample(xt, t, cfg.U, x0, mask, model, schedule, stream, cfg.swap_mask_roles)
            else:
                xt = resample_refine(xt, t, cfg.U, model, schedule, stream, cfg.ddim_sigma)
            trace.append((t, "stage1"))
        else:
            z = _draw(stream, "z", t, xt) if t > 1 else None
            xt = ddpm_step(model, xt, t, schedule, z)
            trace.append((t, "stage2"))
        if keep_states:
            states[t - 1] = xt
    return PurifiedResult(to_pixel_space(xt, cfg), mask, model.calls, trace, states)


def purify_homogeneous(
    x: torch.Tensor,
    denoiser,
    schedule: NoiseSchedule,
    t: int,
    cfg: PurifyConfig,
    stream: NoiseStream | None = None,
) -> PurifiedResult:
    """Uniform-noise baseline: forward to ``t`` everywhere, then plain reverse sampling."""
    if stream is None:
        stream = NoiseStream([cfg.rng_seed] * len(x))
    model = CountingDenoiser(denoiser)
    x0 = to_model_space(x, cfg)
    xt = q_sample(schedule, x0, t, _draw(stream, "forward", 0, x0))
    out = reverse_chain(model, xt, t, schedule, stream)
    mask = torch.zeros(x.shape[0], *x.shape[-2:], dtype=x.dtype)
    return PurifiedResult(to_pixel_space(out, cfg), mask, model.calls, [(s, "stage2") for s in range(t, 0, -1)])


def member_stream(stream: NoiseStream, s: int) -> NoiseStream:
    """Stream for ensemble member ``s``; member 0 reuses the caller's stream."""
    return stream if s == 0 else stream.child(0xE5, s)


def ensemble_classify(
    x: torch.Tensor,
    classifier,
    denoiser,
    schedule: NoiseSchedule,
    cfg: PurifyConfig,
    stream: NoiseStream | None = None,
    purifier=None,
) -> tuple[Prediction, list[PurifiedResult]]:
    """Average class probabilities over ``S`` independent purifications; return argmax.

    ``purifier`` overrides the default heterogeneous purification, with the
    signature ``purifier(x, stream) -> PurifiedResult``.
    """
    if cfg.S < 1:
        raise ValueError("ensemble size S must be >= 1")
    if stream is None:
        stream = NoiseStream([cfg.rng_seed] * len(x))
    if purifier is None:
        mask = attention_mask(classifier, x, cfg.tau, cfg.pool_mode, cfg.p, cfg.blocks)

        def purifier(xx, st):
            return purify(xx, classifier, denoiser, schedule, cfg, st, mask=mask)

    runs = []
    probs = None
    with torch.no_grad():
        for s in range(cfg.S):
            res = purifier(x, member_stream(stream, s))
            runs.append(res)
            pr = torch.softmax(classifier(res.image), dim=-1)
            probs = pr if probs is None else probs + pr
    probs = probs / cfg.S
    return Prediction(logits=probs.log(), probs=probs, label=probs.argmax(dim=-1)), runs


def with_overrides(cfg: PurifyConfig, **kw) -> PurifyConfig:
    return replace(cfg, **kw)
