"""Activation-based attention maps and the binary attention mask."""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F

POOL_MODES = ("sum", "sum_p", "max_p")


def channel_pool(activation: torch.Tensor, mode: str = "sum_p", p: int = 2) -> torch.Tensor:
    """Collapse the channel axis of a ``(..., C, H, W)`` activation into ``(..., H, W)``.

    ``sum`` is the L1 sum of magnitudes, ``sum_p`` the p-norm across channels and
    ``max_p`` the largest ``|A|**p``.
    """
    if mode not in POOL_MODES:
        raise ValueError(f"unknown pooling mode {mode!r}")
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if activation.dim() < 3 or activation.shape[-3] == 0:
        raise ValueError("activation needs a non-empty channel dimension")
    a = activation.abs()
    if mode == "sum":
        return a.sum(dim=-3)
    if mode == "sum_p":
        if p == 1:
            return a.sum(dim=-3)
        return a.pow(p).sum(dim=-3).pow(1.0 / p)
    return a.pow(p).amax(dim=-3)


def attention_map(pooled: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Corner-aligned bilinear upsampling followed by a joint spatial softmax.

    Accepts ``(H, W)`` or ``(N, H, W)``; the result sums to one per image.
    """
    if not torch.isfinite(pooled).all():
        raise ValueError("pooled map contains non-finite values")
    single = pooled.dim() == 2
    g = pooled.unsqueeze(0) if single else pooled
    n = g.shape[0]
    up = F.interpolate(g.unsqueeze(1), size=(out_h, out_w), mode="bilinear", align_corners=True)
    am = torch.softmax(up.reshape(n, -1), dim=-1).reshape(n, out_h, out_w)
    return am[0] if single else am


def normalize_map(am: torch.Tensor) -> torch.Tensor:
    """Min-max scale each image's map to [0, 1]; constant maps become all zeros."""
    flat = am.reshape(*am.shape[:-2], -1)
    lo = flat.amin(dim=-1, keepdim=True)
    span = flat.amax(dim=-1, keepdim=True) - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    out = torch.where(span > 0, (flat - lo) / safe, torch.zeros_like(flat))
    return out.reshape(am.shape)


def build_mask(maps: Sequence[torch.Tensor], tau: float) -> torch.Tensor:
    """Union over blocks of ``normalized_map > tau``, as a 0/1 tensor of the maps' dtype."""
    if len(maps) == 0:
        raise ValueError("need at least one attention map")
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    shape = maps[0].shape
    mask = torch.zeros(shape, dtype=torch.bool)
    for am in maps:
        if am.shape != shape:
            raise ValueError(f"map shape {tuple(am.shape)} != {tuple(shape)}")
        mask |= normalize_map(am) > tau
    return mask.to(maps[0].dtype)


def block_maps(activations: Sequence[torch.Tensor], out_h: int, out_w: int, mode: str = "sum_p", p: int = 2):
    return [attention_map(channel_pool(a, mode, p), out_h, out_w) for a in activations]


@torch.no_grad()
def attention_mask(
    classifier,
    x: torch.Tensor,
    tau: float = 0.8,
    mode: str = "sum_p",
    p: int = 2,
    blocks: Sequence[int] | None = None,
) -> torch.Tensor:
    """Build the ``(N, H, W)`` mask for a batch from one classifier forward pass.

    ``blocks`` selects which block activations take part (all by default).
    """
    _, acts = classifier.forward_with_activations(x)
    if blocks is not None:
        acts = [acts[i] for i in blocks]
    maps = block_maps(acts, x.shape[-2], x.shape[-1], mode, p)
    return build_mask(maps, tau)
