"""Keyed per-image noise streams.

Every Gaussian draw is addressed by ``(image seed, tag, t, u)`` so that two
pipelines sharing a seed see the same noise at the same logical step, and a
batch produces the same per-image draws no matter how it is chunked.
"""
from __future__ import annotations

from typing import Sequence

import torch

_TAGS = {"forward": 1, "known": 2, "z": 3, "renoise": 4, "jump": 5, "start": 6, "eot": 7, "train": 8}


_MASK64 = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(*keys: int) -> int:
    """Deterministic 63-bit seed from a tuple of non-negative integers."""
    h = 0x6A09E667F3BCC908
    for k in keys:
        h = _splitmix64(h ^ (int(k) & _MASK64))
    return h >> 1


class NoiseStream:
    def __init__(self, seeds: Sequence[int] | int):
        if isinstance(seeds, int):
            seeds = [seeds]
        self.seeds = [int(s) for s in seeds]

    def __len__(self):
        return len(self.seeds)

    def child(self, *keys: int) -> "NoiseStream":
        return NoiseStream([derive_seed(s, *keys) for s in self.seeds])

    def subset(self, idx: Sequence[int]) -> "NoiseStream":
        return NoiseStream([self.seeds[i] for i in idx])

    def normal(self, tag: str, t: int, shape: Sequence[int], dtype=torch.float32, u: int = 0) -> torch.Tensor:
        """Stacked ``(N, *shape)`` standard-normal draw, one independent slice per image."""
        code = _TAGS[tag]
        out = [
            torch.randn(tuple(shape), generator=torch.Generator().manual_seed(derive_seed(s, code, t, u)), dtype=dtype)
            for s in self.seeds
        ]
        return torch.stack(out)

    def normal_block(self, tag: str, t: int, count: int, shape: Sequence[int], dtype=torch.float32) -> torch.Tensor:
        """``(N, count, *shape)`` draw from one generator per image; slices are independent."""
        code = _TAGS[tag]
        out = [
            torch.randn((count, *shape), generator=torch.Generator().manual_seed(derive_seed(s, code, t, 0)), dtype=dtype)
            for s in self.seeds
        ]
        return torch.stack(out)

    def uniform(self, tag: str, t: int, shape: Sequence[int], dtype=torch.float32, u: int = 0) -> torch.Tensor:
        code = _TAGS[tag]
        out = [
            torch.rand(tuple(shape), generator=torch.Generator().manual_seed(derive_seed(s, code, t, u)), dtype=dtype)
            for s in self.seeds
        ]
        return torch.stack(out)
