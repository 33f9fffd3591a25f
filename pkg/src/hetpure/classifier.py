"""Small M-block convolutional classifier with activation taps."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from hetpure.rng import derive_seed


@dataclass
class Prediction:
    logits: torch.Tensor
    probs: torch.Tensor
    label: torch.Tensor

    @classmethod
    def from_logits(cls, logits: torch.Tensor) -> "Prediction":
        # torch.argmax returns the first maximal index, i.e. ties go to the lowest class
        return cls(logits=logits, probs=torch.softmax(logits, dim=-1), label=logits.argmax(dim=-1))


def xavier_uniform_(w: torch.Tensor, gen: torch.Generator) -> None:
    fan_in = w.shape[1] * int(np.prod(w.shape[2:]))
    fan_out = w.shape[0] * int(np.prod(w.shape[2:]))
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        w.uniform_(-bound, bound, generator=gen)


class ClassifierModel(nn.Module):
    """``conv3x3 -> ReLU -> maxpool2`` blocks on inputs centred to [-1, 1], then a dense head on the flattened output.

    The tap of each block is its ReLU output, taken before downsampling.
    """

    def __init__(self, in_channels=3, image_size=16, num_classes=2, widths=(8, 16, 32, 64), seed=0):
        super().__init__()
        self.config = dict(
            in_channels=in_channels, image_size=image_size, num_classes=num_classes, widths=list(widths), seed=seed
        )
        self.convs = nn.ModuleList()
        c, s = in_channels, image_size
        for w in widths:
            self.convs.append(nn.Conv2d(c, w, 3, padding=1))
            c, s = w, math.ceil(s / 2)
        self.feature_dim = c * s * s
        self.head = nn.Linear(self.feature_dim, num_classes)
        gen = torch.Generator().manual_seed(derive_seed(seed, 0xC1A5))
        for m in [*self.convs, self.head]:
            xavier_uniform_(m.weight, gen)
            nn.init.zeros_(m.bias)
        self.train_accuracy: float | None = None
        self.val_accuracy: float | None = None

    @property
    def num_blocks(self) -> int:
        return len(self.convs)

    @property
    def descriptor(self) -> dict:
        return {
            "arch": "classifier",
            **self.config,
            "taps": [f"block{i}.relu" for i in range(self.num_blocks)],
            "nonlinearity": "relu",
        }

    def _run(self, x):
        acts = []
        h = x * 2 - 1
        for conv in self.convs:
            h = F.relu(conv(h))
            acts.append(h)
            h = F.max_pool2d(h, 2, ceil_mode=True)
        feats = h.flatten(1)
        return self.head(feats), acts, feats

    def _check_input(self, x):
        c, s = self.config["in_channels"], self.config["image_size"]
        if tuple(x.shape[-3:]) != (c, s, s):
            raise ValueError(f"expected input (..., {c}, {s}, {s}), got {tuple(x.shape)}")

    def forward(self, x):
        self._check_input(x)
        return self._run(x)[0]

    def features(self, x):
        """Penultimate (pre-logit) feature vectors."""
        self._check_input(x)
        return self._run(x)[2]

    def forward_with_activations(self, x):
        self._check_input(x)
        logits, acts, _ = self._run(x)
        return Prediction.from_logits(logits), acts

    @torch.no_grad()
    def predict(self, x, batch_size=256) -> Prediction:
        logits = torch.cat([self(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])
        return Prediction.from_logits(logits)


def input_gradient(model, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Gradient of the summed cross-entropy w.r.t. the input batch (per-image gradients)."""
    x = x.detach().requires_grad_(True)
    loss = F.cross_entropy(model(x), y, reduction="sum")
    (g,) = torch.autograd.grad(loss, x)
    if not torch.isfinite(g).all():
        raise FloatingPointError("non-finite input gradient")
    return g


@torch.no_grad()
def feature_distance(model, x1: torch.Tensor, x2: torch.Tensor) -> torch.Tensor:
    """Per-image Euclidean distance between penultimate features."""
    if x1.shape != x2.shape:
        raise ValueError(f"shape mismatch {tuple(x1.shape)} vs {tuple(x2.shape)}")
    return (model.features(x1) - model.features(x2)).norm(dim=-1)


@torch.no_grad()
def accuracy(model, x, y) -> float:
    return float((model.predict(x).label == y).float().mean()) if len(x) else float("nan")


def train_classifier(
    images: torch.Tensor,
    labels: torch.Tensor,
    epochs: int = 20,
    lr: float = 0.2,
    batch: int = 32,
    seed: int = 0,
    val_images: torch.Tensor | None = None,
    val_labels: torch.Tensor | None = None,
    widths=(8, 16, 32, 64),
    log=None,
) -> ClassifierModel:
    """Plain minibatch SGD on cross-entropy; deterministic given ``seed``."""
    if len(images) == 0:
        raise ValueError("empty dataset")
    num_classes = int(labels.max()) + 1
    if len(torch.unique(labels)) < 2:
        raise ValueError("need at least two classes")
    model = ClassifierModel(images.shape[1], images.shape[-1], num_classes, widths, seed)
    opt = torch.optim.SGD(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(derive_seed(seed, 0x5EED))
    for epoch in range(epochs):
        order = torch.randperm(len(images), generator=gen)
        total = 0.0
        for i in range(0, len(images), batch):
            idx = order[i : i + batch]
            loss = F.cross_entropy(model(images[idx]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        if log:
            log(f"classifier epoch {epoch + 1}/{epochs} loss {total / len(images):.4f}")
    model.eval()
    model.train_accuracy = accuracy(model, images, labels)
    if val_images is not None:
        model.val_accuracy = accuracy(model, val_images, val_labels)
    return model
