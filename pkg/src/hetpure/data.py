"""Deterministic synthetic image datasets (desk-scale stand-in for CIFAR/SVHN)."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from hetpure.rng import derive_seed

GENERATORS = ("shapes", "shapes-easy")
# faint bars on busy texture keep the toy classifier attackable at 8/255
SHAPE_CONTRAST = 0.15
TEXTURE_AMPLITUDE = 0.4


@dataclass(frozen=True)
class DatasetSpec:
    generator: str = "shapes"
    image_size: int = 16
    num_classes: int = 2
    n_train: int = 500  # per class
    n_test: int = 100  # per class
    seed: int = 0


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth random background: coarse noise upsampled, plus a faint fine grain."""
    coarse = rng.uniform(0, 1, (3, 4, 4))
    rep = size // 4
    smooth = np.kron(coarse, np.ones((1, rep, rep)))[:, :size, :size]
    return smooth + 0.08 * rng.standard_normal((3, size, size))


def _shape_mask(cls: int, rng: np.random.Generator, size: int) -> np.ndarray:
    m = np.zeros((size, size))
    L = int(rng.integers(size // 2, size - 3))
    w = int(rng.integers(2, 4))
    r0 = int(rng.integers(1, size - L))
    c0 = int(rng.integers(1, size - L))
    mid_r = r0 + L // 2 - w // 2
    mid_c = c0 + L // 2 - w // 2
    if cls == 0:  # horizontal bar
        m[mid_r : mid_r + w, c0 : c0 + L] = 1
    elif cls == 1:  # vertical bar
        m[r0 : r0 + L, mid_c : mid_c + w] = 1
    elif cls == 2:  # plus
        m[mid_r : mid_r + w, c0 : c0 + L] = 1
        m[r0 : r0 + L, mid_c : mid_c + w] = 1
    else:  # hollow square
        m[r0 : r0 + L, c0 : c0 + L] = 1
        m[r0 + 2 : r0 + L - 2, c0 + 2 : c0 + L - 2] = 0
    return m


def render(generator: str, cls: int, rng: np.random.Generator, size: int) -> np.ndarray:
    if generator not in GENERATORS:
        raise ValueError(f"unknown generator {generator!r}")
    bg_level = 0.5 if generator == "shapes" else (0.25 if cls % 2 == 0 else 0.6)
    bg = bg_level + TEXTURE_AMPLITUDE * (_texture(rng, size) - 0.5)
    color = rng.uniform(0, 1, (3, 1, 1))
    # push the shape colour away from the background so it stays visible
    color = np.where(color > bg_level, np.maximum(color, bg_level + SHAPE_CONTRAST), np.minimum(color, bg_level - SHAPE_CONTRAST))
    m = _shape_mask(cls, rng, size)[None]
    img = bg * (1 - m) + color * m
    return np.clip(img, 0, 1)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def generate(spec: DatasetSpec):
    """Return ``{"train": (x, y), "test": (x, y)}`` with 8-bit-quantized float32 images.

    Classes are interleaved so any prefix of a split is roughly balanced.
    """
    if spec.generator not in GENERATORS:
        raise ValueError(f"unknown generator {spec.generator!r}")
    if not 2 <= spec.num_classes <= 4:
        raise ValueError("num_classes must be 2..4")
    out = {}
    for split_id, (split, n) in enumerate([("train", spec.n_train), ("test", spec.n_test)]):
        xs, ys = [], []
        for i in range(n):
            for c in range(spec.num_classes):
                rng = np.random.default_rng(derive_seed(spec.seed, split_id, c, i))
                xs.append(quantize(render(spec.generator, c, rng, spec.image_size)))
                ys.append(c)
        x = torch.from_numpy(np.stack(xs).astype(np.float32) / 255.0) if xs else torch.zeros(0, 3, spec.image_size, spec.image_size)
        out[split] = (x, torch.tensor(ys, dtype=torch.long))
    return out


def make_dataset(spec: DatasetSpec, out_dir: str | Path) -> Path:
    """Write ``<split>/<class>/<index>.png`` plus ``index.csv``; returns the index path."""
    from hetpure.io import save_png

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = generate(spec)
    rows = []
    for split, (x, y) in data.items():
        for i in range(len(x)):
            rel = Path(split) / str(int(y[i])) / f"{i:05d}.png"
            (out_dir / rel.parent).mkdir(parents=True, exist_ok=True)
            save_png(x[i], out_dir / rel)
            rows.append((split, int(y[i]), rel.as_posix()))
    index = out_dir / "index.csv"
    with open(index, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "label", "path"])
        w.writerows(rows)
    return index


def load_dataset(root: str | Path):
    """Read a directory written by :func:`make_dataset` back into tensors."""
    from hetpure.io import load_png

    root = Path(root)
    split_data: dict[str, tuple[list, list]] = {}
    with open(root / "index.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            xs, ys = split_data.setdefault(row["split"], ([], []))
            xs.append(load_png(root / row["path"]))
            ys.append(int(row["label"]))
    return {k: (torch.stack(xs), torch.tensor(ys, dtype=torch.long)) for k, (xs, ys) in split_data.items()}
