"""Binary checkpoint / tensor containers and PNG helpers.

Checkpoint layout (all little-endian)::

    magic   8 bytes  b"HPCKPT\\x00\\x00"
    version u32
    desc    u32 length + UTF-8 JSON architecture descriptor
    nseg    u32
    nseg x  { u16 name length, name, u32 ndim, ndim x u32 dims, u64 count, count x f32 }

Tensor container: ``b"HPTNSR\\x00\\x00"``, u32 version, u32 ndim, dims, f32 payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch
from PIL import Image

CKPT_MAGIC = b"HPCKPT\x00\x00"
TENSOR_MAGIC = b"HPTNSR\x00\x00"
VERSION = 1


class FormatError(ValueError):
    pass


def _write_array(fh, arr: np.ndarray) -> None:
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype("<f4").tobytes())


def _read_exact(fh, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise FormatError("truncated file")
    return b


def _read_array(fh) -> np.ndarray:
    (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    return np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape).copy()


def save_checkpoint(model: torch.nn.Module, path: str | Path, extra: dict | None = None) -> None:
    desc = dict(model.descriptor)
    desc["meta"] = extra or {}
    blob = json.dumps(desc, sort_keys=True).encode()
    state = model.state_dict()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            arr = tensor.detach().cpu().numpy()
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(struct.pack("<Q", arr.size))
            fh.write(arr.astype("<f4").tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint")
        version, n = struct.unpack("<II", _read_exact(fh, 8))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        desc = json.loads(_read_exact(fh, n))
        (nseg,) = struct.unpack("<I", _read_exact(fh, 4))
        state = {}
        for _ in range(nseg):
            (ln,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, ln).decode()
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            (count,) = struct.unpack("<Q", _read_exact(fh, 8))
            arr = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape)
            state[name] = torch.from_numpy(arr.copy())
    return desc, state


def load_model(path: str | Path):
    """Rebuild a classifier or learned denoiser from its checkpoint."""
    from hetpure.classifier import ClassifierModel
    from hetpure.denoiser import LearnedDenoiser

    desc, state = read_checkpoint(path)
    arch = desc.get("arch")
    if arch == "classifier":
        model = ClassifierModel(
            desc["in_channels"], desc["image_size"], desc["num_classes"], tuple(desc["widths"]), desc["seed"]
        )
    elif arch == "denoiser":
        model = LearnedDenoiser(desc["in_channels"], desc["base"], desc["emb_dim"], desc["seed"])
    else:
        raise FormatError(f"{path}: unknown architecture {arch!r}")
    model.load_state_dict(state)
    model.eval()
    for k, v in desc.get("meta", {}).items():
        setattr(model, k, v)
    return model


def save_tensor(x: torch.Tensor, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_array(fh, x.detach().cpu().numpy())


def load_tensor(path: str | Path) -> torch.Tensor:
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != TENSOR_MAGIC:
            raise FormatError(f"{path}: not a tensor file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        return torch.from_numpy(_read_array(fh))


def save_png(img: torch.Tensor, path: str | Path) -> None:
    """Write a ``(C, H, W)`` image in [0, 1] as 8-bit PNG (1 or 3 channels)."""
    arr = np.round(img.detach().clamp(0, 1).cpu().numpy() * 255).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def save_mask_png(mask: torch.Tensor, path: str | Path) -> None:
    Image.fromarray((mask.detach().cpu().numpy() > 0).astype(np.uint8) * 255, mode="L").save(path)


def load_png(path: str | Path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def load_images(path: str | Path) -> tuple[list[Path], torch.Tensor]:
    """Load a PNG / tensor file, or every PNG under a directory (sorted)."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.rglob("*.png"))
        if not files:
            raise FileNotFoundError(f"no PNG files under {path}")
        return files, torch.stack([load_png(f) for f in files])
    if path.suffix == ".png":
        return [path], load_png(path)[None]
    x = load_tensor(path)
    return [path] * len(x), x if x.dim() == 4 else x[None]
