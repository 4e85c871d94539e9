"""8-bit PNG reading/writing and tensor conversion helpers."""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from stainbridge.errors import InputValidationError


def read_rgb(path) -> np.ndarray:
    """Read an 8-bit 3-channel PNG as (H, W, 3) uint8; refuses other modes."""
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise InputValidationError(f"{path}: expected an RGB image, got mode {im.mode!r}")
        return np.asarray(im, dtype=np.uint8).copy()


def image_size(path) -> tuple[int, int]:
    """(height, width) from the file header, without decoding pixels."""
    with Image.open(path) as im:
        w, h = im.size
        return h, w


def write_png(path, array: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array losslessly, atomically."""
    array = np.asarray(array)
    if array.dtype != np.uint8 or array.ndim != 3 or array.shape[2] != 3:
        raise InputValidationError(f"expected (H, W, 3) uint8, got {array.shape} {array.dtype}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".png")
    os.close(fd)
    try:
        Image.fromarray(array, mode="RGB").save(tmp, format="PNG")
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, C) uint8 in [0, 255] -> (C, H, W) float32 in [-1, 1]."""
    return torch.from_numpy(image.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def to_uint8(tensor: torch.Tensor) -> np.ndarray:
    """(C, H, W) in [-1, 1] -> (H, W, C) uint8, inverse of :func:`to_tensor`."""
    x = ((tensor.detach().cpu().float().clamp(-1, 1) + 1.0) * 127.5).round()
    return x.permute(1, 2, 0).numpy().astype(np.uint8)
