"""Image tensors, value-range conversion and PNG I/O.

Images are torch tensors laid out ``(C, H, W)`` or ``(N, C, H, W)`` with
C in {1, 3}. Generators emit the ``signed`` range [-1, 1]; extractors, metrics
and files use the ``unit`` range [0, 1]. Conversion is always explicit.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ShapeError

SIGNED = "signed"
UNIT = "unit"
RANGES = {SIGNED: (-1.0, 1.0), UNIT: (0.0, 1.0)}

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def convert_range(img: torch.Tensor, src: str, dst: str) -> torch.Tensor:
    if src not in RANGES or dst not in RANGES:
        raise ValueError(f"unknown range tag {src!r} -> {dst!r}")
    if src == dst:
        return img
    if src == SIGNED:
        return (img + 1.0) * 0.5
    return img * 2.0 - 1.0


def check_range(img: torch.Tensor, tag: str, atol: float = 0.0) -> bool:
    lo, hi = RANGES[tag]
    return bool(((img >= lo - atol) & (img <= hi + atol)).all())


def check_image(img: torch.Tensor) -> None:
    if img.dim() not in (3, 4):
        raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got {tuple(img.shape)}")
    if img.shape[-3] not in (1, 3):
        raise ShapeError(f"expected 1 or 3 channels, got {img.shape[-3]}")
    if img.shape[-1] < 1 or img.shape[-2] < 1:
        raise ShapeError(f"degenerate image of shape {tuple(img.shape)}")


def to_gray(img: np.ndarray) -> np.ndarray:
    """HxW or HxWx3 array -> HxW luminance (ITU-R BT.601 weights)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0]
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ np.asarray(LUMA_WEIGHTS)
    raise ShapeError(f"cannot convert shape {img.shape} to grayscale")


def tensor_to_hwc(img: torch.Tensor, src: str = UNIT) -> np.ndarray:
    """(C,H,W) tensor -> HxWxC float64 array in the unit range."""
    check_image(img)
    if img.dim() == 4:
        raise ShapeError("tensor_to_hwc takes a single image")
    arr = convert_range(img.detach(), src, UNIT).to(torch.float64).cpu().numpy()
    return np.transpose(arr, (1, 2, 0))


def hwc_to_tensor(arr: np.ndarray, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[..., None]
    return torch.from_numpy(np.ascontiguousarray(np.transpose(arr, (2, 0, 1)))).to(dtype)


def to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)


def save_png(path: str | Path, img: torch.Tensor | np.ndarray, src: str = UNIT) -> Path:
    """Write an 8-bit PNG. Tensors are (C,H,W) in range ``src``; arrays are HxW(xC) unit range."""
    arr = tensor_to_hwc(img, src) if isinstance(img, torch.Tensor) else np.asarray(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(arr)).save(path, format="PNG")
    return path


def load_png(path: str | Path, channels: int | None = None) -> np.ndarray:
    """Read a PNG as float64 HxW (grayscale) or HxWx3 in [0, 1].

    ``channels`` forces 1 or 3 channels; by default single-channel files stay
    single-channel and everything else becomes RGB.
    """
    with Image.open(path) as im:
        if channels == 1 or (channels is None and im.mode in ("L", "I;16", "I", "1")):
            arr = np.asarray(im.convert("L"), dtype=np.float64)
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def load_image_tensor(path: str | Path, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """PNG -> (C,H,W) unit-range tensor with C = 1 for grayscale files."""
    return hwc_to_tensor(load_png(path), dtype)
