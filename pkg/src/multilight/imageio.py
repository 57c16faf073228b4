"""PNG reading and writing for linear and display-encoded channels."""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np


def _to_cv(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3 and img.shape[2] == 3:
        return img[..., ::-1]
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0]
    return img


def write_png8(path, img: np.ndarray) -> None:
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if not cv2.imwrite(str(path), np.ascontiguousarray(_to_cv(q))):
        raise OSError(f"could not write {path}")


def write_png16(path, img: np.ndarray) -> None:
    q = np.round(np.clip(img, 0.0, 1.0) * 65535.0).astype(np.uint16)
    if not cv2.imwrite(str(path), np.ascontiguousarray(_to_cv(q))):
        raise OSError(f"could not write {path}")


def read_png(path, channels: int | None = None) -> np.ndarray:
    """Read an 8- or 16-bit PNG into float64 in [0, 1], shape (H, W, C)."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FileNotFoundError(path)
    scale = 65535.0 if raw.dtype == np.uint16 else 255.0
    img = raw.astype(np.float64) / scale
    if img.ndim == 2:
        img = img[..., None]
    else:
        img = img[..., ::-1]
    if channels is not None and img.shape[2] != channels:
        raise ValueError(f"{Path(path).name}: expected {channels} channels, got {img.shape[2]}")
    return img
