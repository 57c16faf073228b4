"""Image quality metrics and evaluation reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

PSNR_CAP = 99.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, cap: float = PSNR_CAP) -> float:
    """``10 log10(1 / mse)`` for images in [0, 1], capped at ``cap``."""
    e = mse(a, b)
    if e == 0.0:
        return cap
    return float(min(10.0 * np.log10(1.0 / e), cap))


def _gauss(size: int = 11, sigma: float = 1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(a, b, size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over valid window positions, averaged over channels.

    Gaussian window, population statistics.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < size:
        raise ValueError(f"image smaller than the {size}x{size} window")
    g = _gauss(size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    crop = size // 2

    def blur(x):
        y = ndimage.correlate1d(x, g, axis=0, mode="reflect")
        y = ndimage.correlate1d(y, g, axis=1, mode="reflect")
        return y[crop:-crop, crop:-crop]

    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = blur(x), blur(y)
        sxx = blur(x * x) - mx * mx
        syy = blur(y * y) - my * my
        sxy = blur(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)  # dicts with name, psnr, ssim, mse

    def add(self, name: str, pred, target) -> dict:
        row = {"name": name, "psnr": psnr(pred, target), "ssim": ssim(pred, target), "mse": mse(pred, target)}
        self.rows.append(row)
        return row

    @property
    def mean(self) -> dict:
        if not self.rows:
            return {"psnr": float("nan"), "ssim": float("nan"), "mse": float("nan")}
        return {k: float(np.mean([r[k] for r in self.rows])) for k in ("psnr", "ssim", "mse")}

    def to_dict(self) -> dict:
        return {"rows": self.rows, "mean": self.mean}

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["name", "psnr", "ssim", "mse"])
            w.writeheader()
            for r in self.rows:
                w.writerow(r)
            w.writerow({"name": "mean", **self.mean})
