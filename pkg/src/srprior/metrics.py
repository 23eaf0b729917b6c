"""Evaluation metrics and report containers.

All functions take numpy ``(H, W, 3)`` (or ``(H, W)``) float images in [0, 1].
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import resample

__all__ = [
    "psnr",
    "ssim",
    "lr_psnr",
    "inf_rate",
    "grid_score",
    "luma",
    "ImageRecord",
    "EvalReport",
]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def luma(img: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean SSIM on luma with an 11-tap Gaussian window (sigma 1.5) over the
    fully valid region."""
    a, b = _pair(a, b)
    a, b = luma(a), luma(b)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WINDOW}px SSIM window")
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    trunc = ((SSIM_WINDOW - 1) / 2) / SSIM_SIGMA

    def blur(t):
        return gaussian_filter(t, SSIM_SIGMA, truncate=trunc)

    mu_a, mu_b = blur(a), blur(b)
    va = blur(a * a) - mu_a**2
    vb = blur(b * b) - mu_b**2
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (va + vb + c2)
    r = SSIM_WINDOW // 2
    return float(np.mean((num / den)[r:-r, r:-r]))


def lr_psnr(sr, lr, s: float | None = None) -> float:
    """PSNR between the bicubic-downsampled SR image and the LR input."""
    sr = np.asarray(sr, dtype=np.float64)
    lr = np.asarray(lr, dtype=np.float64)
    if s is not None:
        exp = (int(math.floor(lr.shape[0] * s + 0.5)), int(math.floor(lr.shape[1] * s + 0.5)))
        if sr.shape[:2] != exp:
            raise ValueError(f"SR size {sr.shape[:2]} is not {s}x the LR size {lr.shape[:2]}")
    down = resample(sr, lr.shape[:2], "cubic", antialias=True)
    return psnr(down, lr)


def inf_rate(diags: Sequence) -> float:
    """Percentage of samples whose inverse exploded. Accepts diagnostics
    objects (with ``.nonfinite``) or booleans."""
    flags = [bool(getattr(d, "nonfinite", d)) for d in diags]
    if not flags:
        raise ValueError("inf_rate needs at least one sample")
    return 100.0 * sum(flags) / len(flags)


def grid_score(img, patch_stride: int = 3, offset: int = 0) -> float:
    """Excess second-difference energy on patch seams.

    For a lattice of ``patch_stride`` tiles starting at ``offset``, the
    centred second difference at a row (column) straddles a seam when the
    row sits at either edge of its tile. The score is the mean absolute
    second difference over seam-straddling positions minus the mean over
    tile interiors, clipped at 0. Strides below 3 leave no interior rows and
    are rejected.
    """
    if patch_stride < 3:
        raise ValueError("patch_stride must be >= 3 so tiles have interior rows")
    g = np.asarray(img, dtype=np.float64)
    if g.ndim == 2:
        g = g[..., None]
    h, w = g.shape[:2]
    if patch_stride >= min(h, w):
        raise ValueError(f"stride {patch_stride} not smaller than image size {(h, w)}")
    seam_vals, inner_vals = [], []
    for axis, n in ((0, h), (1, w)):
        d2 = np.abs(np.diff(g, n=2, axis=axis))  # centred at 1..n-2
        pos = (np.arange(1, n - 1) - offset) % patch_stride
        seam = (pos == 0) | (pos == patch_stride - 1)
        take = (lambda m: d2[m]) if axis == 0 else (lambda m: d2[:, m])
        seam_vals.append(take(seam).ravel())
        inner_vals.append(take(~seam).ravel())
    seam_mean = np.concatenate(seam_vals).mean()
    inner_mean = np.concatenate(inner_vals).mean()
    return float(max(seam_mean - inner_mean, 0.0))


def _fmt(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return v


@dataclass
class ImageRecord:
    id: str
    psnr: float = math.nan
    ssim: float = math.nan
    percep: float = math.nan
    lr_psnr: float = math.nan
    nonfinite: bool = False
    grid_score: float = math.nan


@dataclass
class EvalReport:
    """Per-image metrics plus aggregates. Image metrics are averaged over
    finite samples only; exploded samples count toward ``inf_percent``."""

    per_image: list[ImageRecord] = field(default_factory=list)
    config_echo: dict = field(default_factory=dict)

    METRICS = ("psnr", "ssim", "percep", "lr_psnr", "grid_score")

    def add(self, rec: ImageRecord) -> None:
        self.per_image.append(rec)

    @property
    def aggregate(self) -> dict:
        kept = [r for r in self.per_image if not r.nonfinite]
        agg = {}
        for k in self.METRICS:
            vals = [getattr(r, k) for r in kept if not math.isnan(getattr(r, k))]
            agg[k] = float(np.mean(vals)) if vals else math.nan
        agg["inf_percent"] = inf_rate([r.nonfinite for r in self.per_image]) if self.per_image else 0.0
        agg["n_images"] = len(self.per_image)
        agg["n_excluded"] = len(self.per_image) - len(kept)
        return agg

    def to_dict(self) -> dict:
        return {
            "per_image": [{k: _fmt(v) for k, v in asdict(r).items()} for r in self.per_image],
            "aggregate": {k: _fmt(v) for k, v in self.aggregate.items()},
            "config_echo": self.config_echo,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_csv(self, path) -> None:
        fields = list(ImageRecord.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=fields)
            wr.writeheader()
            for r in self.per_image:
                wr.writerow({k: _fmt(v) for k, v in asdict(r).items()})
