"""Image ingestion, resampling, paired cropping and toy data.

Images are float arrays in [0, 1]. Numpy images are ``(H, W, 3)``; torch
images are batched ``(N, 3, H, W)``. :func:`resample` accepts either.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import torch

__all__ = [
    "PairedSample",
    "round_half_up",
    "resample",
    "bicubic_resample",
    "sample_training_pair",
    "make_toy_images",
    "load_image",
    "save_image",
    "list_images",
    "read_manifest",
    "to_tensor",
    "to_numpy",
]

CUBIC_A = -0.5


def round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def _cubic(t: np.ndarray) -> np.ndarray:
    # Keys kernel with a = -0.5 (Catmull-Rom)
    a = CUBIC_A
    t = np.abs(t)
    out = np.zeros_like(t)
    m1 = t < 1
    m2 = (t >= 1) & (t < 2)
    out[m1] = ((a + 2) * t[m1] - (a + 3)) * t[m1] ** 2 + 1
    out[m2] = ((t[m2] - 5) * t[m2] + 8) * t[m2] * a - 4 * a
    return out


def _linear(t: np.ndarray) -> np.ndarray:
    return np.clip(1.0 - np.abs(t), 0.0, None)


_KERNELS = {"cubic": (_cubic, 2.0), "linear": (_linear, 1.0)}


@lru_cache(maxsize=256)
def _weights(n_in: int, n_out: int, kernel: str, antialias: bool) -> np.ndarray:
    """Dense ``(n_out, n_in)`` resampling matrix, taps renormalized at edges."""
    fn, support = _KERNELS[kernel]
    scale = n_in / n_out
    stretch = max(scale, 1.0) if antialias else 1.0
    support = support * stretch
    w = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        center = (i + 0.5) * scale
        lo = max(int(math.floor(center - support)), 0)
        hi = min(int(math.ceil(center + support)), n_in)
        taps = np.arange(lo, hi)
        k = fn((taps + 0.5 - center) / stretch)
        total = k.sum()
        if total == 0:
            w[i, min(int(center), n_in - 1)] = 1.0
        else:
            w[i, lo:hi] = k / total
    w.setflags(write=False)
    return w


def resample(img, out_hw: tuple[int, int], kernel: str = "cubic", antialias: bool = True):
    """Separable resampling to ``out_hw``.

    ``kernel="cubic"`` is Catmull-Rom (a = -0.5); ``"linear"`` is the
    triangle filter. With ``antialias`` the kernel is stretched by the
    downscale ratio, matching PIL's convention. Same-size calls return an
    unmodified copy.
    """
    oh, ow = int(out_hw[0]), int(out_hw[1])
    if oh < 1 or ow < 1:
        raise ValueError(f"output size must be >= 1, got {(oh, ow)}")
    if kernel not in _KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}")
    if isinstance(img, torch.Tensor):
        h, w = img.shape[-2:]
        if (h, w) == (oh, ow):
            return img.clone()
        wh = torch.tensor(_weights(h, oh, kernel, antialias), dtype=img.dtype, device=img.device)
        ww = torch.tensor(_weights(w, ow, kernel, antialias), dtype=img.dtype, device=img.device)
        return torch.einsum("oh,...hw,pw->...op", wh, img, ww)
    arr = np.asarray(img)
    h, w = arr.shape[:2]
    if (h, w) == (oh, ow):
        return arr.copy()
    wh = _weights(h, oh, kernel, antialias)
    ww = _weights(w, ow, kernel, antialias)
    out = np.tensordot(wh, arr.astype(np.float64), axes=(1, 0))
    out = np.moveaxis(np.tensordot(ww, out, axes=(1, 1)), 0, 1)
    return out.astype(arr.dtype if arr.dtype.kind == "f" else np.float64)


def bicubic_resample(img, factor: float, direction: str = "down", mode: str = "bicubic"):
    """Resize by ``factor``; output sides are ``round_half_up(side * factor)``
    for ``direction="up"`` and ``round_half_up(side / factor)`` for ``"down"``.

    ``mode="bilinear"`` selects the triangle kernel without antialiasing,
    which is the upsampling used for the patch flow's base image.
    """
    if factor <= 0:
        raise ValueError("factor must be positive")
    if direction not in ("up", "down"):
        raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")
    h, w = (img.shape[-2:] if isinstance(img, torch.Tensor) else np.asarray(img).shape[:2])
    f = factor if direction == "up" else 1.0 / factor
    out_hw = (round_half_up(h * f), round_half_up(w * f))
    if out_hw[0] < 1 or out_hw[1] < 1:
        raise ValueError(f"resampled size {out_hw} is empty")
    if mode == "bicubic":
        return resample(img, out_hw, "cubic", antialias=True)
    if mode == "bilinear":
        return resample(img, out_hw, "linear", antialias=False)
    raise ValueError(f"unknown mode {mode!r}")


@dataclass
class PairedSample:
    x: np.ndarray
    y: np.ndarray
    s: float
    source_id: str = ""


def sample_training_pair(
    hr: np.ndarray,
    rng: np.random.Generator,
    lr_size: int = 32,
    s_range: tuple[float, float] = (1.0, 4.0),
    s: float | None = None,
    source_id: str = "",
) -> PairedSample:
    """Draw ``s ~ U(s_range)``, crop a ``round(lr_size * s)`` HR square and
    synthesize the LR crop by antialiased bicubic downsampling.

    The stored ``s`` is the realized ratio ``hr_side / lr_size`` after rounding.
    """
    need = round_half_up(lr_size * s_range[1])
    h, w = hr.shape[:2]
    if h < need or w < need:
        raise ValueError(f"HR image {h}x{w} too small for a {need}x{need} crop")
    if s is None:
        s = float(rng.uniform(*s_range))
    side = round_half_up(lr_size * s)
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    y = hr[top : top + side, left : left + side].copy()
    x = resample(y, (lr_size, lr_size), "cubic", antialias=True)
    return PairedSample(x=x, y=y, s=side / lr_size, source_id=source_id)


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = rng.random((cells, cells, 3))
    return np.clip(resample(coarse, (size, size), "cubic", antialias=False), 0, 1)


def make_toy_images(n: int, size: int = 64, seed: int = 0, quantize: bool = True) -> list[np.ndarray]:
    """Seeded procedural images: gratings, soft shapes, gradients and noise."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    images = []
    for _ in range(n):
        base = rng.random(3)[None, None] * 0.5 + 0.25
        img = np.broadcast_to(base, (size, size, 3)).copy()
        g = rng.normal(size=2)
        img += 0.25 * ((g[0] * (xx - 0.5) + g[1] * (yy - 0.5)))[..., None] * rng.random(3)
        for _ in range(rng.integers(1, 4)):
            theta = rng.uniform(0, np.pi)
            freq = rng.uniform(3, 12)
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
            mask = _smooth_noise(rng, size, 3)[..., :1]
            img += 0.2 * wave[..., None] * mask * rng.uniform(0.3, 1.0, 3)
        for _ in range(rng.integers(1, 5)):
            cy, cx = rng.random(2)
            r = rng.uniform(0.05, 0.25)
            color = rng.random(3)
            d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
            if rng.random() < 0.5:
                alpha = np.clip((r - d) * size / 1.5, 0, 1)
            else:
                half = rng.uniform(0.05, 0.2, 2)
                alpha = ((np.abs(yy - cy) < half[0]) & (np.abs(xx - cx) < half[1])).astype(float)
            img = img * (1 - alpha[..., None]) + color * alpha[..., None]
        img += 0.15 * (_smooth_noise(rng, size, rng.integers(6, 16)) - 0.5)
        img = np.clip(img, 0, 1)
        if quantize:
            img = np.round(img * 255) / 255
        images.append(img.astype(np.float32))
    return images


def to_tensor(img) -> torch.Tensor:
    """``(H, W, 3)`` or a list of them → ``(N, 3, H, W)`` float32."""
    if isinstance(img, (list, tuple)):
        arr = np.stack([np.asarray(a) for a in img])
    else:
        arr = np.asarray(img)[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).float()


def to_numpy(t: torch.Tensor) -> np.ndarray:
    """``(N, 3, H, W)`` → ``(N, H, W, 3)``; a single image drops the batch axis."""
    arr = t.detach().cpu().numpy().transpose(0, 2, 3, 1)
    return arr[0] if arr.shape[0] == 1 else arr


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read an 8- or 16-bit PNG as RGB float32 in [0, 1]."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FileNotFoundError(path)
    if raw.dtype == np.uint16:
        arr = raw.astype(np.float32) / 65535.0
    elif raw.dtype == np.uint8:
        arr = raw.astype(np.float32) / 255.0
    else:
        raise ValueError(f"unsupported pixel type {raw.dtype} in {path}")
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    elif arr.shape[2] == 4:
        arr = arr[..., :3]
    return np.ascontiguousarray(arr[..., ::-1])


def save_image(path: str | os.PathLike, img: np.ndarray, bits: int = 8) -> None:
    arr = np.nan_to_num(np.asarray(img, dtype=np.float64), nan=0.0, posinf=1.0, neginf=0.0)
    arr = np.clip(arr, 0, 1)
    if bits == 16:
        out = np.round(arr * 65535).astype(np.uint16)
    else:
        out = np.round(arr * 255).astype(np.uint8)
    if out.ndim == 3:
        out = out[..., ::-1]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), np.ascontiguousarray(out)):
        raise OSError(f"could not write {path}")


def list_images(directory: str | os.PathLike) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".png")


def read_manifest(path: str | os.PathLike) -> list[Path]:
    root = Path(path).parent
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            p = Path(line)
            out.append(p if p.is_absolute() else root / p)
    return out


def load_images(paths: Sequence[str | os.PathLike]) -> list[np.ndarray]:
    return [load_image(p) for p in paths]
