"""Training losses: latent L1, perceptual feature distance, their weighted
sum, and flow NLL in bits per dimension.

Both L1 terms sum absolute differences over all entries of a sample and
average over the batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "ObjectiveConfig",
    "FeatureExtractor",
    "make_extractor",
    "latent_loss",
    "perceptual_loss",
    "total_loss",
    "nll_loss",
]


@dataclass
class ObjectiveConfig:
    lam: float = 0.0
    use_latent: bool = True
    use_percep: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not (self.use_latent or self.use_percep):
            raise ValueError("at least one loss must be enabled")


class FeatureExtractor(nn.Module):
    """Frozen convolutional pyramid used in place of VGG19 features.

    By default five stages (3x3 conv + ReLU; the first at stride 1, the rest
    at stride 2) with weights drawn from a fixed seed. Pretrained weights can
    be supplied with :meth:`from_file`.
    """

    DEFAULT_CHANNELS = (16, 32, 64, 64, 64)

    def __init__(self, channels=DEFAULT_CHANNELS, seed: int = 0, strides=None):
        super().__init__()
        strides = strides or [1] + [2] * (len(channels) - 1)
        g = torch.Generator().manual_seed(seed)
        self.stages = nn.ModuleList()
        c_in = 3
        for c, s in zip(channels, strides):
            conv = nn.Conv2d(c_in, c, 3, stride=s, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * math.sqrt(2.0 / (c_in * 9)))
                conv.bias.zero_()
            self.stages.append(conv)
            c_in = c
        self.requires_grad_(False)
        self.eval()

    @classmethod
    def from_file(cls, path) -> "FeatureExtractor":
        """Load ``stage{i}.weight`` / ``stage{i}.bias`` (and optional
        ``stage{i}.stride``) arrays from an ``.npz`` or torch file."""
        path = Path(path)
        if path.suffix == ".npz":
            raw = {k: torch.from_numpy(np.asarray(v)) for k, v in np.load(path).items()}
        else:
            raw = torch.load(path, map_location="cpu", weights_only=True)
        n = len([k for k in raw if k.endswith(".weight")])
        if n == 0:
            raise ValueError(f"no stage weights in {path}")
        weights = [raw[f"stage{i}.weight"] for i in range(n)]
        strides = [int(raw.get(f"stage{i}.stride", torch.tensor(1 if i == 0 else 2))) for i in range(n)]
        fx = cls(channels=[w.shape[0] for w in weights], strides=strides)
        if weights[0].shape[1] != 3:
            raise ValueError("first stage must take 3 input channels")
        with torch.no_grad():
            for i, conv in enumerate(fx.stages):
                if conv.weight.shape != weights[i].shape:
                    raise ValueError(f"stage {i} weight shape {tuple(weights[i].shape)} is not a 3x3 conv")
                conv.weight.copy_(weights[i])
                conv.bias.copy_(raw.get(f"stage{i}.bias", torch.zeros(conv.bias.shape)))
        return fx

    def features(self, img: torch.Tensor) -> list[torch.Tensor]:
        h = img * 2 - 1
        out = []
        for conv in self.stages:
            h = F.relu(conv(h))
            out.append(h)
        return out

    def forward(self, img):
        return self.features(img)

    def error_map(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Per-pixel feature distance ``(N, H, W)``: each stage's channel-summed
        absolute difference, bilinearly resized to the input size, summed over stages."""
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        size = a.shape[-2:]
        total = torch.zeros(a.shape[0], 1, *size, dtype=a.dtype)
        for fa, fb in zip(self.features(a), self.features(b)):
            d = (fa - fb).abs().sum(dim=1, keepdim=True)
            total = total + F.interpolate(d, size=size, mode="bilinear", align_corners=False)
        return total[:, 0]


def make_extractor(name: str = "random") -> FeatureExtractor:
    if name == "random":
        return FeatureExtractor()
    if name.startswith("external:"):
        return FeatureExtractor.from_file(name.split(":", 1)[1])
    raise ValueError(f"unknown extractor {name!r}")


def _per_sample_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().reshape(a.shape[0], -1).sum(dim=1)


def latent_loss(z_hat: torch.Tensor, z_star: torch.Tensor) -> torch.Tensor:
    if z_hat.shape != z_star.shape:
        raise ValueError(f"shape mismatch: {tuple(z_hat.shape)} vs {tuple(z_star.shape)}")
    if z_hat.dim() == 0 or z_hat.shape[0] < 1:
        raise ValueError("need a batch of at least one latent")
    return _per_sample_l1(z_star, z_hat).mean()


def perceptual_loss(y_hat: torch.Tensor, y: torch.Tensor, fx: FeatureExtractor) -> torch.Tensor:
    if y_hat.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(y_hat.shape)} vs {tuple(y.shape)}")
    if y.dim() != 4 or y.shape[1] != fx.stages[0].in_channels:
        raise ValueError(f"extractor expects (N, {fx.stages[0].in_channels}, H, W), got {tuple(y.shape)}")
    total = 0
    for fa, fb in zip(fx(y), fx(y_hat)):
        total = total + _per_sample_l1(fa, fb)
    return total.mean()


def total_loss(parts: Mapping[str, torch.Tensor], cfg: ObjectiveConfig):
    """``L_percep + lam * L_latent`` with disabled parts contributing 0."""
    if cfg.lam < 0:
        raise ValueError("lambda must be >= 0")
    total = 0.0
    if cfg.use_percep:
        if "percep" not in parts:
            raise KeyError("perceptual loss enabled but not supplied")
        total = total + parts["percep"]
    if cfg.use_latent:
        if "latent" not in parts:
            raise KeyError("latent loss enabled but not supplied")
        total = total + cfg.lam * parts["latent"]
    return total


def nll_loss(log_probs: torch.Tensor, dim: int) -> torch.Tensor:
    """Negative log-likelihood in bits per dimension."""
    if not torch.isfinite(log_probs).all():
        raise ValueError("log-probabilities contain NaN/Inf")
    return -log_probs.mean() / (dim * math.log(2))
