"""Fixed-scale conditional flow over whole HR images (SRFlow-style).

The HR image is squeezed ``levels`` times; each level runs ``steps`` flow
steps conditioned on LR encoder features resized to that level, and all but
the last level split off half their channels. The split-off parts and the
final activation are flattened into one latent vector of ``3·(sH)·(sW)``
entries.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .flow_core import (
    ActNorm,
    AffineCoupling,
    ConditionalFlow,
    FlowError,
    InverseTrace,
    Permutation,
    _raise_if_bad,
    standard_normal_logp,
)
from .temperature import sample_latent

__all__ = ["SampleDiagnostics", "FixedScaleModel", "lr_encoder", "diagnostics_from_trace"]

FP16_MAX = 65504.0


@dataclass
class SampleDiagnostics:
    nonfinite: bool
    first_bad_layer: int | None
    temperature_used: float
    kind: str | None = None
    magnitude: float = 0.0


def diagnostics_from_trace(trace: InverseTrace, tau: float) -> list[SampleDiagnostics]:
    return [
        SampleDiagnostics(i is not None, i, float(tau), k, m)
        for i, k, m in zip(trace.first_bad_layer, trace.kind, trace.magnitude)
    ]


def lr_encoder(c_in: int, channels: int, layers: int) -> nn.Sequential:
    mods: list[nn.Module] = [nn.Conv2d(c_in, channels, 3, padding=1)]
    for _ in range(layers - 1):
        mods += [nn.ReLU(), nn.Conv2d(channels, channels, 3, padding=1)]
    return nn.Sequential(*mods)


class FixedScaleModel(nn.Module):
    """Conditional flow ``y <-> z`` given the LR image ``x``.

    Args:
        scale: integer upscaling factor ``s``.
        levels: number of squeeze levels; ``sH`` must be divisible by ``2**levels``.
        steps: flow steps (actnorm, permutation, coupling) per level.
        hidden: width of the coupling networks.
        enc_channels, enc_layers: LR encoder width and depth.
        saturation: inverse intermediates above this magnitude count as an
            exploding inverse (half-precision range by default).
    """

    kind = "fixed"

    def __init__(self, scale: int = 4, levels: int = 2, steps: int = 4, hidden: int = 32,
                 enc_channels: int = 32, enc_layers: int = 4, saturation: float = FP16_MAX,
                 seed: int = 0):
        super().__init__()
        self.config = dict(scale=scale, levels=levels, steps=steps, hidden=hidden,
                           enc_channels=enc_channels, enc_layers=enc_layers,
                           saturation=saturation, seed=seed)
        self.scale = int(scale)
        self.levels = levels
        self.saturation = saturation
        self.encoder = lr_encoder(3, enc_channels, enc_layers)
        self.flows = nn.ModuleList()
        self.emit_channels: list[int] = []
        c, offset = 3, 0
        for lvl in range(levels):
            c *= 4
            layers: list[nn.Module] = []
            for k in range(steps):
                layers += [
                    ActNorm(c),
                    Permutation(c, seed * 1000 + lvl * 100 + k),
                    AffineCoupling(c, enc_channels, hidden, spatial=True),
                ]
            self.flows.append(ConditionalFlow(layers, index_offset=offset))
            offset += len(layers)
            if lvl < levels - 1:
                self.emit_channels.append(c // 2)
                c -= c // 2
        self.final_channels = c
        self.n_layers = offset

    # shapes -----------------------------------------------------------
    def hr_shape(self, x: torch.Tensor) -> tuple[int, int]:
        return x.shape[-2] * self.scale, x.shape[-1] * self.scale

    def latent_pieces(self, hr_hw: tuple[int, int]) -> list[tuple[int, int, int]]:
        h, w = hr_hw
        if h % (2**self.levels) or w % (2**self.levels):
            raise FlowError(f"HR size {hr_hw} not divisible by 2**{self.levels}")
        pieces = []
        for lvl, ce in enumerate(self.emit_channels):
            f = 2 ** (lvl + 1)
            pieces.append((ce, h // f, w // f))
        f = 2**self.levels
        pieces.append((self.final_channels, h // f, w // f))
        return pieces

    def latent_dim(self, hr_hw: tuple[int, int]) -> int:
        return sum(math.prod(p) for p in self.latent_pieces(hr_hw))

    def latent_shape(self, x: torch.Tensor, out_hw=None) -> tuple[int, ...]:
        return (x.shape[0], self.latent_dim(self.hr_shape(x)))

    def _check_pair(self, y: torch.Tensor, x: torch.Tensor) -> None:
        if y.shape[0] != x.shape[0] or tuple(y.shape[-2:]) != self.hr_shape(x):
            raise FlowError(f"HR shape {tuple(y.shape)} is not {self.scale}x LR shape {tuple(x.shape)}")

    def _contexts(self, x: torch.Tensor) -> list[torch.Tensor]:
        if not torch.isfinite(x).all():
            raise FlowError("LR input contains NaN/Inf")
        feat = self.encoder(x)
        h, w = self.hr_shape(x)
        out = []
        for lvl in range(self.levels):
            size = (h // 2 ** (lvl + 1), w // 2 ** (lvl + 1))
            if size == tuple(feat.shape[-2:]):
                out.append(feat)
            else:
                out.append(F.interpolate(feat, size=size, mode="bilinear", align_corners=False))
        return out

    # flows ------------------------------------------------------------
    def hr_to_latent(self, y: torch.Tensor, x: torch.Tensor, check: bool = True):
        """Encode ``y`` to its flat latent; returns ``(z, logdet)``."""
        self._check_pair(y, x)
        ctx = self._contexts(x)
        self.latent_pieces(tuple(y.shape[-2:]))
        h = y
        zs = []
        logdet = torch.zeros(y.shape[0], dtype=torch.float64, device=y.device)
        for lvl, flow in enumerate(self.flows):
            h = F.pixel_unshuffle(h, 2)
            h, ld = flow(h, ctx[lvl], check=check)
            logdet = logdet + ld
            if lvl < self.levels - 1:
                ce = self.emit_channels[lvl]
                zs.append(h[:, :ce])
                h = h[:, ce:]
        zs.append(h)
        return torch.cat([t.reshape(t.shape[0], -1) for t in zs], dim=1), logdet

    def _unflatten(self, z: torch.Tensor, hr_hw) -> list[torch.Tensor]:
        pieces = self.latent_pieces(hr_hw)
        sizes = [math.prod(p) for p in pieces]
        if z.dim() != 2 or z.shape[1] != sum(sizes):
            raise FlowError(f"latent shape {tuple(z.shape)} does not match (N, {sum(sizes)})")
        return [t.reshape(z.shape[0], *p) for t, p in zip(torch.split(z, sizes, dim=1), pieces)]

    def inverse_trace(self, z: torch.Tensor, x: torch.Tensor, max_abs: float | None = None) -> InverseTrace:
        if z.shape[0] != x.shape[0]:
            raise FlowError("latent and LR batch sizes differ")
        if max_abs is None:
            max_abs = self.saturation
        ctx = self._contexts(x)
        parts = self._unflatten(z, self.hr_shape(x))
        n = z.shape[0]
        trace = InverseTrace(z, [None] * n, [0.0] * n, [None] * n)
        h = parts[-1]
        for lvl in range(self.levels - 1, -1, -1):
            if lvl < self.levels - 1:
                h = torch.cat([parts[lvl], h], dim=1)
            trace = self.flows[lvl].inverse_trace(h, ctx[lvl], max_abs, trace)
            h = F.pixel_shuffle(trace.output, 2)
        trace.output = h
        return trace

    def latent_to_hr(self, z: torch.Tensor, x: torch.Tensor, max_abs: float | None = None) -> torch.Tensor:
        """Invert; raises :class:`NonFiniteInverse` on an exploding inverse."""
        tr = self.inverse_trace(z, x, max_abs)
        _raise_if_bad(tr)
        return tr.output

    def log_prob(self, y: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        z, logdet = self.hr_to_latent(y, x)
        return standard_normal_logp(z) + logdet

    # latent layout ----------------------------------------------------
    def latent_to_map(self, z: torch.Tensor, hr_hw) -> torch.Tensor:
        """Flat latent -> ``(N, 3·4**levels, sH/2**L, sW/2**L)`` by exact rearrangement."""
        parts = self._unflatten(z, hr_hw)
        maps = []
        for lvl, p in enumerate(parts[:-1]):
            maps.append(F.pixel_unshuffle(p, 2 ** (self.levels - 1 - lvl)))
        maps.append(parts[-1])
        return torch.cat(maps, dim=1)

    def map_to_latent(self, m: torch.Tensor, hr_hw) -> torch.Tensor:
        pieces = self.latent_pieces(hr_hw)
        chans = [c * 4 ** (self.levels - 1 - lvl) for lvl, (c, _, _) in enumerate(pieces[:-1])]
        chans.append(pieces[-1][0])
        out = []
        for lvl, t in enumerate(torch.split(m, chans, dim=1)):
            if lvl < len(pieces) - 1:
                t = F.pixel_shuffle(t, 2 ** (self.levels - 1 - lvl))
            out.append(t.reshape(t.shape[0], -1))
        return torch.cat(out, dim=1)

    def map_channels(self) -> int:
        return 3 * 4**self.levels

    # inference --------------------------------------------------------
    def decode(self, x: torch.Tensor, z: torch.Tensor, out_hw=None, tau: float = 0.0):
        tr = self.inverse_trace(z, x)
        return tr.output, diagnostics_from_trace(tr, tau)

    def sample_or_diagnose(self, x: torch.Tensor, tau: float, seed: int = 0, latent_scale: float = 1.0):
        """Draw ``z ~ N(0, tau^2 I)`` and invert, never raising.

        Returns ``(y_hat, diagnostics)``; ``y_hat`` keeps any non-finite entries.
        """
        z = sample_latent(self.latent_shape(x), tau, seed) * latent_scale
        with torch.no_grad():
            tr = self.inverse_trace(z, x)
        return tr.output, diagnostics_from_trace(tr, tau)

    def infer_with_prior(self, x: torch.Tensor, z_hat: torch.Tensor):
        tr = self.inverse_trace(z_hat, x)
        return tr.output, diagnostics_from_trace(tr, 0.0)
