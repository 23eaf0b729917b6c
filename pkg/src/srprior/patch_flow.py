"""Arbitrary-scale patch flow (LINF-style).

Each HR pixel position ``(i, j)`` owns an ``n x n`` RGB patch centred on it.
The flow models the residual ``m = y_patch - x_up_patch`` (``x_up`` is the
bilinear upsampling of the LR image), scaled by ``residual_scale``, as a
27-dimensional vector conditioned on

* the LR encoder feature at the nearest LR pixel,
* the offset of the query centre from that pixel (in LR pixel units),
* the cell size relative to an LR pixel,

the last two Fourier-embedded. Patches are assembled into an image by one
of three rules:

``"tile"``
    non-overlapping patches on a stride-``n`` lattice; every pixel comes from
    exactly one patch and independent latents leave visible seams.
``"center"``
    every pixel takes the centre entry of its own patch.
``"average"``
    overlapping patches are blended uniformly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import round_half_up
from .fixed_scale import FP16_MAX, SampleDiagnostics, lr_encoder
from .flow_core import FlowError, InverseTrace, _raise_if_bad, build_vector_flow, standard_normal_logp
from .temperature import sample_latent

__all__ = [
    "PatchQuery",
    "PatchFlowModel",
    "residual_map",
    "patch_log_prob",
    "infer_arbitrary",
    "output_size",
    "ASSEMBLY_RULES",
]

ASSEMBLY_RULES = ("tile", "center", "average")


def output_size(lr_hw, s: float) -> tuple[int, int]:
    return round_half_up(lr_hw[0] * s), round_half_up(lr_hw[1] * s)


def residual_map(y_patch, x_up_patch):
    """``m = y_patch - x_up_patch`` for numpy arrays or tensors of equal shape."""
    if tuple(y_patch.shape) != tuple(x_up_patch.shape):
        raise ValueError(f"patch shapes differ: {tuple(y_patch.shape)} vs {tuple(x_up_patch.shape)}")
    return y_patch - x_up_patch


@dataclass
class PatchQuery:
    """Patch centre ``c = (row, col)`` in normalized [-1, 1] HR coordinates,
    scale ``s`` and HR pixel size ``cell = (2/sH, 2/sW)``. Fields may be
    batched tensors with leading dimension N."""

    c: torch.Tensor
    s: float | torch.Tensor
    cell: torch.Tensor

    def __post_init__(self):
        self.c = torch.as_tensor(self.c, dtype=torch.float32).reshape(-1, 2)
        self.cell = torch.as_tensor(self.cell, dtype=torch.float32).reshape(-1, 2)
        s = torch.as_tensor(self.s, dtype=torch.float32)
        if (s <= 0).any():
            raise ValueError("scale must be positive")
        if (self.c.abs() > 1 + 1e-6).any():
            raise ValueError("patch centre outside the normalized image domain")

    @classmethod
    def at_pixel(cls, i: int, j: int, lr_hw, s: float) -> "PatchQuery":
        oh, ow = output_size(lr_hw, s)
        c = [-1 + (2 * i + 1) / oh, -1 + (2 * j + 1) / ow]
        return cls(c=c, s=s, cell=[2 / oh, 2 / ow])


def _pixel_centres(idx: torch.Tensor, n_out: int) -> torch.Tensor:
    return -1 + (2 * idx.float() + 1) / n_out


def _fourier(v: torch.Tensor, n_freq: int) -> torch.Tensor:
    freqs = (2.0 ** torch.arange(n_freq, dtype=v.dtype)) * math.pi
    ang = v[..., None] * freqs
    return torch.cat([v, torch.sin(ang).flatten(-2), torch.cos(ang).flatten(-2)], dim=-1)


def patch_vectors(img: torch.Tensor, n: int) -> torch.Tensor:
    """All ``n x n`` patches, replicate-padded: ``(N, H*W, 3*n*n)``."""
    p = n // 2
    padded = F.pad(img, (p, p, p, p), mode="replicate")
    return F.unfold(padded, n).transpose(1, 2)


class PatchFlowModel(nn.Module):
    kind = "patch"

    def __init__(self, n: int = 3, enc_channels: int = 32, enc_layers: int = 3, n_freq: int = 8,
                 cond_dim: int = 64, steps: int = 6, hidden: int = 128, depth: int = 2,
                 residual_scale: float = 4.0, saturation: float = FP16_MAX, seed: int = 0,
                 assembly: str = "tile"):
        super().__init__()
        if assembly not in ASSEMBLY_RULES:
            raise ValueError(f"assembly must be one of {ASSEMBLY_RULES}")
        self.config = dict(n=n, enc_channels=enc_channels, enc_layers=enc_layers, n_freq=n_freq,
                           cond_dim=cond_dim, steps=steps, hidden=hidden, depth=depth,
                           residual_scale=residual_scale, saturation=saturation, seed=seed,
                           assembly=assembly)
        self.n = n
        self.dim = 3 * n * n
        self.n_freq = n_freq
        self.residual_scale = float(residual_scale)
        self.saturation = saturation
        self.assembly = assembly
        self.encoder = lr_encoder(3, enc_channels, enc_layers)
        embed = 4 * (1 + 2 * n_freq)
        self.cond_net = nn.Sequential(
            nn.Linear(enc_channels + embed, cond_dim), nn.ReLU(), nn.Linear(cond_dim, cond_dim)
        )
        self.flow = build_vector_flow(self.dim, steps, cond_dim, hidden, depth, seed)

    # conditioning -----------------------------------------------------
    def _cond(self, feat: torch.Tensor, cy: torch.Tensor, cx: torch.Tensor,
              celly: torch.Tensor, cellx: torch.Tensor) -> torch.Tensor:
        """Conditioning vectors ``(N, P, cond_dim)`` for centres ``cy, cx`` of shape ``(N, P)``."""
        n, c, h, w = feat.shape
        iy = torch.clamp(torch.floor((cy + 1) / 2 * h), 0, h - 1).long()
        ix = torch.clamp(torch.floor((cx + 1) / 2 * w), 0, w - 1).long()
        oy = (cy - (-1 + (2 * iy.float() + 1) / h)) * h / 2
        ox = (cx - (-1 + (2 * ix.float() + 1) / w)) * w / 2
        flat = feat.flatten(2)
        index = (iy * w + ix).unsqueeze(1).expand(-1, c, -1)
        local = torch.gather(flat, 2, index).transpose(1, 2)
        geo = torch.stack([oy, ox, celly * h / 2, cellx * w / 2], dim=-1)
        return self.cond_net(torch.cat([local, _fourier(geo, self.n_freq)], dim=-1))

    def _cond_positions(self, feat, rows: torch.Tensor, cols: torch.Tensor, out_hw) -> torch.Tensor:
        n = feat.shape[0]
        oh, ow = out_hw
        cy = _pixel_centres(rows, oh).expand(n, -1)
        cx = _pixel_centres(cols, ow).expand(n, -1)
        return self._cond(feat, cy, cx, torch.full_like(cy, 2 / oh), torch.full_like(cx, 2 / ow))

    def upsample_lr(self, x: torch.Tensor, out_hw) -> torch.Tensor:
        return F.interpolate(x, size=tuple(out_hw), mode="bilinear", align_corners=False)

    @staticmethod
    def all_positions(out_hw) -> tuple[torch.Tensor, torch.Tensor]:
        rr, cc = torch.meshgrid(torch.arange(out_hw[0]), torch.arange(out_hw[1]), indexing="ij")
        return rr.reshape(-1), cc.reshape(-1)

    def tile_layout(self, out_hw):
        """Tile-centre rows/cols and the tile grid size ``(a, b)``.

        Centres sit on a stride-``n`` lattice; a partial last tile takes its
        centre on the image edge so every centre is a real pixel.
        """
        n = self.n
        a, b = math.ceil(out_hw[0] / n), math.ceil(out_hw[1] / n)
        r = (torch.arange(a) * n + n // 2).clamp(max=out_hw[0] - 1)
        c = (torch.arange(b) * n + n // 2).clamp(max=out_hw[1] - 1)
        rr, cc = torch.meshgrid(r, c, indexing="ij")
        return rr.reshape(-1), cc.reshape(-1), (a, b)

    def decode_positions(self, out_hw, assembly: str | None = None):
        assembly = assembly or self.assembly
        if assembly == "tile":
            r, c, _ = self.tile_layout(out_hw)
            return r, c
        return self.all_positions(out_hw)

    # densities --------------------------------------------------------
    def encode_positions(self, y: torch.Tensor, x: torch.Tensor, rows, cols, check: bool = True):
        """Latents ``(N, P, 27)`` and logdet ``(N, P)`` of the HR patches at
        ``(rows, cols)``; logdet includes the residual scaling constant."""
        out_hw = tuple(y.shape[-2:])
        if y.shape[0] != x.shape[0]:
            raise FlowError("HR and LR batch sizes differ")
        feat = self.encoder(x)
        x_up = self.upsample_lr(x, out_hw)
        lin = rows.clamp(max=out_hw[0] - 1) * out_hw[1] + cols.clamp(max=out_hw[1] - 1)
        m = patch_vectors(y, self.n)[:, lin] - patch_vectors(x_up, self.n)[:, lin]
        cond = self._cond_positions(feat, rows, cols, out_hw)
        n, p = m.shape[:2]
        z, logdet = self.flow(self.residual_scale * m.reshape(n * p, -1), cond.reshape(n * p, -1), check=check)
        logdet = logdet + self.dim * math.log(self.residual_scale)
        return z.reshape(n, p, -1), logdet.reshape(n, p)

    def latent_grid(self, y: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        """Exact latent ``z*`` at every HR position: ``(N, oh, ow, 27)``."""
        out_hw = tuple(y.shape[-2:])
        r, c = self.all_positions(out_hw)
        z, _ = self.encode_positions(y, x, r, c)
        return z.reshape(y.shape[0], out_hw[0], out_hw[1], -1)

    def log_prob_positions(self, y, x, rows, cols) -> torch.Tensor:
        z, logdet = self.encode_positions(y, x, rows, cols)
        n, p = z.shape[:2]
        return (standard_normal_logp(z.reshape(n * p, -1)) + logdet.reshape(-1)).reshape(n, p)

    def zero_residual_latents(self, x: torch.Tensor, out_hw) -> torch.Tensor:
        """``f(0; cond)`` at every HR position: the code of ``y = x_up``."""
        feat = self.encoder(x)
        r, c = self.all_positions(out_hw)
        cond = self._cond_positions(feat, r, c, out_hw)
        n, p = cond.shape[:2]
        z, _ = self.flow(torch.zeros(n * p, self.dim), cond.reshape(n * p, -1))
        return z.reshape(n, out_hw[0], out_hw[1], -1)

    # decoding ---------------------------------------------------------
    def latent_shape(self, x: torch.Tensor, out_hw) -> tuple[int, ...]:
        return (x.shape[0], int(out_hw[0]), int(out_hw[1]), self.dim)

    def decode(self, x: torch.Tensor, z: torch.Tensor, out_hw=None, tau: float = 0.0,
               assembly: str | None = None, max_abs: float | None = None):
        """Invert a latent grid ``(N, oh, ow, 27)`` into an image; never raises
        on explosions, returns ``(image, diagnostics)``."""
        img, trace = self.decode_trace(x, z, out_hw, assembly, max_abs)
        return img, _image_diagnostics(trace, x.shape[0], tau)

    def decode_trace(self, x, z, out_hw=None, assembly=None, max_abs=None):
        assembly = assembly or self.assembly
        if assembly not in ASSEMBLY_RULES:
            raise ValueError(f"assembly must be one of {ASSEMBLY_RULES}")
        if max_abs is None:
            max_abs = self.saturation
        if out_hw is None:
            out_hw = tuple(z.shape[1:3])
        oh, ow = out_hw
        if tuple(z.shape) != self.latent_shape(x, out_hw):
            raise FlowError(f"latent grid shape {tuple(z.shape)} != {self.latent_shape(x, out_hw)}")
        if not torch.isfinite(x).all():
            raise FlowError("LR input contains NaN/Inf")
        nb, n = x.shape[0], self.n
        feat = self.encoder(x)
        x_up = self.upsample_lr(x, out_hw)
        rows, cols = self.decode_positions(out_hw, assembly)
        zsel = z[:, rows, cols]
        cond = self._cond_positions(feat, rows, cols, out_hw)
        p = zsel.shape[1]
        trace = self.flow.inverse_trace(zsel.reshape(nb * p, -1), cond.reshape(nb * p, -1), max_abs)
        m = trace.output.reshape(nb, p, -1) / self.residual_scale
        if assembly == "tile":
            _, _, (a, b) = self.tile_layout(out_hw)
            r, c = torch.arange(oh), torch.arange(ow)
            br, bc = r // n, c // n
            tr = rows.view(a, b)[:, 0][br]
            tc = cols.view(a, b)[0][bc]
            dr, dc = r - tr + n // 2, c - tc + n // 2
            m6 = m.reshape(nb, a, b, 3, n, n).permute(1, 2, 4, 5, 0, 3)
            res = m6[br[:, None], bc[None, :], dr[:, None], dc[None, :]]
            img = x_up + res.permute(2, 3, 0, 1)
        elif assembly == "center":
            centre = (n * n) // 2
            mc = m.reshape(nb, p, 3, n * n)[..., centre]
            img = x_up + mc.transpose(1, 2).reshape(nb, 3, oh, ow)
        else:
            vals = patch_vectors(x_up, n) + m
            num = F.fold(vals.transpose(1, 2), (oh, ow), n, padding=n // 2)
            den = F.fold(torch.ones_like(vals).transpose(1, 2), (oh, ow), n, padding=n // 2)
            img = num / den
        return img, trace


def _image_diagnostics(trace: InverseTrace, n_images: int, tau: float) -> list[SampleDiagnostics]:
    per = len(trace.first_bad_layer) // n_images
    out = []
    for b in range(n_images):
        idx = trace.first_bad_layer[b * per : (b + 1) * per]
        bad = [(i, k) for k, i in enumerate(idx) if i is not None]
        if bad:
            i, k = max(bad)
            out.append(SampleDiagnostics(True, i, float(tau), trace.kind[b * per + k], trace.magnitude[b * per + k]))
        else:
            out.append(SampleDiagnostics(False, None, float(tau)))
    return out


def patch_log_prob(model: PatchFlowModel, y_patch: torch.Tensor, x: torch.Tensor, q: PatchQuery) -> torch.Tensor:
    """Log-density of HR patches ``(N, 3, n, n)`` at queries ``q`` (one per sample)."""
    nb, n = x.shape[0], model.n
    if tuple(y_patch.shape) != (nb, 3, n, n):
        raise ValueError(f"expected patches of shape {(nb, 3, n, n)}, got {tuple(y_patch.shape)}")
    c = q.c.expand(nb, 2) if q.c.shape[0] == 1 else q.c
    cell = q.cell.expand(nb, 2) if q.cell.shape[0] == 1 else q.cell
    off = torch.arange(n, dtype=torch.float32) - n // 2
    gy = c[:, 0, None, None] + off[None, :, None] * cell[:, 0, None, None]
    gx = c[:, 1, None, None] + off[None, None, :] * cell[:, 1, None, None]
    grid = torch.stack([gx.expand(-1, n, n), gy.expand(-1, n, n)], dim=-1)
    x_up_patch = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
    m = residual_map(y_patch, x_up_patch).reshape(nb, -1)
    feat = model.encoder(x)
    cond = model._cond(feat, c[:, :1], c[:, 1:], cell[:, :1], cell[:, 1:])[:, 0]
    z, logdet = model.flow(model.residual_scale * m, cond)
    return standard_normal_logp(z) + logdet + model.dim * math.log(model.residual_scale)


def infer_arbitrary(model: PatchFlowModel, x: torch.Tensor, s: float, tau: float | None = None,
                    prior: torch.Tensor | None = None, seed: int = 0, assembly: str | None = None):
    """Super-resolve ``x`` by ``s`` from sampled latents (``tau``) or a latent grid (``prior``).

    Returns ``(image, diagnostics)``; the image is ``round(sH) x round(sW)``.
    """
    if s < 1:
        raise ValueError(f"scale must be >= 1, got {s}")
    if (tau is None) == (prior is None):
        raise ValueError("give exactly one of tau or prior")
    out_hw = output_size(x.shape[-2:], s)
    shape = model.latent_shape(x, out_hw)
    if prior is None:
        z = sample_latent(shape, tau, seed)
    else:
        z = torch.as_tensor(prior, dtype=torch.float32)
        if tuple(z.shape) != shape:
            raise FlowError(f"prior grid shape {tuple(z.shape)} != {shape}")
    with torch.no_grad():
        return model.decode(x, z, out_hw, tau=0.0 if tau is None else tau, assembly=assembly)
