"""The learned prior: dense-block encoders plus a pluggable latent generator.

The module works on a spatial *latent map*: for the fixed-scale flow this is
the exact rearrangement from :meth:`FixedScaleModel.latent_to_map` at LR
resolution, for the patch flow it is the ``(N, 27, oh, ow)`` grid of patch
latents at HR resolution. The generator predicts a residual on top of the
initial prior and its last layer starts at zero, so an untrained module
returns the initial prior unchanged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .data import resample
from .fixed_scale import FixedScaleModel
from .patch_flow import PatchFlowModel, output_size

__all__ = [
    "DenseBlock",
    "UNetGenerator",
    "EDSRGenerator",
    "SwinGenerator",
    "LatentModule",
    "InitialPrior",
    "compute_initial_prior",
    "predict_latent",
    "BACKBONES",
    "INPUT_MODES",
]

BACKBONES = ("unet", "edsr-baseline", "swin-t")
INPUT_MODES = ("both", "prior_only", "lr_only")


def _zero(conv: nn.Module) -> nn.Module:
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class DenseBlock(nn.Module):
    """Five 3x3 conv layers with concatenative skips and a 1x1 projection."""

    def __init__(self, c_in: int, c_out: int = 32, growth: int = 16, layers: int = 5):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(c_in + i * growth, growth, 3, padding=1) for i in range(layers)
        )
        self.proj = nn.Conv2d(c_in + layers * growth, c_out, 1)

    def forward(self, x):
        feats = [x]
        for conv in self.convs:
            feats.append(F.leaky_relu(conv(torch.cat(feats, dim=1)), 0.2))
        return self.proj(torch.cat(feats, dim=1))


def _pad_to(x: torch.Tensor, mult: int):
    h, w = x.shape[-2:]
    ph, pw = (-h) % mult, (-w) % mult
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    return x, (h, w)


def _double_conv(c_in, c_out):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1), nn.LeakyReLU(0.2),
        nn.Conv2d(c_out, c_out, 3, padding=1), nn.LeakyReLU(0.2),
    )


class UNetGenerator(nn.Module):
    """UNet with ``depth`` resolution levels; width doubles per downsample."""

    def __init__(self, c_in: int, c_out: int, base: int = 64, depth: int = 3):
        super().__init__()
        dims = [base * 2**i for i in range(depth)]
        self.depth = depth
        self.inc = _double_conv(c_in, dims[0])
        self.downs = nn.ModuleList(
            nn.Sequential(nn.Conv2d(dims[i], dims[i + 1], 3, stride=2, padding=1), nn.LeakyReLU(0.2),
                          _double_conv(dims[i + 1], dims[i + 1]))
            for i in range(depth - 1)
        )
        self.reduce = nn.ModuleList(nn.Conv2d(dims[i + 1], dims[i], 1) for i in range(depth - 1))
        self.ups = nn.ModuleList(_double_conv(2 * dims[i], dims[i]) for i in range(depth - 1))
        self.out = _zero(nn.Conv2d(dims[0], c_out, 3, padding=1))

    def forward(self, x):
        x, (h, w) = _pad_to(x, 2 ** (self.depth - 1))
        skips = [self.inc(x)]
        for down in self.downs:
            skips.append(down(skips[-1]))
        y = skips.pop()
        for i in range(self.depth - 2, -1, -1):
            skip = skips.pop()
            y = F.interpolate(self.reduce[i](y), size=skip.shape[-2:], mode="bilinear", align_corners=False)
            y = self.ups[i](torch.cat([y, skip], dim=1))
        return self.out(y)[..., :h, :w]


class _ResBlock(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(dim, dim, 3, padding=1), nn.ReLU(), nn.Conv2d(dim, dim, 3, padding=1))

    def forward(self, x):
        return x + self.body(x)


class EDSRGenerator(nn.Module):
    """EDSR-baseline body (residual blocks, no batch norm) without upsampling."""

    def __init__(self, c_in: int, c_out: int, dim: int = 64, blocks: int = 4):
        super().__init__()
        self.head = nn.Conv2d(c_in, dim, 3, padding=1)
        self.body = nn.Sequential(*[_ResBlock(dim) for _ in range(blocks)], nn.Conv2d(dim, dim, 3, padding=1))
        self.out = _zero(nn.Conv2d(dim, c_out, 3, padding=1))

    def forward(self, x):
        h = self.head(x)
        return self.out(h + self.body(h))


class _SwinBlock(nn.Module):
    def __init__(self, dim, heads, window, shift):
        super().__init__()
        self.window, self.shift = window, shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x):  # (N, H, W, C), H and W multiples of window
        n, h, w, c = x.shape
        ws = self.window
        y = self.norm1(x)
        if self.shift:
            y = torch.roll(y, (-self.shift, -self.shift), dims=(1, 2))
        win = y.reshape(n, h // ws, ws, w // ws, ws, c).permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, c)
        out, _ = self.attn(win, win, win, need_weights=False)
        out = out.reshape(n, h // ws, w // ws, ws, ws, c).permute(0, 1, 3, 2, 4, 5).reshape(n, h, w, c)
        if self.shift:
            out = torch.roll(out, (self.shift, self.shift), dims=(1, 2))
        x = x + out
        return x + self.mlp(self.norm2(x))


class SwinGenerator(nn.Module):
    """Reduced Swin-style generator: windowed self-attention blocks with
    alternating cyclic shifts (no shift mask, no relative position bias)."""

    def __init__(self, c_in: int, c_out: int, dim: int = 48, blocks: int = 4, heads: int = 3, window: int = 4):
        super().__init__()
        self.window = window
        self.embed = nn.Conv2d(c_in, dim, 3, padding=1)
        self.blocks = nn.ModuleList(
            _SwinBlock(dim, heads, window, window // 2 if i % 2 else 0) for i in range(blocks)
        )
        self.out = _zero(nn.Conv2d(dim, c_out, 3, padding=1))

    def forward(self, x):
        x, (h, w) = _pad_to(x, self.window)
        t = self.embed(x).permute(0, 2, 3, 1)
        for blk in self.blocks:
            t = blk(t)
        return self.out(t.permute(0, 3, 1, 2))[..., :h, :w]


def make_generator(backbone: str, c_in: int, c_out: int, **kw) -> nn.Module:
    if backbone == "unet":
        return UNetGenerator(c_in, c_out, base=kw.get("base", 64), depth=kw.get("depth", 3))
    if backbone == "edsr-baseline":
        return EDSRGenerator(c_in, c_out, dim=kw.get("base", 64), blocks=kw.get("blocks", 4))
    if backbone == "swin-t":
        return SwinGenerator(c_in, c_out, dim=kw.get("swin_dim", 48), blocks=kw.get("blocks", 4))
    raise ValueError(f"unknown backbone {backbone!r}; choose from {BACKBONES}")


@dataclass
class InitialPrior:
    """Latent of the upsampled LR image.

    ``z0`` is in the flow's native layout, ``z0_map`` in map layout; the
    encoder sees ``encoder_input`` (the map, globally normalized per image
    when ``normalized``).
    """

    z0: torch.Tensor
    z0_map: torch.Tensor
    encoder_input: torch.Tensor
    normalized: bool
    source_scale: float


def _normalize(m: torch.Tensor) -> torch.Tensor:
    flat = m.reshape(m.shape[0], -1)
    mean = flat.mean(dim=1).view(-1, 1, 1, 1)
    std = flat.std(dim=1, unbiased=False).view(-1, 1, 1, 1)
    return (m - mean) / std.clamp_min(1e-8)


def compute_initial_prior(x: torch.Tensor, s: float, flow, normalize: bool = False) -> InitialPrior:
    """Encode the upsampled LR image with the frozen ``flow``.

    Fixed-scale: ``z0 = f(bicubic_up(x), x)``. Patch flow: ``y = x_up`` means
    every residual is zero, so ``z0_ij = f(0; cond(x, q_ij))``.
    """
    with torch.no_grad():
        if isinstance(flow, FixedScaleModel):
            if abs(s - flow.scale) > 1e-9:
                raise ValueError(f"fixed-scale flow supports s={flow.scale}, got {s}")
            hr_hw = flow.hr_shape(x)
            x_up = resample(x, hr_hw, "cubic", antialias=True)
            z0, _ = flow.hr_to_latent(x_up, x)
            z_map = flow.latent_to_map(z0, hr_hw)
        elif isinstance(flow, PatchFlowModel):
            out_hw = output_size(x.shape[-2:], s)
            z0 = flow.zero_residual_latents(x, out_hw)
            z_map = z0.permute(0, 3, 1, 2).contiguous()
        else:
            raise TypeError(f"unsupported flow type {type(flow).__name__}")
    enc_in = _normalize(z_map) if normalize else z_map
    return InitialPrior(z0, z_map, enc_in, normalize, float(s))


class LatentModule(nn.Module):
    """Image encoder + prior encoder (independent weights) + generator.

    Args:
        latent_channels: channels of the latent map (48 for the default
            fixed-scale flow, 27 for 3x3 patches).
        backbone: one of ``BACKBONES``.
        input_mode: ``"both"``, ``"prior_only"`` or ``"lr_only"``. The total
            encoder width stays ``feature_dim`` in every mode.
        normalize_prior: normalize ``z0`` before the prior encoder.
    """

    def __init__(self, latent_channels: int, backbone: str = "unet", input_mode: str = "both",
                 feature_dim: int = 64, growth: int = 16, unet_depth: int = 3, gen_dim: int = 64,
                 normalize_prior: bool = True, **gen_kw):
        super().__init__()
        if input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")
        if backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {backbone!r}; choose from {BACKBONES}")
        self.config = dict(latent_channels=latent_channels, backbone=backbone, input_mode=input_mode,
                           feature_dim=feature_dim, growth=growth, unet_depth=unet_depth,
                           gen_dim=gen_dim, normalize_prior=normalize_prior, **gen_kw)
        self.input_mode = input_mode
        self.normalize_prior = normalize_prior
        img_dim = {"both": feature_dim // 2, "lr_only": feature_dim, "prior_only": 0}[input_mode]
        pri_dim = feature_dim - img_dim
        self.image_encoder = DenseBlock(3, img_dim, growth) if img_dim else None
        self.prior_encoder = DenseBlock(latent_channels, pri_dim, growth) if pri_dim else None
        self.generator = make_generator(backbone, feature_dim, latent_channels,
                                        base=gen_dim, depth=unet_depth, **gen_kw)

    @property
    def uses_prior(self) -> bool:
        return self.input_mode != "lr_only"

    def forward(self, x: torch.Tensor, prior: InitialPrior | None, map_hw) -> torch.Tensor:
        """Predicted latent map ``(N, C, *map_hw)``."""
        feats = []
        if self.image_encoder is not None:
            f = self.image_encoder(x)
            if tuple(f.shape[-2:]) != tuple(map_hw):
                f = F.interpolate(f, size=tuple(map_hw), mode="bilinear", align_corners=False)
            feats.append(f)
        if self.prior_encoder is not None:
            if prior is None:
                raise ValueError(f"input_mode={self.input_mode!r} needs an initial prior")
            if prior.z0_map.shape[1] != self.config["latent_channels"]:
                raise ValueError(f"initial prior has {prior.z0_map.shape[1]} channels, "
                                 f"module expects {self.config['latent_channels']}")
            if tuple(prior.z0_map.shape[-2:]) != tuple(map_hw):
                raise ValueError("initial prior does not match the latent map size")
            feats.append(self.prior_encoder(prior.encoder_input))
        delta = self.generator(torch.cat(feats, dim=1))
        if self.uses_prior:
            return prior.z0_map + delta
        return delta


def predict_latent(module: LatentModule, flow, x: torch.Tensor, prior: InitialPrior | None = None,
                   s: float | None = None, mode: str | None = None) -> torch.Tensor:
    """Single-pass latent prediction in the flow's native layout."""
    if mode is not None and mode != module.input_mode:
        raise ValueError(f"module was built for input_mode={module.input_mode!r}, not {mode!r}")
    if module.uses_prior and prior is None:
        raise ValueError("this latent module needs an initial prior")
    if s is None:
        if prior is None:
            raise ValueError("scale s is required without an initial prior")
        s = prior.source_scale
    if isinstance(flow, FixedScaleModel):
        hr_hw = flow.hr_shape(x)
        map_hw = (hr_hw[0] // 2**flow.levels, hr_hw[1] // 2**flow.levels)
        out = module(x, prior, map_hw)
        if out.shape[1] != flow.map_channels():
            raise ValueError(f"latent module emits {out.shape[1]} channels, flow needs {flow.map_channels()}")
        return flow.map_to_latent(out, hr_hw)
    if isinstance(flow, PatchFlowModel):
        map_hw = output_size(x.shape[-2:], s)
        out = module(x, prior, map_hw)
        if out.shape[1] != flow.dim:
            raise ValueError(f"latent module emits {out.shape[1]} channels, flow needs {flow.dim}")
        return out.permute(0, 2, 3, 1)
    raise TypeError(f"unsupported flow type {type(flow).__name__}")
