"""Training drivers: flow pretraining by NLL and latent-module training
against a frozen flow.

Both drivers skip any step whose loss (or, for the latent module, whose
decoded image) is non-finite and count it; skipped steps leave every
parameter and the optimizer state untouched.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import state_checksum
from .config import ConfigError
from .fixed_scale import FixedScaleModel
from .flow_core import NonFiniteForward, data_dependent_init
from .latent_module import LatentModule, compute_initial_prior, predict_latent
from .objectives import ObjectiveConfig, latent_loss, make_extractor, perceptual_loss, total_loss
from .data import sample_training_pair, to_tensor
from .patch_flow import PatchFlowModel

__all__ = [
    "TrainConfig",
    "TrainResult",
    "FrozenFlowViolation",
    "build_flow",
    "build_latent_module",
    "train_flow",
    "train_lp",
    "write_curve",
]


class FrozenFlowViolation(RuntimeError):
    """The flow's parameters changed during latent-module training."""


# config keys in the flat file -> TrainConfig attribute
_KEYS = {
    "phase": "phase",
    "model": "model",
    "seed": "seed",
    "train.epochs": "epochs",
    "train.batch_size": "batch_size",
    "train.lr0": "lr0",
    "train.lr_halving_epochs": "lr_halving_epochs",
    "train.steps_per_epoch": "steps_per_epoch",
    "train.skip_on_explosion": "skip_on_explosion",
    "train.grad_clip": "grad_clip",
    "train.dequantize": "dequantize",
    "data.hr_crop": "hr_crop",
    "data.lr_crop": "lr_crop",
    "data.scale": "scale",
    "data.s_min": "s_min",
    "data.s_max": "s_max",
    "data.positions": "positions",
    "loss.lambda": "lam",
    "loss.use_latent": "use_latent",
    "loss.use_percep": "use_percep",
    "loss.extractor": "extractor",
    "latent.backbone": "backbone",
    "latent.input_mode": "input_mode",
    "latent.normalize_prior": "normalize_prior",
    "latent.feature_dim": "feature_dim",
    "latent.gen_dim": "gen_dim",
}


@dataclass
class TrainConfig:
    phase: str = "flow"
    model: str = "fixed"
    epochs: int = 10
    batch_size: int = 8
    lr0: float = 1e-3
    lr_halving_epochs: list = field(default_factory=list)
    steps_per_epoch: int | None = None
    lam: float = 0.0
    use_latent: bool = True
    use_percep: bool = True
    extractor: str = "random"
    seed: int = 0
    skip_on_explosion: bool = True
    grad_clip: float | None = 1.0
    dequantize: bool = True
    hr_crop: int = 32
    lr_crop: int = 16
    scale: float = 4.0
    s_min: float = 1.0
    s_max: float = 4.0
    positions: int = 256
    backbone: str = "unet"
    input_mode: str = "both"
    normalize_prior: bool | None = None
    feature_dim: int = 64
    gen_dim: int = 64
    flow: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.phase not in ("flow", "lp"):
            raise ConfigError(f"phase must be flow or lp, got {self.phase!r}")
        if self.model not in ("fixed", "patch"):
            raise ConfigError(f"model must be fixed or patch, got {self.model!r}")
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        h = list(self.lr_halving_epochs)
        if any(b <= a for a, b in zip(h, h[1:])):
            raise ConfigError(f"lr_halving_epochs must be strictly ascending, got {h}")
        if self.lam < 0:
            raise ConfigError("loss.lambda must be >= 0")
        if not (1 <= self.s_min <= self.s_max):
            raise ConfigError("need 1 <= s_min <= s_max")
        self.lr_halving_epochs = h

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kw, flow = {}, {}
        for k, v in d.items():
            if k.startswith("flow."):
                flow[k[5:]] = v
            elif k in _KEYS:
                kw[_KEYS[k]] = v
            else:
                raise ConfigError(f"unknown config key {k!r}")
        try:
            return cls(flow=flow, **kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        inv = {v: k for k, v in _KEYS.items()}
        out = {inv[f.name]: getattr(self, f.name) for f in fields(self) if f.name in inv}
        out.update({f"flow.{k}": v for k, v in self.flow.items()})
        return out

    @classmethod
    def published_defaults(cls, which: str) -> "TrainConfig":
        """Published schedules: ``"lp-patch"`` and ``"lp-fixed"``."""
        if which == "lp-patch":
            return cls(phase="lp", model="patch", epochs=1000, batch_size=16, lr0=1e-4,
                       lr_halving_epochs=[200, 400, 600, 800], normalize_prior=False)
        if which == "lp-fixed":
            return cls(phase="lp", model="fixed", epochs=5, batch_size=12, lr0=1e-4,
                       lr_halving_epochs=[1, 2, 3, 4], hr_crop=160, normalize_prior=True)
        raise ValueError(f"unknown preset {which!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during 0-based ``epoch``."""
        return self.lr0 * 0.5 ** sum(1 for h in self.lr_halving_epochs if h <= epoch)


@dataclass
class TrainResult:
    model: nn.Module
    curve: list[dict]
    steps: int
    skipped: int
    initial_loss: float = math.nan
    final_loss: float = math.nan
    flow_checksum_before: str | None = None
    flow_checksum_after: str | None = None

    @property
    def skip_fraction(self) -> float:
        return self.skipped / self.steps if self.steps else 0.0


def write_curve(path, curve: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=["epoch", "loss", "lr", "skipped_steps"])
        wr.writeheader()
        for row in curve:
            wr.writerow(row)


def build_flow(cfg: TrainConfig) -> nn.Module:
    torch.manual_seed(cfg.seed)
    kw = dict(cfg.flow)
    kw.setdefault("seed", cfg.seed)
    if cfg.model == "fixed":
        kw.setdefault("scale", int(cfg.scale))
        return FixedScaleModel(**kw)
    return PatchFlowModel(**kw)


def build_latent_module(cfg: TrainConfig, flow) -> LatentModule:
    torch.manual_seed(cfg.seed)
    fixed = isinstance(flow, FixedScaleModel)
    normalize = cfg.normalize_prior if cfg.normalize_prior is not None else fixed
    channels = flow.map_channels() if fixed else flow.dim
    return LatentModule(channels, backbone=cfg.backbone, input_mode=cfg.input_mode,
                        feature_dim=cfg.feature_dim, gen_dim=cfg.gen_dim, normalize_prior=normalize)


class _Batches:
    """Seeded paired-crop sampler shared by both drivers."""

    def __init__(self, cfg: TrainConfig, images: Sequence[np.ndarray]):
        if not images:
            raise ValueError("no training images")
        self.cfg = cfg
        self.images = list(images)
        self.rng = np.random.default_rng(cfg.seed)
        self.gen = torch.Generator().manual_seed(cfg.seed)

    def pair(self):
        cfg = self.cfg
        idx = self.rng.integers(0, len(self.images), cfg.batch_size)
        if cfg.model == "fixed":
            lr_size, s_range, s = cfg.hr_crop // int(cfg.scale), (cfg.scale, cfg.scale), cfg.scale
        else:
            lr_size, s_range = cfg.lr_crop, (cfg.s_min, cfg.s_max)
            s = float(self.rng.uniform(cfg.s_min, cfg.s_max))
        ps = [sample_training_pair(self.images[i], self.rng, lr_size, s_range, s=s) for i in idx]
        return to_tensor([p.x for p in ps]), to_tensor([p.y for p in ps]), ps[0].s

    def positions(self, out_hw):
        p = self.cfg.positions
        r = torch.randint(0, out_hw[0], (p,), generator=self.gen)
        c = torch.randint(0, out_hw[1], (p,), generator=self.gen)
        return r, c

    def dequantize(self, y):
        if not self.cfg.dequantize:
            return y
        return y + torch.rand(y.shape, generator=self.gen) / 256.0


def _steps_per_epoch(cfg: TrainConfig, n_images: int) -> int:
    return cfg.steps_per_epoch or max(1, math.ceil(n_images / cfg.batch_size))


def _flow_nll(model, y, x, positions=None):
    """Bits per dimension of a batch."""
    if isinstance(model, FixedScaleModel):
        lp = model.log_prob(y, x)
        return -lp.mean() / (y[0].numel() * math.log(2))
    r, c = positions
    lp = model.log_prob_positions(y, x, r, c)
    return -lp.mean() / (model.dim * math.log(2))


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def _grads_finite(params) -> bool:
    return all(p.grad is None or torch.isfinite(p.grad).all() for p in params)


def train_flow(cfg: TrainConfig, images: Sequence[np.ndarray], model: nn.Module | None = None,
               log: Callable[[str], None] | None = None) -> TrainResult:
    """Fit a flow by maximum likelihood; returns the model and per-epoch NLL."""
    if cfg.phase != "flow":
        raise ConfigError("train_flow needs phase = flow")
    model = model if model is not None else build_flow(cfg)
    batches = _Batches(cfg, images)
    x0, y0, _ = batches.pair()
    pos0 = batches.positions(y0.shape[-2:]) if cfg.model == "patch" else None
    eval_y = y0 + 0.5 / 256 if cfg.dequantize else y0

    def held_out():
        with torch.no_grad():
            return float(_flow_nll(model, eval_y, x0, pos0))

    if not any(bool(m.initialized) for m in model.modules() if hasattr(m, "initialized")):
        if cfg.model == "fixed":
            data_dependent_init(model, lambda: model.hr_to_latent(eval_y, x0))
        else:
            data_dependent_init(model, lambda: model.encode_positions(eval_y, x0, *pos0))
    initial = held_out()
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr0, betas=(0.9, 0.999))
    n_steps = _steps_per_epoch(cfg, len(images))
    curve, steps, skipped = [], 0, 0
    model.train()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        _set_lr(opt, lr)
        losses, ep_skipped = [], 0
        for _ in range(n_steps):
            steps += 1
            x, y, _ = batches.pair()
            y = batches.dequantize(y)
            pos = batches.positions(y.shape[-2:]) if cfg.model == "patch" else None
            opt.zero_grad()
            try:
                loss = _flow_nll(model, y, x, pos)
            except NonFiniteForward:
                loss = None
            if loss is None or not torch.isfinite(loss):
                ep_skipped += 1
                continue
            loss.backward()
            if not _grads_finite(params):
                opt.zero_grad()
                ep_skipped += 1
                continue
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            losses.append(float(loss.detach()))
        skipped += ep_skipped
        row = dict(epoch=epoch, loss=float(np.mean(losses)) if losses else math.nan, lr=lr,
                   skipped_steps=ep_skipped)
        curve.append(row)
        if log:
            log(f"epoch {epoch} nll {row['loss']:.4f} bits/dim lr {lr:.3g} skipped {ep_skipped}")
    model.eval()
    return TrainResult(model, curve, steps, skipped, initial, held_out())


def _target_latent(flow, y, x):
    if isinstance(flow, FixedScaleModel):
        return flow.hr_to_latent(y, x)[0]
    return flow.latent_grid(y, x)


def _decode(flow, x, z, out_hw):
    if isinstance(flow, FixedScaleModel):
        return flow.decode(x, z)
    return flow.decode(x, z, out_hw)


def train_lp(cfg: TrainConfig, images: Sequence[np.ndarray], flow: nn.Module,
             module: LatentModule | None = None,
             decode_hook: Callable[[int, torch.Tensor], torch.Tensor] | None = None,
             log: Callable[[str], None] | None = None) -> TrainResult:
    """Train a latent module against a frozen ``flow``.

    ``decode_hook(step, y_hat)`` may replace the decoded batch (used to
    inject failures). Raises :class:`FrozenFlowViolation` if the flow's
    parameters differ after training.
    """
    if cfg.phase != "lp":
        raise ConfigError("train_lp needs phase = lp")
    kind = "fixed" if isinstance(flow, FixedScaleModel) else "patch"
    if kind != cfg.model:
        raise ConfigError(f"config model {cfg.model!r} does not match the {kind} flow")
    flow.eval()
    flow.requires_grad_(False)
    before = state_checksum(flow)
    module = module if module is not None else build_latent_module(cfg, flow)
    fx = make_extractor(cfg.extractor)
    obj = ObjectiveConfig(cfg.lam, cfg.use_latent, cfg.use_percep)
    batches = _Batches(cfg, images)
    params = [p for p in module.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr0, betas=(0.9, 0.999))
    n_steps = _steps_per_epoch(cfg, len(images))
    curve, steps, skipped = [], 0, 0
    module.train()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        _set_lr(opt, lr)
        losses, ep_skipped = [], 0
        for _ in range(n_steps):
            steps += 1
            x, y, s = batches.pair()
            out_hw = tuple(y.shape[-2:])
            with torch.no_grad():
                z_star = _target_latent(flow, y, x)
                prior = compute_initial_prior(x, s, flow, module.normalize_prior) if module.uses_prior else None
            opt.zero_grad()
            z_hat = predict_latent(module, flow, x, prior, s)
            with torch.set_grad_enabled(obj.use_percep):
                y_hat, diags = _decode(flow, x, z_hat, out_hw)
            if decode_hook is not None:
                y_hat = decode_hook(steps - 1, y_hat)
            bad = any(d.nonfinite for d in diags) or not torch.isfinite(y_hat).all()
            parts = {}
            if obj.use_latent:
                parts["latent"] = latent_loss(z_hat, z_star)
            if obj.use_percep:
                parts["percep"] = perceptual_loss(y_hat, y, fx)
            loss = total_loss(parts, obj)
            bad = bad or not torch.isfinite(loss)
            if bad:
                if not cfg.skip_on_explosion:
                    raise FloatingPointError(f"non-finite decode or loss at step {steps - 1}")
                ep_skipped += 1
                continue
            loss.backward()
            if not _grads_finite(params):
                opt.zero_grad()
                ep_skipped += 1
                continue
            opt.step()
            losses.append(float(loss.detach()))
        skipped += ep_skipped
        row = dict(epoch=epoch, loss=float(np.mean(losses)) if losses else math.nan, lr=lr,
                   skipped_steps=ep_skipped)
        curve.append(row)
        if log:
            log(f"epoch {epoch} loss {row['loss']:.4f} lr {lr:.3g} skipped {ep_skipped}")
    module.eval()
    after = state_checksum(flow)
    if after != before:
        raise FrozenFlowViolation("flow parameters changed during latent-module training")
    first = curve[0]["loss"] if curve else math.nan
    return TrainResult(module, curve, steps, skipped, first, curve[-1]["loss"] if curve else math.nan,
                       before, after)
