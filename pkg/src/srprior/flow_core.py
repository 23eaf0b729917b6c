"""Invertible conditional layers and their composition.

Every layer maps ``(u, cond) -> (v, logdet)`` and back. Layers act on
either image tensors ``(N, C, H, W)`` or vectors ``(N, D)``; the channel
axis is always dim 1. Log-determinants are returned per sample in float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

__all__ = [
    "ConditioningContext",
    "FlowError",
    "NonFiniteForward",
    "NonFiniteInverse",
    "InverseTrace",
    "ActNorm",
    "Permutation",
    "AffineCoupling",
    "ConditionalFlow",
    "flow_forward",
    "flow_inverse",
    "log_prob",
    "standard_normal_logp",
    "data_dependent_init",
    "SCALE_BOUND",
]

SCALE_BOUND = 2.0
LOG_2PI = math.log(2 * math.pi)


class FlowError(RuntimeError):
    """Configuration or shape problem in a flow."""


class NonFiniteForward(FloatingPointError):
    def __init__(self, layer_index: int, magnitude: float):
        self.layer_index = layer_index
        self.magnitude = magnitude
        where = "input" if layer_index == 0 else f"layer {layer_index}"
        super().__init__(f"non-finite values after {where} in the forward pass")


class NonFiniteInverse(FloatingPointError):
    """Exploding inverse: an intermediate became NaN/Inf or exceeded the
    saturation limit while inverting.

    Attributes:
        layer_index: 1-based index (forward numbering) of the first layer
            whose inverse output was bad.
        magnitude: largest absolute finite entry seen at that layer, or inf.
        kind: ``"nan"``, ``"inf"`` or ``"saturated"``.
    """

    def __init__(self, layer_index: int, magnitude: float, kind: str = "inf"):
        self.layer_index = layer_index
        self.magnitude = magnitude
        self.kind = kind
        super().__init__(f"exploding inverse ({kind}) at layer {layer_index}, |max| = {magnitude:.3g}")


@dataclass
class ConditioningContext:
    """Conditioning activations. For image flows ``features`` is
    ``(N, C, H, W)``; for vector flows ``(N, C)``."""

    features: torch.Tensor | None
    spatial_shape: tuple[int, ...] = ()

    def check(self) -> None:
        if self.features is not None and not torch.isfinite(self.features).all():
            raise FlowError("conditioning features contain NaN/Inf")


def _as_cond(ctx) -> torch.Tensor | None:
    if isinstance(ctx, ConditioningContext):
        return ctx.features
    return ctx


def _sum_nonbatch(t: torch.Tensor) -> torch.Tensor:
    return t.reshape(t.shape[0], -1).sum(dim=1)


class ActNorm(nn.Module):
    """Per-channel affine ``v = (u + bias) * exp(logs)``.

    Starts as the identity. :func:`data_dependent_init` sets it so the first
    batch has zero mean and unit variance per channel.
    """

    kind = "actnorm"

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.bias = nn.Parameter(torch.zeros(channels))
        self.logs = nn.Parameter(torch.zeros(channels))
        self.register_buffer("initialized", torch.tensor(False))
        self._pending = False

    def _view(self, p: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
        return p.view(1, -1, *([1] * (u.dim() - 2)))

    def forward(self, u, cond=None):
        if self._pending:
            with torch.no_grad():
                dims = [0] + list(range(2, u.dim()))
                mean = u.mean(dim=dims)
                std = u.std(dim=dims, unbiased=False)
                self.bias.copy_(-mean)
                self.logs.copy_(-torch.log(std + 1e-6))
                self.initialized.fill_(True)
            self._pending = False
        v = (u + self._view(self.bias, u)) * torch.exp(self._view(self.logs, u))
        pixels = math.prod(u.shape[2:]) if u.dim() > 2 else 1
        logdet = (self.logs.sum() * pixels).double().expand(u.shape[0])
        return v, logdet

    def inverse(self, v, cond=None):
        return v * torch.exp(-self._view(self.logs, v)) - self._view(self.bias, v)


class Permutation(nn.Module):
    """Fixed channel permutation drawn from ``seed``."""

    kind = "permutation"

    def __init__(self, channels: int, seed: int):
        super().__init__()
        self.channels = channels
        self.seed = int(seed)
        perm = self.make(channels, self.seed)
        self.register_buffer("perm", perm)
        self.register_buffer("inv_perm", torch.argsort(perm))

    @staticmethod
    def make(channels: int, seed: int) -> torch.Tensor:
        return torch.from_numpy(np.random.default_rng(seed).permutation(channels)).long()

    def forward(self, u, cond=None):
        return u[:, self.perm], torch.zeros(u.shape[0], dtype=torch.float64, device=u.device)

    def inverse(self, v, cond=None):
        return v[:, self.inv_perm]


def _conv_net(c_in: int, c_out: int, hidden: int) -> nn.Sequential:
    net = nn.Sequential(
        nn.Conv2d(c_in, hidden, 3, padding=1),
        nn.ReLU(),
        nn.Conv2d(hidden, c_out, 3, padding=1),
    )
    nn.init.zeros_(net[-1].weight)
    nn.init.zeros_(net[-1].bias)
    return net


def _mlp_net(c_in: int, c_out: int, hidden: int, depth: int = 1) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Linear(c_in, hidden), nn.ReLU()]
    for _ in range(depth - 1):
        layers += [nn.Linear(hidden, hidden), nn.ReLU()]
    layers.append(nn.Linear(hidden, c_out))
    net = nn.Sequential(*layers)
    nn.init.zeros_(net[-1].weight)
    nn.init.zeros_(net[-1].bias)
    return net


class AffineCoupling(nn.Module):
    """Conditional affine coupling on the second half of the channels.

    ``v_b = u_b * exp(a * tanh(raw)) + shift`` with ``(raw, shift)`` predicted
    from ``[u_a, cond]``; ``a = SCALE_BOUND`` keeps each scale in
    ``[e^-a, e^a]``. The last layer of the conditioning net is zero so the
    layer starts as the identity.
    """

    kind = "coupling"

    def __init__(self, channels: int, cond_channels: int = 0, hidden: int = 64,
                 spatial: bool = True, depth: int = 1, scale_bound: float = SCALE_BOUND):
        super().__init__()
        if channels < 2:
            raise FlowError("coupling needs at least 2 channels")
        self.channels = channels
        self.cond_channels = cond_channels
        self.spatial = spatial
        self.scale_bound = scale_bound
        self.n_a = channels // 2
        self.n_b = channels - self.n_a
        if spatial:
            self.net = _conv_net(self.n_a + cond_channels, 2 * self.n_b, hidden)
        else:
            self.net = _mlp_net(self.n_a + cond_channels, 2 * self.n_b, hidden, depth)

    def _params(self, u_a, cond):
        cond = _as_cond(cond)
        h = u_a if cond is None or self.cond_channels == 0 else torch.cat([u_a, cond], dim=1)
        out = self.net(h)
        raw, shift = out[:, : self.n_b], out[:, self.n_b :]
        log_scale = self.scale_bound * torch.tanh(raw)
        return log_scale, shift

    def forward(self, u, cond=None):
        u_a, u_b = u[:, : self.n_a], u[:, self.n_a :]
        log_scale, shift = self._params(u_a, cond)
        v_b = u_b * torch.exp(log_scale) + shift
        return torch.cat([u_a, v_b], dim=1), _sum_nonbatch(log_scale).double()

    def inverse(self, v, cond=None):
        v_a, v_b = v[:, : self.n_a], v[:, self.n_a :]
        log_scale, shift = self._params(v_a, cond)
        u_b = (v_b - shift) * torch.exp(-log_scale)
        return torch.cat([v_a, u_b], dim=1)


@dataclass
class InverseTrace:
    """Per-sample record of an inverse pass that was allowed to fail."""

    output: torch.Tensor
    first_bad_layer: list[int | None]
    magnitude: list[float]
    kind: list[str | None]

    @property
    def any_bad(self) -> bool:
        return any(i is not None for i in self.first_bad_layer)


def _per_sample_status(t: torch.Tensor, limit: float | None):
    flat = t.detach().reshape(t.shape[0], -1)
    has_nan = torch.isnan(flat).any(dim=1)
    finite = torch.isfinite(flat)
    has_inf = (~finite).any(dim=1) & ~has_nan
    mag = torch.where(finite, flat.abs(), torch.zeros_like(flat)).amax(dim=1).double()
    mag = torch.where(has_inf | has_nan, torch.full_like(mag, math.inf), mag)
    sat = torch.zeros_like(has_nan) if limit is None else (mag > limit) & ~has_nan & ~has_inf
    return has_nan, has_inf, sat, mag


class ConditionalFlow(nn.Module):
    """Ordered stack ``f_k ∘ … ∘ f_1`` with a standard-normal prior.

    Layer indices are 1-based in forward order; ``index_offset`` shifts them
    when the stack is one block of a larger model.
    """

    def __init__(self, layers: Iterable[nn.Module], index_offset: int = 0):
        super().__init__()
        self.layers = nn.ModuleList(layers)
        self.index_offset = index_offset

    def __len__(self):
        return len(self.layers)

    def forward(self, y, cond=None, check: bool = True, per_layer: bool = False):
        if check and not torch.isfinite(y).all():
            raise NonFiniteForward(self.index_offset, math.inf)
        logdet = torch.zeros(y.shape[0], dtype=torch.float64, device=y.device)
        parts = []
        h = y
        for i, layer in enumerate(self.layers, start=1):
            h, ld = layer(h, cond)
            if check and not torch.isfinite(h).all():
                raise NonFiniteForward(self.index_offset + i, math.inf)
            logdet = logdet + ld
            if per_layer:
                parts.append(ld)
        if per_layer:
            return h, logdet, parts
        return h, logdet

    def inverse_trace(self, z, cond=None, max_abs: float | None = None, trace: InverseTrace | None = None):
        """Invert without raising; the first bad layer per sample is recorded."""
        n = z.shape[0]
        if trace is None:
            trace = InverseTrace(z, [None] * n, [0.0] * n, [None] * n)
        h = z
        for i in range(len(self.layers), 0, -1):
            h = self.layers[i - 1].inverse(h, cond)
            _record(trace, h, self.index_offset + i, max_abs)
        trace.output = h
        return trace

    def inverse(self, z, cond=None, max_abs: float | None = None):
        tr = self.inverse_trace(z, cond, max_abs)
        _raise_if_bad(tr)
        return tr.output


def _record(trace: InverseTrace, h: torch.Tensor, index: int, limit: float | None) -> None:
    has_nan, has_inf, sat, mag = _per_sample_status(h, limit)
    bad = (has_nan | has_inf | sat).tolist()
    for k, b in enumerate(bad):
        if b and trace.first_bad_layer[k] is None:
            trace.first_bad_layer[k] = index
            trace.magnitude[k] = float(mag[k])
            trace.kind[k] = "nan" if has_nan[k] else ("inf" if has_inf[k] else "saturated")


def _raise_if_bad(trace: InverseTrace) -> None:
    """Raise for the sample whose failure happened earliest in the inverse pass
    (the highest forward index)."""
    bad = [(i, k) for k, i in enumerate(trace.first_bad_layer) if i is not None]
    if bad:
        idx, k = max(bad)
        raise NonFiniteInverse(idx, trace.magnitude[k], trace.kind[k])


def standard_normal_logp(z: torch.Tensor) -> torch.Tensor:
    flat = z.reshape(z.shape[0], -1).double()
    return -0.5 * (flat**2).sum(dim=1) - 0.5 * flat.shape[1] * LOG_2PI


def flow_forward(flow: ConditionalFlow, y, ctx=None, check: bool = True):
    if isinstance(ctx, ConditioningContext):
        ctx.check()
    return flow(y, _as_cond(ctx), check=check)


def flow_inverse(flow: ConditionalFlow, z, ctx=None, max_abs: float | None = None):
    return flow.inverse(z, _as_cond(ctx), max_abs=max_abs)


def log_prob(flow: ConditionalFlow, y, ctx=None) -> torch.Tensor:
    z, logdet = flow_forward(flow, y, ctx)
    return standard_normal_logp(z) + logdet


def actnorm_layers(module: nn.Module) -> list[ActNorm]:
    return [m for m in module.modules() if isinstance(m, ActNorm)]


def data_dependent_init(module: nn.Module, run) -> None:
    """Arm every ActNorm in ``module`` and call ``run()`` once; each
    ActNorm initializes from the activations it sees."""
    layers = actnorm_layers(module)
    for m in layers:
        m._pending = True
    try:
        with torch.no_grad():
            run()
    finally:
        for m in layers:
            m._pending = False


def layer_specs(module: nn.Module) -> list[dict]:
    specs = []
    for name, m in module.named_modules():
        kind = getattr(m, "kind", None)
        if kind in ("actnorm", "permutation", "coupling"):
            shapes = {k: list(v.shape) for k, v in m.state_dict().items()}
            entry = {"name": name, "kind": kind, "shapes": shapes}
            if kind == "permutation":
                entry["seed"] = m.seed
            specs.append(entry)
    return specs


def permutation_seeds(module: nn.Module) -> list[int]:
    return [m.seed for m in module.modules() if isinstance(m, Permutation)]


def perturb_(module: nn.Module, std: float, seed: int = 0) -> nn.Module:
    """Add seeded Gaussian noise to all parameters (testing helper)."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn(p.shape, generator=g) * std)
    return module


def build_vector_flow(dim: int, steps: int, cond_dim: int = 0, hidden: int = 64,
                      depth: int = 1, seed: int = 0) -> ConditionalFlow:
    layers: list[nn.Module] = []
    for k in range(steps):
        layers += [
            ActNorm(dim),
            Permutation(dim, seed * 1000 + k),
            AffineCoupling(dim, cond_dim, hidden, spatial=False, depth=depth),
        ]
    return ConditionalFlow(layers)
