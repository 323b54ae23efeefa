"""Spectrally normalized projection discriminator conditioned on image embeddings.

score(x*, M, c) = f_phi(phi(x*, M)) + <phi(x*, M), f_C(c)>

``phi`` is a tower of strided 5x5 convolutions on the image concatenated with
its mask, ``f_phi`` and ``f_C`` are bias-free linear maps. Every weight is
divided by a power-iteration estimate of its top singular value. The
iteration vectors are buffers advanced only by :meth:`Discriminator.power_iterate`
(once per training step); forward passes treat them as constants, so the
score is a smooth function of the weights.
"""
from __future__ import annotations

import dataclasses
import math
import warnings
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .ops import pad_same, same_out, trunc_normal_fan_in_

SIGMA_EPS = 1e-12
INIT_POWER_ITERATIONS = 15


@dataclasses.dataclass(frozen=True)
class TowerLayer:
    kernel: int = 5
    stride: int = 2
    padding: str = "same"  # or "valid"
    channels: int = 256


DEFAULT_TOWER: tuple[TowerLayer, ...] = (
    TowerLayer(5, 2, "same", 64),
    TowerLayer(5, 2, "same", 128),
    TowerLayer(5, 2, "same", 256),
    TowerLayer(5, 2, "same", 256),
    TowerLayer(5, 2, "same", 256),
    TowerLayer(5, 2, "same", 256),
    TowerLayer(5, 1, "valid", 256),
)


@dataclasses.dataclass(frozen=True)
class DiscriminatorConfig:
    """Tower layout plus branch sizes.

    The last tower layer must be 'valid'; when ``adapt_final_kernel`` is set
    its kernel is resized to the spatial extent it receives so the tower ends
    at 1x1 for any input size (for 257x257 this is the table's own 5).
    """

    tower_table: tuple[TowerLayer, ...] = DEFAULT_TOWER
    input_size: tuple[int, int] = (257, 257)
    width_multiplier: float = 1.0
    embed_dim: int = 1000
    use_conditioning: bool = True
    leaky_slope: float = 0.2
    adapt_final_kernel: bool = True

    def __post_init__(self):
        object.__setattr__(self, "tower_table", tuple(
            t if isinstance(t, TowerLayer) else TowerLayer(**t) for t in self.tower_table
        ))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if not self.tower_table or self.tower_table[-1].padding != "valid":
            raise ConfigError("the final tower layer must use 'valid' padding")
        if self.width_multiplier <= 0 or self.embed_dim < 1:
            raise ConfigError("width_multiplier and embed_dim must be positive")
        self.trace()

    def channels(self, layer: TowerLayer) -> int:
        return max(1, math.ceil(self.width_multiplier * layer.channels))

    @property
    def proj_dim(self) -> int:
        return self.channels(self.tower_table[-1])

    def kernels(self) -> list[int]:
        return [k for k, _ in self._walk()]

    def trace(self) -> list[tuple[int, int]]:
        """Spatial size after every tower layer."""
        return [size for _, size in self._walk()]

    def _walk(self):
        h, w = self.input_size
        out = []
        last = len(self.tower_table) - 1
        for i, layer in enumerate(self.tower_table):
            kernel = layer.kernel
            if layer.padding == "same":
                h, w = same_out(h, layer.stride), same_out(w, layer.stride)
            else:
                if i == last and self.adapt_final_kernel:
                    if h != w:
                        raise ConfigError(f"final valid layer needs a square extent, got {h}x{w}")
                    kernel = h
                h = (h - kernel) // layer.stride + 1
                w = (w - kernel) // layer.stride + 1
                if h < 1 or w < 1:
                    raise ConfigError(f"input size {self.input_size} is too small for the tower")
            out.append((kernel, (h, w)))
        if out[-1][1] != (1, 1):
            raise ConfigError(f"tower ends at {out[-1][1]} instead of 1x1 for input {self.input_size}")
        return out


def _l2_normalize(v: torch.Tensor) -> torch.Tensor:
    return v / v.norm().clamp_min(SIGMA_EPS)


def spectral_normalize(weight: torch.Tensor, u: torch.Tensor, iterations: int = 1):
    """Run power iterations on ``weight`` (matrixized to ``(out, -1)``).

    Returns ``(weight / sigma, u_new, sigma)``. A zero weight is returned
    unchanged with a warning.
    """
    mat = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        for _ in range(iterations):
            v = _l2_normalize(mat.t() @ u)
            u = _l2_normalize(mat @ v)
        v = _l2_normalize(mat.t() @ u)
    sigma = u @ (mat @ v)
    if float(sigma.abs()) < SIGMA_EPS:
        warnings.warn("spectral_normalize: weight has zero spectral norm; left unnormalized")
        return weight, u, sigma
    return weight / sigma, u, sigma


class SNParam(nn.Module):
    """A weight tensor with persistent power-iteration state ``u`` and ``v``."""

    def __init__(self, shape: Sequence[int], generator: torch.Generator):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(*shape))
        trunc_normal_fan_in_(self.weight, generator)
        rows = shape[0]
        cols = int(math.prod(shape[1:]))
        self.register_buffer("u", _l2_normalize(torch.randn(rows, generator=generator)))
        self.register_buffer("v", _l2_normalize(torch.randn(cols, generator=generator)))

    @torch.no_grad()
    def power_iterate(self, iterations: int = 1):
        mat = self.weight.reshape(self.weight.shape[0], -1)
        u = self.u
        for _ in range(iterations):
            v = _l2_normalize(mat.t() @ u)
            u = _l2_normalize(mat @ v)
        self.v.copy_(_l2_normalize(mat.t() @ u))
        self.u.copy_(u)

    def sigma(self) -> torch.Tensor:
        mat = self.weight.reshape(self.weight.shape[0], -1)
        return self.u @ (mat @ self.v)

    def forward(self) -> torch.Tensor:
        sigma = self.sigma()
        if float(sigma.detach().abs()) < SIGMA_EPS:
            return self.weight
        return self.weight / sigma


class Discriminator(nn.Module):
    def __init__(self, config: DiscriminatorConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = torch.Generator().manual_seed(seed)
        self.kernels = config.kernels()
        self.tower = nn.ModuleList()
        self.biases = nn.ParameterList()
        in_ch = 4  # image + mask
        for layer, kernel in zip(config.tower_table, self.kernels):
            out_ch = config.channels(layer)
            self.tower.append(SNParam((out_ch, in_ch, kernel, kernel), rng))
            self.biases.append(nn.Parameter(torch.zeros(out_ch)))
            in_ch = out_ch
        self.f_phi = SNParam((1, config.proj_dim), rng)
        self.f_c = SNParam((config.proj_dim, config.embed_dim), rng) if config.use_conditioning else None
        self.power_iterate(INIT_POWER_ITERATIONS)

    def sn_modules(self) -> list[SNParam]:
        mods = list(self.tower) + [self.f_phi]
        if self.f_c is not None:
            mods.append(self.f_c)
        return mods

    def power_iterate(self, iterations: int = 1):
        for mod in self.sn_modules():
            mod.power_iterate(iterations)

    def tower_features(self, x_star: torch.Tensor, m: torch.Tensor) -> list[torch.Tensor]:
        """Post-activation feature map of every tower layer."""
        if x_star.dim() == 3:
            x_star, m = x_star[None], m[None]
        if m.shape[0] != x_star.shape[0]:
            m = m.expand(x_star.shape[0], -1, -1, -1)
        if tuple(x_star.shape[-2:]) != self.config.input_size:
            raise ConfigError(
                f"discriminator built for {self.config.input_size}, got {tuple(x_star.shape[-2:])}"
            )
        h = torch.cat([x_star, m], dim=1)
        feats = []
        for layer, kernel, weight, bias in zip(self.config.tower_table, self.kernels, self.tower, self.biases):
            if layer.padding == "same":
                h = pad_same(h, kernel, layer.stride)
            h = F.conv2d(h, weight(), bias, stride=layer.stride)
            h = F.leaky_relu(h, self.config.leaky_slope)
            feats.append(h)
        return feats

    def phi(self, x_star: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        return self.tower_features(x_star, m)[-1].flatten(1)

    def unconditional(self, features: torch.Tensor) -> torch.Tensor:
        return (features @ self.f_phi().t()).squeeze(1)

    def projection(self, features: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        if c.dim() == 1:
            c = c[None]
        if c.shape[-1] != self.config.embed_dim:
            raise ConfigError(f"conditioning vector has dim {c.shape[-1]}, expected {self.config.embed_dim}")
        return (features * (c @ self.f_c().t())).sum(dim=1)

    def forward(self, x_star: torch.Tensor, m: torch.Tensor, c: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Per-sample scores, shape ``(B,)``."""
        features = self.phi(x_star, m)
        score = self.unconditional(features)
        if self.f_c is not None and c is not None:
            score = score + self.projection(features, c)
        return score


def build_discriminator(config: DiscriminatorConfig = DiscriminatorConfig(), seed: int = 0) -> Discriminator:
    return Discriminator(config, seed)


def top_singular_values(disc: Discriminator) -> list[float]:
    """Exact top singular value of every normalized weight (test helper)."""
    values = []
    with torch.no_grad():
        for mod in disc.sn_modules():
            w = mod()
            values.append(float(torch.linalg.matrix_norm(w.reshape(w.shape[0], -1), ord=2)))
    return values
