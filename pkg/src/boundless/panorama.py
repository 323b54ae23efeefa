"""Recursive sliding-window extension into wide panoramas.

Each step takes the rightmost ``seed_width`` columns of the panorama, pads
``pad_width`` zero columns on the right, lets the generator fill them and
appends the new columns. Columns already emitted are never touched again.
Left extension mirrors horizontally before and after.
"""
from __future__ import annotations

import dataclasses
from typing import Callable, Optional

import torch

from .errors import ConfigError, DataError
from .masking import apply_mask, composite


@dataclasses.dataclass(frozen=True)
class PanoramaConfig:
    seed_width: int = 192
    pad_width: int = 65
    window_height: int = 257
    steps: int = 6
    max_width: int = 16384

    def __post_init__(self):
        if self.seed_width < 1 or self.pad_width < 1 or self.window_height < 1:
            raise ConfigError("panorama dimensions must be positive")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")

    @property
    def window_width(self) -> int:
        return self.seed_width + self.pad_width

    def final_width(self, steps: Optional[int] = None) -> int:
        return self.seed_width + (self.steps if steps is None else steps) * self.pad_width


def _window_mask(config: PanoramaConfig) -> torch.Tensor:
    m = torch.zeros(1, config.window_height, config.window_width)
    m[..., config.seed_width:] = 1.0
    return m


def extend_once(generator, image: torch.Tensor, config: PanoramaConfig = PanoramaConfig()) -> torch.Tensor:
    """Extend a ``(3, window_height, seed_width)`` image by ``pad_width`` columns."""
    if tuple(image.shape[-2:]) != (config.window_height, config.seed_width):
        raise ConfigError(
            f"expected a {config.window_height}x{config.seed_width} window, got {tuple(image.shape[-2:])}"
        )
    dtype = next(generator.parameters()).dtype
    x = torch.nn.functional.pad(image.to(dtype), (0, config.pad_width))
    m = _window_mask(config).to(dtype)
    with torch.no_grad():
        z = apply_mask(x, m)
        out = composite(generator(z[None], m[None])[0], z, m)
    return out


def generate_panorama(generator, seed_image: torch.Tensor, config: PanoramaConfig = PanoramaConfig(),
                      on_step: Optional[Callable[[int, torch.Tensor], None]] = None) -> torch.Tensor:
    """Grow ``seed_image`` to ``seed_width + steps * pad_width`` columns."""
    if tuple(seed_image.shape[-2:]) != (config.window_height, config.seed_width):
        raise DataError(
            f"seed must be {config.window_height}x{config.seed_width}, got {tuple(seed_image.shape[-2:])}"
        )
    if config.final_width() > config.max_width:
        raise ConfigError(f"panorama width {config.final_width()} exceeds max_width {config.max_width}")
    dtype = next(generator.parameters()).dtype
    pano = seed_image.to(dtype)
    for step in range(1, config.steps + 1):
        window = pano[..., -config.seed_width:]
        extended = extend_once(generator, window, config)
        pano = torch.cat([pano, extended[..., config.seed_width:]], dim=-1)
        if on_step is not None:
            on_step(step, pano)
    return pano


def mirror(image: torch.Tensor) -> torch.Tensor:
    return torch.flip(image, dims=(-1,))


def extend_left(generator, image: torch.Tensor, config: PanoramaConfig = PanoramaConfig()) -> torch.Tensor:
    """Extend on the left by mirroring, extending right, and mirroring back."""
    return mirror(extend_once(generator, mirror(image), config))
