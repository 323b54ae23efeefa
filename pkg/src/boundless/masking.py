"""Mask construction, masked generator input and compositing.

Masks follow the convention 1 = unknown (to synthesize), 0 = known. Tensors
are channel-first: images are ``(3, H, W)`` or ``(B, 3, H, W)``, masks are
``(1, H, W)`` or ``(B, 1, H, W)`` and broadcast over the colour channels.
"""
from __future__ import annotations

import dataclasses
import enum
import math
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, DataError


class Geometry(str, enum.Enum):
    RIGHT_STRIP = "right_strip"
    CENTRAL_SQUARE = "central_square"
    FREE_FORM = "free_form"


@dataclasses.dataclass(frozen=True)
class MaskSpec:
    """Description of a mask.

    ``fraction`` is the fraction of the image width for ``right_strip`` and
    the fraction of the pixel area for ``central_square``. ``jitter_px`` is
    the half-width of the uniform integer jitter applied to the strip width
    or the square side. ``bitmap`` is only used (and required) by
    ``free_form``.
    """

    geometry: Geometry = Geometry.RIGHT_STRIP
    fraction: float = 0.25
    jitter_px: int = 0
    seed: int = 0
    bitmap: Optional[np.ndarray] = dataclasses.field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "geometry", Geometry(self.geometry))
        if self.geometry is Geometry.FREE_FORM:
            if self.bitmap is None:
                raise ConfigError("free_form mask requires an explicit bitmap")
            return
        if not 0.0 < self.fraction < 1.0:
            raise ConfigError(f"mask fraction must lie in (0, 1), got {self.fraction}")
        if self.jitter_px < 0:
            raise ConfigError(f"jitter_px must be >= 0, got {self.jitter_px}")

    def without_jitter(self) -> "MaskSpec":
        return dataclasses.replace(self, jitter_px=0)


def round_half_away(value: float) -> int:
    return int(math.copysign(math.floor(abs(value) + 0.5), value))


def nominal_extent(spec: MaskSpec, height: int, width: int) -> int:
    """Unjittered strip width or square side, in pixels."""
    if spec.geometry is Geometry.RIGHT_STRIP:
        return round_half_away(spec.fraction * width)
    if spec.geometry is Geometry.CENTRAL_SQUARE:
        return round_half_away(math.sqrt(spec.fraction * height * width))
    raise ConfigError("free_form masks have no nominal extent")


def draw_jitter(spec: MaskSpec) -> int:
    if spec.jitter_px == 0:
        return 0
    rng = np.random.default_rng(spec.seed)
    return int(rng.integers(-spec.jitter_px, spec.jitter_px + 1))


def build_mask(spec: MaskSpec, height: int, width: int) -> torch.Tensor:
    """Build a ``(1, H, W)`` float mask, deterministic in ``(spec, H, W)``."""
    if height < 8 or width < 8:
        raise ConfigError(f"mask size must be at least 8x8, got {height}x{width}")

    if spec.geometry is Geometry.FREE_FORM:
        bitmap = np.asarray(spec.bitmap)
        if bitmap.ndim == 3:
            bitmap = bitmap[..., 0]
        if bitmap.shape != (height, width):
            raise ConfigError(f"free_form bitmap is {bitmap.shape}, expected {(height, width)}")
        data = (bitmap > 0).astype(np.float32)
        if data.sum() == 0 or data.all():
            raise ConfigError("free_form bitmap must contain both known and unknown pixels")
        return torch.from_numpy(data)[None]

    base = nominal_extent(spec, height, width)
    limit = width if spec.geometry is Geometry.RIGHT_STRIP else min(height, width)
    # The check is seed-independent: every jitter draw must stay valid.
    if base - spec.jitter_px <= 0 or base + spec.jitter_px >= limit:
        raise ConfigError(
            f"mask extent {base}±{spec.jitter_px} leaves an empty or full unknown region "
            f"for a {height}x{width} image"
        )
    extent = base + draw_jitter(spec)

    mask = torch.zeros(1, height, width)
    if spec.geometry is Geometry.RIGHT_STRIP:
        mask[:, :, width - extent:] = 1.0
    else:
        top = (height - extent) // 2
        left = (width - extent) // 2
        mask[:, top:top + extent, left:left + extent] = 1.0
    return mask


def unknown_width(mask: torch.Tensor) -> int:
    """Number of columns containing at least one unknown pixel."""
    return int(mask.reshape(-1, mask.shape[-1]).amax(dim=0).sum().item())


def _check_shapes(x: torch.Tensor, m: torch.Tensor):
    if x.shape[-2:] != m.shape[-2:] or m.shape[-3] != 1:
        raise ValueError(f"image {tuple(x.shape)} and mask {tuple(m.shape)} do not agree")
    if x.dim() == 4 and m.dim() == 4 and m.shape[0] not in (1, x.shape[0]):
        raise ValueError(f"batch sizes of image {tuple(x.shape)} and mask {tuple(m.shape)} differ")


def apply_mask(x: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Masked generator input ``z = x * (1 - M)``."""
    _check_shapes(x, m)
    return x * (1.0 - m)


def composite(g: torch.Tensor, z: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Keep known pixels from ``z`` and synthesized pixels from ``g``: ``g * M + z``."""
    _check_shapes(g, m)
    _check_shapes(z, m)
    return g * m + z


def save_mask(path, mask: torch.Tensor):
    """Write a mask as an 8-bit single channel image (0 known, 255 unknown)."""
    data = mask.detach().reshape(mask.shape[-2:]).cpu().numpy()
    Image.fromarray((data > 0.5).astype(np.uint8) * 255, mode="L").save(path)


def load_mask(path) -> torch.Tensor:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"mask file not found: {path}")
    data = np.asarray(Image.open(path).convert("L"))
    return torch.from_numpy((data >= 128).astype(np.float32))[None]
