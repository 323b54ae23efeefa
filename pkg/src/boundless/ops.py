"""Small tensor helpers shared by the generator and the discriminator."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F


def same_padding(size: int, kernel: int, stride: int, dilation: int = 1) -> tuple[int, int]:
    """TensorFlow-style 'SAME' padding for one spatial axis, extra pixel at the end."""
    out = math.ceil(size / stride)
    effective = (kernel - 1) * dilation + 1
    total = max((out - 1) * stride + effective - size, 0)
    return total // 2, total - total // 2


def pad_same(x: torch.Tensor, kernel: int, stride: int, dilation: int = 1) -> torch.Tensor:
    top, bottom = same_padding(x.shape[-2], kernel, stride, dilation)
    left, right = same_padding(x.shape[-1], kernel, stride, dilation)
    if top == bottom == left == right == 0:
        return x
    return F.pad(x, (left, right, top, bottom))


def same_out(size: int, stride: int) -> int:
    return math.ceil(size / stride)


def trunc_normal_fan_in_(weight: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """Truncated normal (two standard deviations) with std 1/sqrt(fan_in)."""
    fan_in = weight[0].numel()
    std = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        torch.nn.init.trunc_normal_(weight, 0.0, std, -2.0 * std, 2.0 * std, generator=generator)
    return weight


def resize_bilinear(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    # align_corners keeps the n -> 2n-1 grids of odd sizes (65 -> 129 -> 257) exactly nested.
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=True)
