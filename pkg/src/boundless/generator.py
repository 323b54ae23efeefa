"""Gated-convolution encoder-decoder generator.

The network maps the masked image, the mask and a constant ones channel to a
full RGB prediction in [-1, 1]. Downsampling stages remember the spatial size
they received so the decoder resizes land exactly on the encoder grids, which
keeps odd sizes such as 257 round-tripping (257 -> 129 -> 65 -> 129 -> 257).
"""
from __future__ import annotations

import dataclasses
import math
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .ops import pad_same, resize_bilinear, same_out, trunc_normal_fan_in_

INPUT_CHANNELS = 5  # masked RGB, mask, ones
OUTPUT_CHANNELS = 3

GATED = "gated_conv"
PLAIN = "plain_conv"
RESIZE = "resize"
CLIP = "clip"
_KINDS = (GATED, PLAIN, RESIZE, CLIP)


@dataclasses.dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: int = 0
    stride: int = 1
    dilation: int = 1
    out_channels: int = 0
    skip: Optional[int] = None  # 1-based id of the layer concatenated onto this layer's output

    @property
    def is_conv(self) -> bool:
        return self.kind in (GATED, PLAIN)


# Layer ids are 1-based positions in this table.
DEFAULT_LAYER_TABLE: tuple[LayerSpec, ...] = (
    LayerSpec(GATED, 5, 1, 1, 32),
    LayerSpec(GATED, 3, 2, 1, 64),
    LayerSpec(GATED, 3, 1, 1, 64),
    LayerSpec(GATED, 3, 2, 1, 128),
    LayerSpec(GATED, 3, 1, 1, 128),
    LayerSpec(GATED, 3, 1, 1, 128),
    LayerSpec(GATED, 3, 1, 2, 128),
    LayerSpec(GATED, 3, 1, 4, 128),
    LayerSpec(GATED, 3, 1, 8, 128),
    LayerSpec(GATED, 3, 1, 16, 128),
    LayerSpec(GATED, 3, 1, 1, 128, skip=5),
    LayerSpec(GATED, 3, 1, 1, 128, skip=4),
    LayerSpec(RESIZE),
    LayerSpec(GATED, 3, 1, 1, 64, skip=3),
    LayerSpec(GATED, 3, 1, 1, 64, skip=2),
    LayerSpec(RESIZE),
    LayerSpec(GATED, 3, 1, 1, 32, skip=1),
    LayerSpec(GATED, 3, 1, 1, 16),
    LayerSpec(PLAIN, 3, 1, 1, OUTPUT_CHANNELS),
    LayerSpec(CLIP),
)


@dataclasses.dataclass(frozen=True)
class GeneratorConfig:
    layer_table: tuple[LayerSpec, ...] = DEFAULT_LAYER_TABLE
    width_multiplier: float = 1.0
    use_skips: bool = True
    use_instance_norm: bool = True
    elu_alpha: float = 1.0
    norm_after_gating: bool = True
    instance_norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "layer_table", tuple(
            spec if isinstance(spec, LayerSpec) else LayerSpec(**spec) for spec in self.layer_table
        ))
        if self.width_multiplier <= 0:
            raise ConfigError("width_multiplier must be positive")
        validate_layer_table(self.layer_table)

    def channels(self, spec: LayerSpec) -> int:
        """Output channels of a conv layer after width scaling; the RGB head is never scaled."""
        if spec.kind == PLAIN and spec.out_channels == OUTPUT_CHANNELS:
            return OUTPUT_CHANNELS
        return max(1, math.ceil(self.width_multiplier * spec.out_channels))


def validate_layer_table(table: Sequence[LayerSpec]):
    """Check kinds, skip references and that skip sources sit on the destination's grid."""
    level = 0
    levels = {}
    for layer_id, spec in enumerate(table, start=1):
        if spec.kind not in _KINDS:
            raise ConfigError(f"layer {layer_id}: unknown kind {spec.kind!r}")
        if spec.is_conv:
            if spec.kernel < 1 or spec.stride < 1 or spec.dilation < 1 or spec.out_channels < 1:
                raise ConfigError(f"layer {layer_id}: invalid conv geometry {spec}")
            if spec.stride > 2:
                raise ConfigError(f"layer {layer_id}: only strides 1 and 2 are supported")
            if spec.stride == 2:
                level += 1
        elif spec.kind == RESIZE:
            level -= 1
            if level < 0:
                raise ConfigError(f"layer {layer_id}: resize without a matching downsampling layer")
        levels[layer_id] = level
        if spec.skip is not None:
            if not spec.is_conv:
                raise ConfigError(f"layer {layer_id}: only conv layers accept skips")
            if not 1 <= spec.skip < layer_id or not table[spec.skip - 1].is_conv:
                raise ConfigError(f"layer {layer_id}: skip source {spec.skip} is not an earlier conv layer")
            if levels[spec.skip] != level:
                raise ConfigError(
                    f"layer {layer_id}: skip source {spec.skip} lives on a different spatial grid"
                )
    if level != 0:
        raise ConfigError("decoder does not return to the input resolution")
    if not table or table[-1].kind != CLIP:
        raise ConfigError("the layer table must end with a clip layer")


def layer_input_channels(config: GeneratorConfig) -> dict[int, int]:
    """Input channel count of every conv layer, keyed by 1-based layer id."""
    channels = INPUT_CHANNELS
    produced = {}
    inputs = {}
    for layer_id, spec in enumerate(config.layer_table, start=1):
        if not spec.is_conv:
            continue
        inputs[layer_id] = channels
        out = config.channels(spec)
        produced[layer_id] = out
        channels = out
        if spec.skip is not None and config.use_skips:
            channels += produced[spec.skip]
    return inputs


def gated_conv(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor],
               stride: int = 1, dilation: int = 1, alpha: float = 1.0) -> torch.Tensor:
    """``ELU(conv_f(x)) * sigmoid(conv_g(x))`` with one conv producing both halves.

    ``weight`` has ``2 * C`` output channels; the first ``C`` are the feature
    filters, the last ``C`` the gate filters. 'Same' padding.
    """
    kernel = weight.shape[-1]
    h = F.conv2d(pad_same(x, kernel, stride, dilation), weight, bias, stride=stride, dilation=dilation)
    feature, gate = h.chunk(2, dim=1)
    return F.elu(feature, alpha=alpha) * torch.sigmoid(gate)


class ConvLayer(nn.Module):
    def __init__(self, spec: LayerSpec, in_channels: int, out_channels: int, config: GeneratorConfig):
        super().__init__()
        self.spec = spec
        self.gated = spec.kind == GATED
        self.alpha = config.elu_alpha
        self.norm_after_gating = config.norm_after_gating
        self.eps = config.instance_norm_eps
        conv_out = 2 * out_channels if self.gated else out_channels
        self.weight = nn.Parameter(torch.empty(conv_out, in_channels, spec.kernel, spec.kernel))
        self.bias = nn.Parameter(torch.zeros(conv_out))
        self.use_norm = self.gated and config.use_instance_norm
        if self.use_norm:
            norm_channels = out_channels if self.norm_after_gating else conv_out
            self.norm_scale = nn.Parameter(torch.ones(norm_channels))
            self.norm_offset = nn.Parameter(torch.zeros(norm_channels))

    def _norm(self, h):
        return F.instance_norm(h, weight=self.norm_scale, bias=self.norm_offset, eps=self.eps)

    def forward(self, x):
        spec = self.spec
        if not self.gated:
            x = pad_same(x, spec.kernel, spec.stride, spec.dilation)
            return F.conv2d(x, self.weight, self.bias, stride=spec.stride, dilation=spec.dilation)
        if self.use_norm and not self.norm_after_gating:
            h = F.conv2d(pad_same(x, spec.kernel, spec.stride, spec.dilation), self.weight, self.bias,
                         stride=spec.stride, dilation=spec.dilation)
            feature, gate = self._norm(h).chunk(2, dim=1)
            return F.elu(feature, alpha=self.alpha) * torch.sigmoid(gate)
        out = gated_conv(x, self.weight, self.bias, spec.stride, spec.dilation, self.alpha)
        return self._norm(out) if self.use_norm else out


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.input_size: Optional[tuple[int, int]] = None  # training resolution, set when loaded
        inputs = layer_input_channels(config)
        self.layers = nn.ModuleDict()
        for layer_id, spec in enumerate(config.layer_table, start=1):
            if spec.is_conv:
                self.layers[str(layer_id)] = ConvLayer(spec, inputs[layer_id], config.channels(spec), config)

    def min_size(self) -> int:
        downs = sum(1 for s in self.config.layer_table if s.is_conv and s.stride == 2)
        return 2 ** downs + 1

    def trace(self, height: int, width: int) -> list[tuple[int, int]]:
        """Spatial size after every layer, computed from the table alone."""
        sizes = []
        stack = []
        h, w = height, width
        for spec in self.config.layer_table:
            if spec.is_conv and spec.stride == 2:
                stack.append((h, w))
                h, w = same_out(h, 2), same_out(w, 2)
            elif spec.kind == RESIZE:
                h, w = stack.pop()
            sizes.append((h, w))
        return sizes

    def forward(self, z: torch.Tensor, m: torch.Tensor, return_preclip: bool = False):
        if z.dim() == 3:
            z, m = z[None], m[None]
        if m.shape[0] != z.shape[0]:
            m = m.expand(z.shape[0], -1, -1, -1)
        if min(z.shape[-2:]) < self.min_size():
            raise ConfigError(
                f"input {tuple(z.shape[-2:])} is too small for the generator's downsampling stages"
            )
        h = torch.cat([z, m, torch.ones_like(m)], dim=1)
        outputs = {}
        stack = []
        preclip = None
        for layer_id, spec in enumerate(self.config.layer_table, start=1):
            if spec.is_conv:
                if spec.stride == 2:
                    stack.append(tuple(h.shape[-2:]))
                h = self.layers[str(layer_id)](h)
                outputs[layer_id] = h
                if spec.skip is not None and self.config.use_skips:
                    h = torch.cat([h, outputs[spec.skip]], dim=1)
            elif spec.kind == RESIZE:
                h = resize_bilinear(h, stack.pop())
            else:
                preclip = h
                h = torch.clamp(h, -1.0, 1.0)
        return (h, preclip) if return_preclip else h


def build_generator(config: GeneratorConfig = GeneratorConfig(), seed: int = 0) -> Generator:
    """Instantiate a generator with deterministic truncated-normal fan-in init."""
    net = Generator(config)
    rng = torch.Generator().manual_seed(seed)
    for layer in net.layers.values():
        trunc_normal_fan_in_(layer.weight, rng)
    return net


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
