"""Generator and discriminator objectives."""
from __future__ import annotations

import dataclasses
import enum
from typing import Optional

import torch

from .errors import ConfigError


class Stabilizer(str, enum.Enum):
    PROJECTION_CONDITIONING = "projection_conditioning"
    FEATURE_MATCHING = "feature_matching"
    PERCEPTUAL = "perceptual"
    COMBO = "combo"


@dataclasses.dataclass(frozen=True)
class LossWeights:
    """Loss mixing weights.

    ``stabilizer_weight`` scales the auxiliary loss of the ``feature_matching``
    and ``perceptual`` stabilizers; ``combo`` uses the two per-loss weights,
    which fall back to ``stabilizer_weight`` when unset.
    """

    lambda_adv: float = 1e-2
    stabilizer: Stabilizer = Stabilizer.PROJECTION_CONDITIONING
    stabilizer_weight: float = 1.0
    feature_matching_weight: Optional[float] = None
    perceptual_weight: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "stabilizer", Stabilizer(self.stabilizer))
        if self.lambda_adv < 0:
            raise ConfigError("lambda_adv must be >= 0")

    @property
    def uses_conditioning(self) -> bool:
        return self.stabilizer in (Stabilizer.PROJECTION_CONDITIONING, Stabilizer.COMBO)

    @property
    def fm_weight(self) -> float:
        if self.stabilizer is Stabilizer.FEATURE_MATCHING:
            return self.stabilizer_weight
        if self.stabilizer is Stabilizer.COMBO:
            return self.stabilizer_weight if self.feature_matching_weight is None else self.feature_matching_weight
        return 0.0

    @property
    def perc_weight(self) -> float:
        if self.stabilizer is Stabilizer.PERCEPTUAL:
            return self.stabilizer_weight
        if self.stabilizer is Stabilizer.COMBO:
            return self.stabilizer_weight if self.perceptual_weight is None else self.perceptual_weight
        return 0.0


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def recon_loss(x: torch.Tensor, g_out: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over every pixel and channel of the full output."""
    _same_shape(x, g_out)
    return (x - g_out).abs().mean()


def hinge_d_loss(score_real, score_fake) -> torch.Tensor:
    score_real = torch.as_tensor(score_real)
    score_fake = torch.as_tensor(score_fake)
    return (torch.relu(1.0 - score_real) + torch.relu(1.0 + score_fake)).mean()


def hinge_g_loss(score_fake) -> torch.Tensor:
    return -torch.as_tensor(score_fake).mean()


def total_g_loss(l_rec, l_adv_g, w: LossWeights):
    return l_rec + w.lambda_adv * l_adv_g


def perceptual_loss(provider, x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance of raw embeddings divided by their dimension, batch mean.

    Gradients reach ``x_hat`` only; the target embedding is constant.
    """
    _same_shape(x, x_hat)
    with torch.no_grad():
        target = provider(x)
    pred = provider(x_hat)
    return ((pred - target) ** 2).sum(dim=-1).mean() / pred.shape[-1]


def feature_matching_loss(disc, x: torch.Tensor, x_hat: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Sum over tower layers of the per-element mean absolute feature difference."""
    _same_shape(x, x_hat)
    with torch.no_grad():
        real = disc.tower_features(x, m)
    fake = disc.tower_features(x_hat, m)
    total = fake[0].new_zeros(())
    for r, f in zip(real, fake):
        total = total + (r - f).abs().mean()
    return total
