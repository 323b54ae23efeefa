"""Diagonal-covariance Frechet distance and masked-region PSNR."""
from __future__ import annotations

import dataclasses
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import ConfigError, DataError
from .masking import MaskSpec, apply_mask, build_mask, composite

PSNR_CAP = 99.0


@dataclasses.dataclass
class GaussianStats:
    mean: np.ndarray
    var: np.ndarray
    n: int


def fit_gaussian(features) -> GaussianStats:
    """Per-dimension sample mean and unbiased variance of an ``(n, d)`` array."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError(f"features must be (n, d), got shape {feats.shape}")
    n = feats.shape[0]
    if n < 2:
        raise DataError("need at least two samples to fit a Gaussian")
    return GaussianStats(feats.mean(axis=0), feats.var(axis=0, ddof=1), n)


def fid_diagonal(a: GaussianStats, b: GaussianStats) -> float:
    """Frechet distance between Gaussians with diagonal covariances.

    For diagonal covariances ``tr(C1 + C2 - 2 (C1 C2)^1/2)`` reduces to
    ``sum((sqrt(v1) - sqrt(v2))**2)``.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    mean_term = float(np.sum((a.mean - b.mean) ** 2))
    cov_term = float(np.sum((np.sqrt(a.var) - np.sqrt(b.var)) ** 2))
    return mean_term + cov_term


def psnr_masked(x: torch.Tensor, x_hat: torch.Tensor, m: torch.Tensor) -> float:
    """PSNR in dB over unknown pixels only, images mapped from [-1, 1] to [0, 1].

    Single image: ``x`` is ``(3, H, W)``, ``m`` is ``(1, H, W)``. Exact matches
    (and anything above it) report ``PSNR_CAP``.
    """
    if x.shape != x_hat.shape or x.shape[-2:] != m.shape[-2:]:
        raise ValueError("image and mask shapes do not agree")
    sel = (m > 0.5).expand_as(x)
    count = int(sel.sum())
    if count == 0:
        raise DataError("mask has no unknown pixels")
    diff = ((x.double() + 1) / 2 - (x_hat.double() + 1) / 2)[sel]
    mse = float((diff ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


@dataclasses.dataclass
class EvalReport:
    fid_full_image: float
    mean_masked_psnr: float
    per_image: list[tuple[str, float]]

    def write(self, path):
        """Tab-separated ``name value`` lines, then a per-image table."""
        lines = [
            f"fid_full_image\t{self.fid_full_image!r}",
            f"mean_masked_psnr\t{self.mean_masked_psnr!r}",
            f"num_images\t{len(self.per_image)}",
            "",
            "image_id\tmasked_psnr",
        ]
        lines += [f"{image_id}\t{psnr!r}" for image_id, psnr in self.per_image]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "EvalReport":
        text = Path(path).read_text(encoding="utf-8").splitlines()
        head = dict(line.split("\t") for line in text[:3])
        start = text.index("image_id\tmasked_psnr") + 1
        rows = [line.split("\t") for line in text[start:] if line]
        return cls(float(head["fid_full_image"]), float(head["mean_masked_psnr"]),
                   [(i, float(v)) for i, v in rows])


def _features(provider, images: torch.Tensor, batch_size: int) -> np.ndarray:
    out = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            out.append(provider(images[i:i + batch_size]).double().numpy())
    return np.concatenate(out)


def evaluate_predictions(ids: Sequence[str], truth: torch.Tensor, predictions: torch.Tensor,
                         mask: torch.Tensor, provider, batch_size: int = 16) -> EvalReport:
    """Score finished composites against ground truth."""
    if len(ids) == 0:
        raise DataError("evaluation set is empty")
    if truth.shape != predictions.shape:
        raise DataError(f"predictions {tuple(predictions.shape)} do not match truth {tuple(truth.shape)}")
    per_image = [(i, psnr_masked(truth[k], predictions[k], mask)) for k, i in enumerate(ids)]
    fid = fid_diagonal(fit_gaussian(_features(provider, predictions, batch_size)),
                       fit_gaussian(_features(provider, truth, batch_size)))
    return EvalReport(fid, float(np.mean([p for _, p in per_image])), per_image)


def complete(generator, images: torch.Tensor, mask: torch.Tensor, batch_size: int = 16) -> torch.Tensor:
    """Composite generator completions for a stack of images under a single mask."""
    param = next(generator.parameters())
    outs = []
    was_training = generator.training
    generator.eval()
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            x = images[i:i + batch_size].to(param.dtype)
            m = mask.to(param.dtype)[None].expand(x.shape[0], -1, -1, -1)
            z = apply_mask(x, m)
            outs.append(composite(generator(z, m), z, m))
    generator.train(was_training)
    return torch.cat(outs)


def evaluate_model(generator, ids: Sequence[str], images: torch.Tensor, mask_spec: MaskSpec,
                   provider, batch_size: int = 16) -> EvalReport:
    """FID of full composites vs ground truth and mean masked PSNR, jitter forced off."""
    if len(ids) == 0:
        raise DataError("evaluation set is empty")
    height, width = images.shape[-2:]
    mask = build_mask(mask_spec.without_jitter(), height, width)
    preds = complete(generator, images, mask, batch_size)
    return evaluate_predictions(ids, images.to(preds.dtype), preds, mask, provider, batch_size)


# Published FID of a fully trained model (Places365, 500 held-out images); documentation only, not targets.
REFERENCE_FID = {"25%": 0.79, "50%": 3.46, "75%": 8.79, "inpaint": 2.53}
