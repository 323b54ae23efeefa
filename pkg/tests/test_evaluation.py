import math

import numpy as np
import pytest
import torch

from boundless.conditioning import StubEmbedding
from boundless.errors import DataError
from boundless.evaluation import (PSNR_CAP, EvalReport, complete, evaluate_model, evaluate_predictions,
                                  fid_diagonal, fit_gaussian, psnr_masked)
from boundless.generator import GeneratorConfig, build_generator
from boundless.masking import MaskSpec, build_mask


def _fid_oracle(a, b):
    """Scalar loops, written independently of the vectorized implementation."""
    n_a, n_b = len(a), len(b)
    total = 0.0
    for j in range(len(a[0])):
        col_a = [row[j] for row in a]
        col_b = [row[j] for row in b]
        mu_a = math.fsum(col_a) / n_a
        mu_b = math.fsum(col_b) / n_b
        var_a = math.fsum((v - mu_a) ** 2 for v in col_a) / (n_a - 1)
        var_b = math.fsum((v - mu_b) ** 2 for v in col_b) / (n_b - 1)
        total += (mu_a - mu_b) ** 2 + (math.sqrt(var_a) - math.sqrt(var_b)) ** 2
    return total


def test_fid_self_is_zero():
    feats = np.random.default_rng(0).normal(size=(50, 8))
    assert fid_diagonal(fit_gaussian(feats), fit_gaussian(feats)) == 0.0


def test_fid_known_value():
    a = np.array([[0.0, 0.0], [2.0, 2.0]])  # mean 1, var 2
    b = np.array([[1.0, 3.0], [1.0, 3.0]])  # mean (1, 3), var 0
    assert fid_diagonal(fit_gaussian(a), fit_gaussian(b)) == pytest.approx(0 + 4 + 2 * 2)


def test_fid_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a = rng.normal(size=(20, 6))
        b = rng.normal(loc=0.5, scale=2.0, size=(15, 6))
        got = fid_diagonal(fit_gaussian(a), fit_gaussian(b))
        assert abs(got - _fid_oracle(a.tolist(), b.tolist())) <= 1e-8 * max(1.0, abs(got))


def test_fit_gaussian_errors():
    with pytest.raises(DataError):
        fit_gaussian(np.zeros((1, 4)))
    with pytest.raises(ValueError):
        fit_gaussian(np.zeros(4))


def test_psnr_examples():
    x = torch.zeros(3, 8, 8)
    m = build_mask(MaskSpec("right_strip", 0.25), 8, 8)
    assert psnr_masked(x, x, m) == PSNR_CAP
    y = x.clone()
    y[..., 6:] = 0.2  # shift of 0.1 in [0, 1] units on unknown pixels
    assert psnr_masked(x, y, m) == pytest.approx(20.0)
    # known-region errors are ignored
    y[..., :6] = 1.0
    assert psnr_masked(x, y, m) == pytest.approx(20.0)
    with pytest.raises(DataError):
        psnr_masked(x, y, torch.zeros(1, 8, 8))


def test_report_round_trip(tmp_path):
    report = EvalReport(1.25, 17.5, [("a/1", 16.0), ("b/2", 19.0)])
    report.write(tmp_path / "r.tsv")
    assert EvalReport.read(tmp_path / "r.tsv") == report
    text = (tmp_path / "r.tsv").read_text()
    assert text.startswith("fid_full_image\t1.25\n")


def test_ground_truth_scores_perfectly():
    provider = StubEmbedding(embed_dim=16)
    truth = torch.rand(4, 3, 17, 17) * 2 - 1
    mask = build_mask(MaskSpec("right_strip", 0.25), 17, 17)
    report = evaluate_predictions(["a", "b", "c", "d"], truth, truth.clone(), mask, provider)
    assert report.fid_full_image == 0.0
    assert report.mean_masked_psnr == PSNR_CAP
    with pytest.raises(DataError):
        evaluate_predictions([], truth[:0], truth[:0], mask, provider)


def test_complete_keeps_known_pixels():
    gen = build_generator(GeneratorConfig(width_multiplier=0.25))
    images = torch.rand(3, 3, 17, 17) * 2 - 1
    mask = build_mask(MaskSpec("right_strip", 0.25), 17, 17)
    out = complete(gen, images, mask, batch_size=2)
    known = (mask == 0).expand_as(images[0])
    assert all(torch.equal(out[i][known], images[i][known]) for i in range(3))
    assert gen.training


def test_evaluate_model_ignores_jitter():
    gen = build_generator(GeneratorConfig(width_multiplier=0.25))
    images = torch.rand(3, 3, 17, 17) * 2 - 1
    provider = StubEmbedding(embed_dim=16)
    a = evaluate_model(gen, ["a", "b", "c"], images, MaskSpec("right_strip", 0.25, jitter_px=2, seed=1), provider)
    b = evaluate_model(gen, ["a", "b", "c"], images, MaskSpec("right_strip", 0.25), provider)
    assert a == b
