import numpy as np
import pytest
import torch

from boundless.conditioning import EmbeddingStats, StubEmbedding, fit_stats, normalize
from boundless.discriminator import DiscriminatorConfig
from boundless.datapipe import synthetic_dataset
from boundless.generator import GeneratorConfig
from boundless.losses import LossWeights
from boundless.masking import MaskSpec
from boundless.trainer import ModelSpec, TrainingConfig, TrainingData

torch.set_num_threads(1)

TINY_SIZE = 17
TINY_EMBED = 8


def tiny_spec(**training) -> ModelSpec:
    """A model small enough to train hundreds of steps in seconds."""
    t = dict(batch_size=4, steps=10, mask_spec=MaskSpec("right_strip", 0.25, jitter_px=1))
    t.update(training)
    return ModelSpec(
        GeneratorConfig(width_multiplier=1 / 16),
        DiscriminatorConfig(input_size=(TINY_SIZE, TINY_SIZE), width_multiplier=1 / 16, embed_dim=TINY_EMBED),
        LossWeights(),
        TrainingConfig(**t),
    )


class DictCache(dict):
    def batch(self, ids):
        return torch.from_numpy(np.stack([self[i] for i in ids]))


@pytest.fixture(autouse=True)
def _seed_torch():
    # unseeded torch.rand in a test would otherwise vary between runs
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def tiny_data():
    ids, images = synthetic_dataset(12, size=TINY_SIZE, seed=0)
    return TrainingData(ids, images)


@pytest.fixture(scope="session")
def tiny_cache(tiny_data):
    provider = StubEmbedding(TINY_EMBED)
    stats = fit_stats(provider, tiny_data.images)
    with torch.no_grad():
        vecs = normalize(provider(tiny_data.images).double(), stats).float().numpy()
    return DictCache(zip(tiny_data.ids, vecs))


def params_of(module):
    return {k: v.detach().clone() for k, v in module.named_parameters()}


# Acceptance criteria record one line each here; the summary hook prints them.
ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


__all__ = ["tiny_spec", "DictCache", "params_of", "EmbeddingStats", "TINY_SIZE", "TINY_EMBED",
           "ACCEPTANCE_RESULTS"]
