import dataclasses
import json

import numpy as np
import pytest
import torch

from boundless.checkpoint import load_checkpoint, save_checkpoint
from boundless.errors import CacheMissError, CheckpointError, DataError, NumericalAbort
from boundless.losses import LossWeights
from boundless.trainer import (MetricsLog, TrainingData, draw_mask, init_state, load_generator, sample_batch,
                               state_from_checkpoint, state_to_checkpoint, train, train_step)
from conftest import TINY_SIZE, params_of, tiny_spec


def _same_state(a, b):
    for x, y in ((a.generator, b.generator), (a.discriminator, b.discriminator)):
        sa, sb = x.state_dict(), y.state_dict()
        assert sa.keys() == sb.keys()
        for k in sa:
            assert torch.equal(sa[k], sb[k]), k


def test_zero_learning_rate_freezes_parameters(tiny_data, tiny_cache):
    state = init_state(tiny_spec(g_lr=0.0, d_lr=0.0))
    g0, d0 = params_of(state.generator), params_of(state.discriminator)
    for _ in range(3):
        x, c = sample_batch(state, tiny_data, tiny_cache)
        metrics = train_step(state, x, c)
    assert all(torch.equal(v, params_of(state.generator)[k]) for k, v in g0.items())
    assert all(torch.equal(v, params_of(state.discriminator)[k]) for k, v in d0.items())
    assert metrics["step"] == 3 and state.step == 3


def test_reconstruction_decreases_without_adversary(tiny_data, tiny_cache):
    spec = tiny_spec(g_lr=1e-3)
    spec = dataclasses.replace(spec, losses=LossWeights(lambda_adv=0.0))
    state = init_state(spec)
    history = []
    for _ in range(60):
        x, c = sample_batch(state, tiny_data, tiny_cache)
        history.append(train_step(state, x, c)["l_rec"])
    assert np.mean(history[-10:]) < 0.8 * np.mean(history[:10])


def test_metrics_keys_and_finiteness(tiny_data, tiny_cache):
    state = init_state(tiny_spec())
    x, c = sample_batch(state, tiny_data, tiny_cache)
    metrics = train_step(state, x, c)
    assert {"step", "l_adv_d", "d_real_mean", "d_fake_mean", "l_rec", "l_adv_g", "l_total",
            "mask_jitter"} <= set(metrics)
    assert all(np.isfinite(v) for v in metrics.values())
    assert metrics["l_total"] == pytest.approx(metrics["l_rec"] + 1e-2 * metrics["l_adv_g"], rel=1e-5)


def test_stabilizer_variants_report_their_losses(tiny_data, tiny_cache):
    from boundless.conditioning import StubEmbedding
    spec = dataclasses.replace(tiny_spec(), losses=LossWeights(stabilizer="combo"))
    state = init_state(spec, provider=StubEmbedding(8))
    x, c = sample_batch(state, tiny_data, tiny_cache)
    metrics = train_step(state, x, c)
    assert "l_fm" in metrics and "l_perceptual" in metrics
    fm_only = init_state(dataclasses.replace(tiny_spec(), losses=LossWeights(stabilizer="feature_matching")))
    assert fm_only.discriminator.f_c is None
    x, c = sample_batch(fm_only, tiny_data, None)
    assert "l_fm" in train_step(fm_only, x, c)


def test_mask_jitter_is_uniform():
    state = init_state(tiny_spec(mask_spec={"geometry": "right_strip", "fraction": 0.5, "jitter_px": 4}))
    draws = [draw_mask(state, 32, 32)[1] for _ in range(1800)]
    counts = np.bincount(np.array(draws) + 4, minlength=9)
    expected = len(draws) / 9
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < 26.12  # df = 8, alpha = 0.001
    assert min(draws) == -4 and max(draws) == 4


def test_numerical_abort(tiny_data, tiny_cache):
    state = init_state(tiny_spec())
    with torch.no_grad():
        state.discriminator.f_phi.weight.fill_(float("nan"))
    x, c = sample_batch(state, tiny_data, tiny_cache)
    with pytest.raises(NumericalAbort) as info:
        train_step(state, x, c)
    assert info.value.exit_code == 4
    assert info.value.metrics["step"] == 1


def test_conditioning_needs_cache(tiny_data):
    with pytest.raises(DataError):
        train(tiny_spec(), tiny_data, cache=None)
    from conftest import DictCache
    with pytest.raises(CacheMissError):
        train(tiny_spec(), tiny_data, cache=DictCache())


def test_zero_steps(tiny_data, tiny_cache, tmp_path):
    ckpt = train(tiny_spec(steps=0), tiny_data, tiny_cache, run_dir=tmp_path)
    assert ckpt.step == 0
    records = MetricsLog(tmp_path / "metrics.jsonl").records()
    assert len(records) == 1 and "header" in records[0]
    assert (tmp_path / "final.ckpt").is_file()


def test_run_directory_outputs(tiny_data, tiny_cache, tmp_path):
    train(tiny_spec(steps=6, checkpoint_every=3), tiny_data, tiny_cache, run_dir=tmp_path)
    records = MetricsLog(tmp_path / "metrics.jsonl").records()
    assert records[0]["header"]["g_lr"] == 1e-4 and records[0]["header"]["d_lr"] == 1e-3
    assert [r["step"] for r in records[1:]] == [1, 2, 3, 4, 5, 6]
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == [
        "step_00000003.ckpt", "step_00000006.ckpt"]
    gen = load_generator(tmp_path / "final.ckpt")
    assert gen.input_size == (TINY_SIZE, TINY_SIZE) and not gen.training


def test_deterministic_and_resumable(tiny_data, tiny_cache, tmp_path):
    a = state_from_checkpoint(train(tiny_spec(steps=10), tiny_data, tiny_cache))
    b = state_from_checkpoint(train(tiny_spec(steps=10), tiny_data, tiny_cache))
    _same_state(a, b)
    half = train(tiny_spec(steps=5), tiny_data, tiny_cache)
    save_checkpoint(tmp_path / "half.ckpt", half)
    resumed = state_from_checkpoint(train(tiny_spec(steps=10), tiny_data, tiny_cache,
                                          resume_from=tmp_path / "half.ckpt"))
    assert resumed.step == 10
    _same_state(a, resumed)


def test_checkpoint_round_trip(tiny_data, tiny_cache, tmp_path):
    state = init_state(tiny_spec())
    x, c = sample_batch(state, tiny_data, tiny_cache)
    train_step(state, x, c)
    save_checkpoint(tmp_path / "c.ckpt", state_to_checkpoint(state, {"note": "x"}))
    ckpt = load_checkpoint(tmp_path / "c.ckpt")
    assert ckpt.step == 1 and ckpt.meta == {"note": "x"}
    back = state_from_checkpoint(ckpt)
    _same_state(state, back)
    assert back.rng.bit_generator.state == state.rng.bit_generator.state
    assert json.dumps(ckpt.config)  # config is plain JSON


def test_corrupt_checkpoint(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"definitely not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_ablation_flags_shape_the_networks():
    base = init_state(tiny_spec())
    no_cond = init_state(tiny_spec(no_cond=True))
    no_skip = init_state(tiny_spec(no_skip=True))
    no_norm = init_state(tiny_spec(no_instance_norm=True))
    assert base.discriminator.f_c is not None and no_cond.discriminator.f_c is None
    assert not no_skip.generator.config.use_skips
    assert not no_norm.generator.config.use_instance_norm
    assert no_skip.generator.layers["12"].weight.shape[1] < base.generator.layers["12"].weight.shape[1]


def test_image_size_must_match(tiny_cache):
    from boundless.datapipe import synthetic_dataset
    ids, imgs = synthetic_dataset(4, size=33)
    with pytest.raises(DataError):
        train(tiny_spec(no_cond=True), TrainingData(ids, imgs))
