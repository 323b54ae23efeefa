"""Joint adversarial training loop.

Every step performs one discriminator update followed by one generator
update on the same batch and mask:

1. advance each spectral-norm power iteration once;
2. draw a jittered mask, build ``z`` and run the generator once;
3. score the real image and the composite ``x_hat`` (generator output
   detached) and take an Adam step on the hinge loss of the discriminator;
4. re-score ``x_hat`` with the *updated* discriminator and take an Adam step
   on ``L_rec + lambda * L_adv,G`` (+ any auxiliary stabilizer loss).

All randomness (batch selection, mask jitter) comes from one numpy
``Generator`` whose state is saved in checkpoints, so a resumed run replays
the exact stream of an uninterrupted one.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .discriminator import Discriminator, DiscriminatorConfig, TowerLayer, build_discriminator
from .errors import CacheMissError, CheckpointError, ConfigError, DataError, NumericalAbort
from .generator import Generator, GeneratorConfig, LayerSpec, build_generator
from .losses import (LossWeights, feature_matching_loss, hinge_d_loss, hinge_g_loss, perceptual_loss,
                     recon_loss, total_g_loss)
from .masking import Geometry, MaskSpec, apply_mask, build_mask, composite, draw_jitter

log = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclasses.dataclass(frozen=True)
class TrainingConfig:
    g_lr: float = 1e-4
    d_lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.9
    batch_size: int = 256
    steps: int = 100_000
    mask_spec: MaskSpec = MaskSpec(Geometry.RIGHT_STRIP, 0.25, jitter_px=4)
    no_cond: bool = False
    no_skip: bool = False
    no_instance_norm: bool = False
    seed: int = 0
    checkpoint_every: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.mask_spec, dict):
            object.__setattr__(self, "mask_spec", MaskSpec(**self.mask_spec))
        if self.g_lr < 0 or self.d_lr < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.steps < 0 or self.checkpoint_every < 0:
            raise ConfigError("steps and checkpoint_every must be >= 0")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")


@dataclasses.dataclass(frozen=True)
class ModelSpec:
    """Everything needed to rebuild a training run's networks and objective."""

    generator: GeneratorConfig = GeneratorConfig()
    discriminator: DiscriminatorConfig = DiscriminatorConfig()
    losses: LossWeights = LossWeights()
    training: TrainingConfig = TrainingConfig()

    def resolved(self) -> "ModelSpec":
        """Apply the ablation flags to the network configs."""
        t = self.training
        gen = dataclasses.replace(
            self.generator,
            use_skips=self.generator.use_skips and not t.no_skip,
            use_instance_norm=self.generator.use_instance_norm and not t.no_instance_norm,
        )
        cond = self.discriminator.use_conditioning and not t.no_cond and self.losses.uses_conditioning
        disc = dataclasses.replace(self.discriminator, use_conditioning=cond)
        return dataclasses.replace(self, generator=gen, discriminator=disc)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["training"]["mask_spec"].pop("bitmap", None)
        return json.loads(json.dumps(d, default=lambda o: getattr(o, "value", o)))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        gen = dict(d["generator"])
        gen["layer_table"] = tuple(LayerSpec(**row) for row in gen["layer_table"])
        disc = dict(d["discriminator"])
        disc["tower_table"] = tuple(TowerLayer(**row) for row in disc["tower_table"])
        disc["input_size"] = tuple(disc["input_size"])
        training = dict(d["training"])
        training["mask_spec"] = MaskSpec(**training["mask_spec"])
        return cls(GeneratorConfig(**gen), DiscriminatorConfig(**disc), LossWeights(**d["losses"]),
                   TrainingConfig(**training))


@dataclasses.dataclass
class TrainingData:
    ids: list[str]
    images: torch.Tensor  # (N, 3, H, W) in [-1, 1]

    def __post_init__(self):
        if len(self.ids) != self.images.shape[0]:
            raise DataError("ids and images differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("training ids are not unique")
        if len(self.ids) == 0:
            raise DataError("training set is empty")


@dataclasses.dataclass
class TrainState:
    spec: ModelSpec
    generator: Generator
    discriminator: Discriminator
    g_opt: torch.optim.Optimizer
    d_opt: torch.optim.Optimizer
    rng: np.random.Generator
    step: int = 0
    provider: Optional[Callable] = None

    @property
    def dtype(self) -> torch.dtype:
        return _DTYPES[self.spec.training.dtype]


def _optimizers(spec: ModelSpec, gen: Generator, disc: Discriminator):
    t = spec.training
    g_opt = torch.optim.Adam(gen.parameters(), lr=t.g_lr, betas=(t.beta1, t.beta2))
    d_opt = torch.optim.Adam(disc.parameters(), lr=t.d_lr, betas=(t.beta1, t.beta2))
    return g_opt, d_opt


def init_state(spec: ModelSpec, provider: Optional[Callable] = None) -> TrainState:
    spec = spec.resolved()
    t = spec.training
    dtype = _DTYPES[t.dtype]
    gen = build_generator(spec.generator, seed=t.seed).to(dtype)
    disc = build_discriminator(spec.discriminator, seed=t.seed + 1).to(dtype)
    g_opt, d_opt = _optimizers(spec, gen, disc)
    return TrainState(spec, gen, disc, g_opt, d_opt, np.random.default_rng(t.seed), 0, provider)


def state_to_checkpoint(state: TrainState, meta: Optional[dict] = None) -> Checkpoint:
    return Checkpoint(
        step=state.step,
        config=state.spec.to_dict(),
        generator={k: v.clone() for k, v in state.generator.state_dict().items()},
        discriminator={k: v.clone() for k, v in state.discriminator.state_dict().items()},
        opt_g=copy.deepcopy(state.g_opt.state_dict()),
        opt_d=copy.deepcopy(state.d_opt.state_dict()),
        rng_state=state.rng.bit_generator.state,
        meta=dict(meta or {}),
    )


def state_from_checkpoint(ckpt: Checkpoint, provider: Optional[Callable] = None) -> TrainState:
    try:
        spec = ModelSpec.from_dict(ckpt.config)
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint config is incompatible: {exc}") from exc
    state = init_state(spec, provider)
    state.generator.load_state_dict(ckpt.generator)
    state.discriminator.load_state_dict(ckpt.discriminator)
    if ckpt.opt_g is not None:
        state.g_opt.load_state_dict(ckpt.opt_g)
    if ckpt.opt_d is not None:
        state.d_opt.load_state_dict(ckpt.opt_d)
    if ckpt.rng_state is not None:
        state.rng.bit_generator.state = ckpt.rng_state
    state.step = ckpt.step
    return state


def load_generator(path) -> Generator:
    """Generator from a checkpoint file, in eval mode."""
    ckpt = load_checkpoint(path)
    state = state_from_checkpoint(ckpt)
    state.generator.eval()
    state.generator.input_size = tuple(state.spec.discriminator.input_size)
    return state.generator


def _finite_or_abort(metrics: dict, tensors: Sequence[torch.Tensor], what: str):
    for t in tensors:
        if t is not None and not bool(torch.isfinite(t).all()):
            raise NumericalAbort(f"non-finite {what} at step {metrics.get('step')}", metrics)


def _scalar(t: torch.Tensor) -> float:
    return t.detach().item()


def _assign_grads(params, grads):
    for p, g in zip(params, grads):
        p.grad = g


def draw_mask(state: TrainState, height: int, width: int) -> tuple[torch.Tensor, int]:
    spec = state.spec.training.mask_spec
    seed = int(state.rng.integers(0, 2 ** 62))
    mask = build_mask(dataclasses.replace(spec, seed=seed), height, width)
    jitter = 0 if spec.geometry is Geometry.FREE_FORM else draw_jitter(dataclasses.replace(spec, seed=seed))
    return mask, jitter


def sample_batch(state: TrainState, data: TrainingData, cache=None):
    n = len(data.ids)
    size = min(state.spec.training.batch_size, n)
    idx = np.sort(state.rng.choice(n, size=size, replace=False))
    x = data.images[idx].to(state.dtype)
    c = None
    if state.discriminator.f_c is not None:
        if cache is None:
            raise DataError("conditioning is enabled but no embedding cache was given")
        c = cache.batch([data.ids[i] for i in idx]).to(state.dtype)
    return x, c


def _check_composited(x_hat: torch.Tensor, z: torch.Tensor, m: torch.Tensor):
    # Known pixels of anything fed to D as fake must be exactly the known input pixels.
    if not torch.equal(x_hat * (1 - m), z):
        raise AssertionError("discriminator received a non-composited generator output")


def train_step(state: TrainState, x: torch.Tensor, c: Optional[torch.Tensor] = None,
               mask: Optional[torch.Tensor] = None) -> dict:
    """One discriminator update then one generator update. Returns scalar metrics."""
    gen, disc = state.generator, state.discriminator
    weights = state.spec.losses
    gen.train()
    disc.train()
    x = x.to(state.dtype)
    batch, _, height, width = x.shape
    jitter = 0
    if mask is None:
        mask, jitter = draw_mask(state, height, width)
    m = mask.to(state.dtype).reshape(-1, 1, height, width).expand(batch, -1, -1, -1)
    if disc.f_c is None:
        c = None
    elif c is None:
        raise DataError("conditioning is enabled but the batch has no conditioning vectors")
    metrics = {"step": state.step + 1}

    disc.power_iterate(1)
    z = apply_mask(x, m)
    g = gen(z, m)

    # discriminator update on the current generator output
    d_params = [p for p in disc.parameters()]
    x_hat_d = composite(g.detach(), z, m)
    _check_composited(x_hat_d, z, m)
    d_real = disc(x, m, c)
    d_fake = disc(x_hat_d, m, c)
    l_d = hinge_d_loss(d_real, d_fake)
    metrics.update(l_adv_d=_scalar(l_d), d_real_mean=_scalar(d_real.mean()), d_fake_mean=_scalar(d_fake.mean()))
    _finite_or_abort(metrics, [l_d], "discriminator loss")
    d_grads = torch.autograd.grad(l_d, d_params)
    _finite_or_abort(metrics, d_grads, "discriminator gradient")
    state.d_opt.zero_grad(set_to_none=True)
    _assign_grads(d_params, d_grads)
    state.d_opt.step()

    # generator update against the updated discriminator
    g_params = [p for p in gen.parameters()]
    x_hat = composite(g, z, m)
    _check_composited(x_hat.detach(), z, m)
    l_rec = recon_loss(x, g)
    l_adv_g = hinge_g_loss(disc(x_hat, m, c))
    l_total = total_g_loss(l_rec, l_adv_g, weights)
    if weights.fm_weight > 0:
        l_fm = feature_matching_loss(disc, x, x_hat, m)
        l_total = l_total + weights.fm_weight * l_fm
        metrics["l_fm"] = _scalar(l_fm)
    if weights.perc_weight > 0:
        if state.provider is None:
            raise ConfigError("the perceptual stabilizer needs an embedding provider")
        l_perc = perceptual_loss(state.provider, x, x_hat)
        l_total = l_total + weights.perc_weight * l_perc
        metrics["l_perceptual"] = _scalar(l_perc)
    metrics.update(l_rec=_scalar(l_rec), l_adv_g=_scalar(l_adv_g), l_total=_scalar(l_total), mask_jitter=jitter)
    _finite_or_abort(metrics, [l_total], "generator loss")
    g_grads = torch.autograd.grad(l_total, g_params)
    _finite_or_abort(metrics, g_grads, "generator gradient")
    state.g_opt.zero_grad(set_to_none=True)
    _assign_grads(g_params, g_grads)
    state.g_opt.step()

    state.step += 1
    return metrics


def metrics_header(state: TrainState) -> dict:
    t = state.spec.training
    return {
        "header": {
            "g_lr": t.g_lr, "d_lr": t.d_lr, "beta1": t.beta1, "beta2": t.beta2,
            "batch_size": t.batch_size, "lambda_adv": state.spec.losses.lambda_adv,
            "stabilizer": state.spec.losses.stabilizer.value,
            "no_cond": t.no_cond, "no_skip": t.no_skip, "no_instance_norm": t.no_instance_norm,
            "seed": t.seed, "dtype": t.dtype,
        }
    }


class MetricsLog:
    """Append-only newline-delimited JSON records."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: dict):
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def records(self) -> list[dict]:
        if not self.path.is_file():
            return []
        with open(self.path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


def checkpoint_path(run_dir, step: int) -> Path:
    return Path(run_dir) / "checkpoints" / f"step_{step:08d}.ckpt"


def train(spec: ModelSpec, data: TrainingData, cache=None, run_dir=None,
          resume_from=None, provider: Optional[Callable] = None,
          callback: Optional[Callable[[TrainState, dict], None]] = None,
          meta: Optional[dict] = None) -> Checkpoint:
    """Run ``spec.training.steps`` total steps; return the final checkpoint.

    With ``run_dir`` set, metrics go to ``run_dir/metrics.jsonl``, periodic
    checkpoints to ``run_dir/checkpoints/`` and the final one to
    ``run_dir/final.ckpt``.
    """
    if resume_from is not None:
        ckpt = resume_from if isinstance(resume_from, Checkpoint) else load_checkpoint(resume_from)
        state = state_from_checkpoint(ckpt, provider)
    else:
        state = init_state(spec, provider)
    total = spec.training.steps if resume_from is None else max(spec.training.steps, state.step)
    if state.discriminator.f_c is not None:
        if cache is None:
            raise DataError("conditioning is enabled but no embedding cache was given")
        missing = [i for i in data.ids if i not in cache]
        if missing:
            raise CacheMissError(f"{len(missing)} training ids have no cached vector, e.g. {missing[0]!r}")
    if data.images.shape[-2:] != tuple(state.spec.discriminator.input_size):
        raise DataError(
            f"images are {tuple(data.images.shape[-2:])}, model expects {state.spec.discriminator.input_size}"
        )

    logbook = MetricsLog(Path(run_dir) / "metrics.jsonl") if run_dir is not None else None
    if logbook is not None and state.step == 0:
        logbook.append(metrics_header(state))
    every = state.spec.training.checkpoint_every
    while state.step < total:
        x, c = sample_batch(state, data, cache)
        try:
            metrics = train_step(state, x, c)
        except NumericalAbort as exc:
            if logbook is not None:
                logbook.append({"abort": str(exc), **exc.metrics})
            raise
        if logbook is not None:
            logbook.append(metrics)
        if callback is not None:
            callback(state, metrics)
        if run_dir is not None and every and state.step % every == 0:
            save_checkpoint(checkpoint_path(run_dir, state.step), state_to_checkpoint(state, meta))
        if state.step % 100 == 0:
            log.info("step %d l_rec=%.4f l_adv_d=%.4f", state.step, metrics["l_rec"], metrics["l_adv_d"])
    final = state_to_checkpoint(state, meta)
    if run_dir is not None:
        save_checkpoint(Path(run_dir) / "final.ckpt", final)
    return final
