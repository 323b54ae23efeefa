import pytest

from boundless.config import RunConfig, desk_preset, flatten
from boundless.errors import ConfigError


def test_defaults_reproduce_reference_setup():
    cfg = RunConfig()
    spec = cfg.model_spec()
    t = spec.training
    assert (t.g_lr, t.d_lr, t.beta1, t.beta2, t.batch_size) == (1e-4, 1e-3, 0.5, 0.9, 256)
    assert spec.losses.lambda_adv == 1e-2
    assert t.mask_spec.jitter_px == 4 and t.mask_spec.fraction == 0.25
    assert spec.discriminator.input_size == (257, 257)
    assert cfg.panorama_config().final_width() == 582


def test_overrides_and_unknown_keys():
    cfg = RunConfig().with_overrides(["training.batch_size=64", "no_cond=true", "data.classes=[a, b]"])
    assert cfg.training.batch_size == 64 and cfg.no_cond and cfg.data.classes == ["a", "b"]
    assert cfg.model_spec().resolved().discriminator.use_conditioning is False
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(["training.nope=1"])
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(["training.batch_size"])
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(["training.batch_size=0"]).model_spec()


def test_file_round_trip(tmp_path):
    cfg = desk_preset()
    cfg.save(tmp_path / "c.yaml")
    back = RunConfig.from_file(tmp_path / "c.yaml")
    assert back == cfg and back.digest() == cfg.digest()
    assert RunConfig().digest() != cfg.digest()
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        RunConfig.from_file(tmp_path / "list.yaml")
    with pytest.raises(ConfigError):
        RunConfig.from_file(tmp_path / "missing.yaml")


def test_flatten_lists_every_leaf():
    keys = dict(flatten(RunConfig()))
    assert keys["training.mask.jitter_px"] == 4
    assert keys["losses.lambda_adv"] == 1e-2
    assert "embedding.provider" in keys


def test_scalar_types_are_coerced():
    cfg = RunConfig().with_overrides(["training.g_lr=1e-4", "training.d_lr=2"])
    assert cfg.training.g_lr == 1e-4 and isinstance(cfg.training.d_lr, float)
    assert RunConfig().with_overrides(["data.top_k=null"]).data.top_k is None
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(["training.batch_size=abc"])
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(["training.g_lr=fast"])
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(["no_cond=3"])
