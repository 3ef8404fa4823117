import pytest

from fadiff import config as config_mod
from fadiff.config import ConfigError, RunConfig


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert cfg.diffusion.T == 200
    assert cfg.eval.seeds == list(range(15))
    assert cfg.unet_config(8, 32).base_channels == 32


def test_parse_overrides_and_round_trip():
    cfg = config_mod.parse("seed: 4\ndiffusion:\n  epochs: 3\n  base_channels: 16\n"
                           "loss: {w2: 0.5}\nsample: {num_steps: 50}\n")
    assert cfg.seed == 4 and cfg.diffusion.epochs == 3
    assert cfg.train_config().w2 == 0.5
    assert cfg.train_config().master_seed == 4
    assert cfg.dataset_spec().seed == 4
    again = config_mod.parse(cfg.dump())
    assert again.to_dict() == cfg.to_dict()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="diffusion.epoch"):
        config_mod.parse("diffusion:\n  epoch: 3\n")
    with pytest.raises(ConfigError, match="bogus"):
        config_mod.parse("bogus: 1\n")


def test_bad_values_rejected():
    with pytest.raises(ConfigError):
        config_mod.parse("diffusion: {mode: sideways}\n").validate()
    with pytest.raises(ConfigError):
        config_mod.parse("sample: {num_steps: 500}\n").validate()
    with pytest.raises(ConfigError):
        config_mod.parse("data: 3\n")
    with pytest.raises(ConfigError):
        config_mod.parse("data: [unclosed\n")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        config_mod.load(tmp_path / "none.yaml")
    assert config_mod.load(None).to_dict() == RunConfig().to_dict()
