from pathlib import Path

import pytest

from weightmask.cli import apply_overrides
from weightmask.config import ConfigError, ExperimentConfig, from_dict, load_config, to_toml_dict

CONFIGS = sorted((Path(__file__).parents[1] / "configs").glob("*.toml"))


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.stem)
def test_shipped_configs_validate(path):
    cfg = load_config(path)
    cfg.validate()
    assert cfg.name == path.stem


def test_alpha_and_beta_are_exclusive():
    with pytest.raises(ConfigError):
        from_dict({"mask": {"alpha": 1e-5, "beta": 1e-4}})


def test_beta_scales_with_batch():
    cfg = from_dict({"mask": {"beta": 1.28e-2}, "optim": {"batch_size": 128}})
    assert cfg.alpha_for() == pytest.approx(1e-4)


def test_stage_override_wins():
    cfg = from_dict({"mask": {"beta": 1e-4}, "stages": [{"name": "a", "alpha": 3e-6}]})
    assert cfg.alpha_for(cfg.stage("a")) == 3e-6


def test_duplicate_stage_names():
    with pytest.raises(ConfigError):
        from_dict({"stages": [{"name": "a"}, {"name": "a"}]})


def test_fixed_output_must_name_earlier_stage():
    with pytest.raises(ConfigError):
        from_dict({"stages": [{"name": "a", "fixed_output_from": "b"}, {"name": "b"}]})


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        from_dict({"mask": {"betta": 1}})
    with pytest.raises(ConfigError, match="unknown"):
        from_dict({"bogus": {}})


def test_round_trip_keeps_digest():
    cfg = load_config(CONFIGS[0])
    again = from_dict(to_toml_dict(cfg))
    assert again.digest() == cfg.digest()


def test_digest_tracks_content():
    a, b = ExperimentConfig(), ExperimentConfig()
    assert a.digest() == b.digest()
    b.mask.steps += 1
    assert a.digest() != b.digest()


def test_overrides():
    cfg = apply_overrides(ExperimentConfig(), ["mask.steps=12", "experiment.seeds=[3, 4]", "mask.exclude=['x']"])
    assert cfg.mask.steps == 12 and cfg.seeds == [3, 4] and cfg.mask.exclude == ["x"]
    with pytest.raises(ConfigError):
        apply_overrides(ExperimentConfig(), ["mask.nope=1"])
    with pytest.raises(ConfigError):
        apply_overrides(ExperimentConfig(), ["nodot"])


def test_bad_toml(tmp_path):
    (tmp_path / "x.toml").write_text("[mask\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "x.toml")
