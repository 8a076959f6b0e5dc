# tests/test_config.py
import json

import pytest
import yaml

from wmcloak.core.config_manager import RESOLVED_CONFIG_NAME, ConfigManager, RunConfig, parse_config
from wmcloak.core.errors import ConfigError
from wmcloak.utils.seeding import derive_seed


def test_empty_config_gives_defaults():
    config = parse_config()
    assert config.train.c == pytest.approx(10 / 255)
    assert config.train.alpha == 1.0 and config.train.beta == 10.0 and config.train.w == 4.0
    assert config.train.batch_size == 8 and config.train.learning_rate == 0.001 and config.train.epochs == 200
    assert config.image_size == (512, 512)
    assert config.imitation.strength == 0.3


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "run.json"
    path.write_text("")
    assert parse_config(path) == RunConfig()


def test_override_wins_over_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"train": {"beta": 5.0, "epochs": 3}}))
    config = parse_config(path, {"beta": 0.0, "alpha": None})
    assert config.train.beta == 0.0
    assert config.train.epochs == 3
    assert config.train.alpha == 1.0


def test_yaml_config(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"seed": 7, "defense": {"kind": "tvm", "tvm_iters": 5}}))
    config = parse_config(path)
    assert config.seed == 7
    assert config.defense_config().kind == "tvm"
    assert config.defense_config().tvm_iters == 5


def test_unknown_key_is_named(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"train": {"betta": 1.0}}))
    with pytest.raises(ConfigError, match="betta") as info:
        parse_config(path)
    assert info.value.fields == ["train.betta"]


@pytest.mark.parametrize("overrides, field", [
    ({"c": 0.0}, "train.c"),
    ({"image_size": [480, 480]}, "train.image_size"),
    ({"strength": 1.5}, "imitation.strength"),
    ({"kind": "blur"}, "defense.kind"),
])
def test_constraint_violations_name_field(overrides, field):
    with pytest.raises(ConfigError) as info:
        parse_config(overrides=overrides)
    assert field in info.value.fields


def test_unknown_override_flag():
    with pytest.raises(ConfigError):
        parse_config(overrides={"nonsense": 1})


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        parse_config(bad)
    listing = tmp_path / "list.json"
    listing.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        parse_config(listing)


def test_derived_configs():
    config = parse_config(overrides={"seed": 3, "image_size": [64, 64], "beta": 2.0, "strength": 0.4})
    train = config.train_config()
    assert train.image_size == (64, 64)
    assert train.weights.beta == 2.0
    assert train.seed == derive_seed(3, "train")
    assert config.imitation_config().strength == 0.4
    assert config.render_params().placement == "center"


def test_save_settings(tmp_path):
    manager = ConfigManager()
    manager.apply_overrides({"epochs": 2})
    config = manager.resolve()
    path = manager.save_settings(config, tmp_path)
    assert path.name == RESOLVED_CONFIG_NAME
    assert json.loads(path.read_text())["train"]["epochs"] == 2
    assert RunConfig.model_validate(json.loads(path.read_text())) == config
