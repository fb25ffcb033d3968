from pathlib import Path

from pytest import raises

from miragedesk.console.config import RunConfig
from miragedesk.console.config import load_config
from miragedesk.console.config import parse_config
from miragedesk.exceptions import ConfigError
from miragedesk.exceptions import InjectionError


def test_desk_defaults() -> None:
    config = parse_config("")
    assert config.data.preset == "desk"
    assert config.training.steps == 500
    assert config.training.lr == 1e-3
    assert config.vae.encoder_channels == (16, 16, 32, 32)
    assert config.stage("h").stage == "H"
    assert config.stage("h").steps == 500


def test_full_preset_with_override() -> None:
    config = parse_config("[data]\npreset = full\n[training]\nsteps = 20\n")
    assert config.data.height == 512
    assert config.vae.latent_channels == 16
    assert config.pipeline.latent_channels == 16
    assert config.pipeline.width == 768
    assert config.training.steps == 20
    assert config.training.batch_size == 8


def test_ini_round_trip(tiny_config: Path) -> None:
    config = load_config(tiny_config)
    assert config.data.frames == 5
    assert config.vae.decoder_channels == (8, 8, 8, 8)
    assert config.training.steps == 2
    assert parse_config(config.to_ini()) == config
    assert parse_config(RunConfig().to_ini()) == RunConfig()


def test_saved_config(tmp_path: Path) -> None:
    config = parse_config("[metrics]\nmode = actor_centric\n")
    config.save(tmp_path / "run")
    assert load_config(tmp_path / "run" / "config.ini") == config
    assert ("metrics.mode", "actor_centric") in config.items()
    assert ("pipeline.noise_augment", "false") in config.items()


def test_unknown_keys_and_sections() -> None:
    with raises(ConfigError, match="Unknown config key training.speed"):
        parse_config("[training]\nspeed = 3\n")
    with raises(ConfigError, match="Unknown config section 'extra'"):
        parse_config("[extra]\na = 1\n")
    with raises(ConfigError, match="Unknown preset"):
        parse_config("[data]\npreset = huge\n")
    with raises(ConfigError, match="Malformed"):
        parse_config("steps = 3\n")


def test_invalid_values() -> None:
    with raises(ConfigError, match="Invalid value 'many' for training.steps"):
        parse_config("[training]\nsteps = many\n")
    with raises(ConfigError, match="Invalid value"):
        parse_config("[pipeline]\nnoise_augment = maybe\n")
    with raises(ConfigError, match="steps must be positive"):
        parse_config("[training]\nsteps = 0\n")
    with raises(InjectionError, match="temporal leakage"):
        parse_config("[injection]\nsites = dec2\n")
    assert parse_config("[pipeline]\nnoise_augment = yes\n").pipeline.noise_augment


def test_missing_config_file(tmp_path: Path) -> None:
    with raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.ini")
