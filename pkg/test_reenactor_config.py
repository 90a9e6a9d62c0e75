import pytest

from reenactor_config import (
    apply_overrides,
    config_from_dict,
    config_hash,
    depth_for,
    desk_config,
    echo_config,
    load_config,
    full_config,
    parsing_channels,
    stroke_sigma_for,
    validate_config,
)
from reenactor_errors import ConfigError


def test_desk_channel_schedule():
    """Desk channels are the full-scale schedule truncated to the depth and divided by 8."""
    config = desk_config(64)
    assert config.model.down_channels == [8, 16, 32, 64, 128, 128]
    assert len(config.model.up_channels) == 5
    assert len(config.model.decoder_channels) == 6


def test_full_config_depth():
    """256x256 needs 8 stride-2 blocks to reach a 1x1 code."""
    config = full_config()
    assert depth_for(256) == 8
    assert config.model.down_channels[-1] == 1024
    assert config.model.disc_scales == 3


@pytest.mark.parametrize("resolution", [8, 48, 100])
def test_bad_resolution_rejected(resolution):
    """Resolutions below 16 or not a power of two are config errors."""
    with pytest.raises(ConfigError):
        desk_config(resolution)


def test_negative_weight_rejected():
    config = desk_config(32)
    config.loss.alpha_p = -1.0
    with pytest.raises(ConfigError, match="alpha_p"):
        validate_config(config)


def test_beta_outside_range_rejected():
    config = desk_config(32)
    config.optim.adam_beta2 = 1.0
    with pytest.raises(ConfigError):
        validate_config(config)


@pytest.mark.parametrize("fraction", [0.0, 1.0, 1.5])
def test_calibration_fraction_outside_range_rejected(fraction):
    config = desk_config(32)
    config.eval.calibration_fraction = fraction
    with pytest.raises(ConfigError, match="calibration_fraction"):
        validate_config(config)


def test_gaze_needs_gaze_layout():
    config = desk_config(32)
    config.data.layout = "ibug68"
    config.parsing.use_gaze = True
    with pytest.raises(ConfigError, match="gaze"):
        validate_config(config)


def test_parsing_channels_and_sigma():
    """15 channels by default, 17 with gaze; stroke sigma defaults to resolution / 64."""
    config = desk_config(64)
    assert parsing_channels(config) == 15
    assert stroke_sigma_for(config) == pytest.approx(1.0)
    config.parsing.use_gaze = True
    assert parsing_channels(config) == 17


def test_overrides_are_typed():
    config = apply_overrides(desk_config(32), ["loss.lambda_app=3", "model.use_concat=false", "optim.batch_size=4"])
    assert config.loss.lambda_app == 3.0
    assert config.model.use_concat is False
    assert config.optim.batch_size == 4


@pytest.mark.parametrize("override", ["nodot=1", "loss.missing=1", "bogus.key=1", "loss.alpha_r"])
def test_bad_override_rejected(override):
    with pytest.raises(ConfigError):
        apply_overrides(desk_config(32), [override])


def test_load_toml_with_overrides(tmp_path):
    """TOML values load first, then --set overrides, then the channels are derived."""
    path = tmp_path / "run.toml"
    path.write_text('[data]\nresolution = 32\n\n[loss]\nlambda_app = 10.0\n')
    config = load_config(path, ["loss.alpha_i=0.5"])
    assert config.data.resolution == 32
    assert config.loss.lambda_app == 10.0
    assert config.loss.alpha_i == 0.5
    assert len(config.model.down_channels) == 5


def test_resolution_flag_derives_empty_channels():
    config = load_config(None, resolution=32)
    assert len(config.model.down_channels) == 5
    assert len(config.model.up_channels) == 4


def test_explicit_channel_list_of_wrong_length_rejected(tmp_path):
    """A channel list the user wrote is never silently replaced."""
    with pytest.raises(ConfigError, match="down_channels needs 6 entries"):
        load_config(None, ["model.down_channels=[8,16]"], resolution=64)
    path = tmp_path / "run.toml"
    path.write_text("[model]\ndown_channels = [8, 16, 32, 64, 128, 128]\n")
    with pytest.raises(ConfigError, match="got 6"):
        load_config(path, resolution=32)
    assert load_config(path).model.down_channels == [8, 16, 32, 64, 128, 128]


def test_unknown_toml_section_rejected(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text("[nonsense]\nvalue = 1\n")
    with pytest.raises(ConfigError, match="nonsense"):
        load_config(path)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.toml")


def test_hash_is_stable_and_sensitive():
    a, b = desk_config(32), desk_config(32)
    assert config_hash(a) == config_hash(b)
    b.loss.lambda_app = 3.0
    assert config_hash(a) != config_hash(b)


def test_echo_round_trips(tmp_path):
    """The echoed JSON rebuilds the same configuration."""
    import json

    config = desk_config(32)
    path = echo_config(config, tmp_path)
    rebuilt = validate_config(config_from_dict(json.loads(path.read_text())))
    assert config_hash(rebuilt) == config_hash(config)
