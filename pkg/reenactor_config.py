"""Experiment configuration: typed sections, TOML loading and dotted overrides."""

import copy
import hashlib
import json
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from reenactor_errors import ConfigError

# Full-scale channel schedules, divided by `channel_divisor` at desk scale
FULL_DOWN_CHANNELS = [64, 128, 256, 512, 1024, 1024, 1024, 1024]
FULL_UP_CHANNELS = [1024, 1024, 1024, 1024, 512, 256, 128]
FULL_DECODER_CHANNELS = [1024, 1024, 1024, 1024, 512, 256, 128, 64]


@dataclass
class DataConfig:
    resolution: int = 64
    layout: str = "ibug68_gaze"
    split_ratio: float = 0.8
    split_seed: int = 0
    p_swap: float = 0.5
    face_scale: float = 0.36


@dataclass
class ParsingConfig:
    use_gaze: bool = False
    stroke_sigma: float = 0.0  # 0 means resolution / 64
    backend: str = "landmark_rasterizer"
    external_model_path: str = ""
    colorize_threshold: float = 0.1


@dataclass
class ModelConfig:
    channel_divisor: int = 8
    down_channels: list = field(default_factory=list)
    up_channels: list = field(default_factory=list)
    decoder_channels: list = field(default_factory=list)
    spade_on_last: int = 4
    spade_hidden: int = 16
    use_concat: bool = True
    disc_scales: int = 2
    disc_channels: int = 16
    disc_layers: int = 3
    fusion_channels: int = 16


@dataclass
class LossConfig:
    lambda_app: float = 25.0
    alpha_r: float = 25.0
    alpha_p: float = 1.0
    alpha_g: float = 1.0
    alpha_i: float = 1.0
    perceptual_extractor: str = "random_pyramid"
    perceptual_layer_weights: list = field(default_factory=list)
    id_embedder: str = "random_projection"
    id_embedder_path: str = ""
    plugin_seed: int = 1234


@dataclass
class OptimConfig:
    lr_generator: float = 1e-4
    lr_discriminator: float = 5e-5
    adam_beta1: float = 0.0
    adam_beta2: float = 0.999
    batch_size: int = 8
    max_steps: int = 2000
    fusion_steps: int = 500
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 10


@dataclass
class FusionConfig:
    enabled: bool = True
    warp_mode: str = "bilinear"
    same_identity_pairs: bool = True


@dataclass
class EvalConfig:
    identity_far: float = 0.01
    guides_per_reference: int = 4
    calibration_fraction: float = 0.5
    landmark_regressor_path: str = ""
    toy_embedder_path: str = ""
    seed: int = 0


@dataclass
class ReenactorConfig:
    data: DataConfig = field(default_factory=DataConfig)
    parsing: ParsingConfig = field(default_factory=ParsingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


SECTIONS = {
    "data": DataConfig,
    "parsing": ParsingConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "optim": OptimConfig,
    "fusion": FusionConfig,
    "eval": EvalConfig,
}


def desk_config(resolution=64):
    """Desk-scale preset: CPU friendly channel widths and step counts"""
    config = ReenactorConfig()
    config.data.resolution = resolution
    return validate_config(config)


def full_config():
    """Full-scale preset matching the published architecture"""
    config = ReenactorConfig()
    config.data.resolution = 256
    config.model.channel_divisor = 1
    config.model.spade_hidden = 128
    config.model.disc_scales = 3
    config.model.disc_channels = 64
    config.model.fusion_channels = 64
    config.loss.perceptual_extractor = "vgg19"
    config.optim.batch_size = 16
    config.optim.max_steps = 200000
    config.optim.fusion_steps = 20000
    return validate_config(config)


def depth_for(resolution):
    """Number of stride-2 blocks taking `resolution` down to 1x1"""
    return int(round(math.log2(resolution)))


def parsing_channels(config):
    return 17 if config.parsing.use_gaze else 15


def stroke_sigma_for(config):
    sigma = config.parsing.stroke_sigma
    return sigma if sigma > 0 else config.data.resolution / 64.0


def derive_channels(config):
    """Fill empty channel lists from the full-scale schedules"""
    model = config.model
    depth = depth_for(config.data.resolution)
    div = model.channel_divisor
    if not model.down_channels:
        full = FULL_DOWN_CHANNELS + [FULL_DOWN_CHANNELS[-1]] * max(0, depth - 8)
        model.down_channels = [max(1, c // div) for c in full[:depth]]
    if not model.up_channels:
        full = [FULL_UP_CHANNELS[0]] * max(0, depth - 8) + FULL_UP_CHANNELS
        model.up_channels = [max(1, c // div) for c in full[len(full) - (depth - 1):]]
    if not model.decoder_channels:
        full = [FULL_DECODER_CHANNELS[0]] * max(0, depth - 8) + FULL_DECODER_CHANNELS
        model.decoder_channels = [max(1, c // div) for c in full[len(full) - depth:]]
    return config


def validate_config(config):
    """Check invariants and derive defaults; raises ConfigError"""
    res = config.data.resolution
    if res < 16 or res & (res - 1) != 0:
        raise ConfigError(f"resolution must be a power of two >= 16, got {res}")
    if not 0.0 < config.data.split_ratio < 1.0:
        raise ConfigError("data.split_ratio must lie in (0, 1)")
    if not 0.0 <= config.data.p_swap <= 1.0:
        raise ConfigError("data.p_swap must be a probability")
    if config.parsing.use_gaze and "gaze" not in config.data.layout:
        raise ConfigError(f"parsing.use_gaze needs a layout with gaze points, got '{config.data.layout}'")

    derive_channels(config)
    depth = depth_for(res)
    model = config.model
    if len(model.down_channels) != depth:
        raise ConfigError(f"model.down_channels needs {depth} entries for resolution {res}, got {len(model.down_channels)}")
    if len(model.up_channels) != depth - 1:
        raise ConfigError(f"model.up_channels needs {depth - 1} entries for resolution {res}, got {len(model.up_channels)}")
    if len(model.decoder_channels) != depth:
        raise ConfigError(f"model.decoder_channels needs {depth} entries for resolution {res}, got {len(model.decoder_channels)}")
    if any(c <= 0 for c in model.down_channels + model.up_channels + model.decoder_channels):
        raise ConfigError("channel widths must be positive")
    # SPADE normalizes per instance, so its modules need inputs larger than 1x1
    if not 0 <= model.spade_on_last <= depth - 1:
        raise ConfigError(f"model.spade_on_last must lie in [0, {depth - 1}]")
    if model.disc_scales < 2:
        raise ConfigError("model.disc_scales must be at least 2")

    loss = config.loss
    for name in ("lambda_app", "alpha_r", "alpha_p", "alpha_g", "alpha_i"):
        if getattr(loss, name) < 0:
            raise ConfigError(f"loss.{name} must be >= 0")

    optim = config.optim
    if optim.lr_generator <= 0 or optim.lr_discriminator <= 0:
        raise ConfigError("learning rates must be positive")
    for name in ("adam_beta1", "adam_beta2"):
        if not 0.0 <= getattr(optim, name) < 1.0:
            raise ConfigError(f"optim.{name} must lie in [0, 1)")
    if optim.batch_size < 1:
        raise ConfigError("optim.batch_size must be >= 1")
    if optim.max_steps < 0 or optim.fusion_steps < 0:
        raise ConfigError("step counts must be >= 0")
    if config.fusion.warp_mode not in ("bilinear", "nearest"):
        raise ConfigError("fusion.warp_mode must be 'bilinear' or 'nearest'")
    if not 0.0 < config.eval.calibration_fraction < 1.0:
        raise ConfigError("eval.calibration_fraction must lie in (0, 1)")
    return config


def config_to_dict(config):
    return asdict(config)


def config_from_dict(values, base=None):
    """Build a config from nested dicts (TOML tables or a checkpoint echo)"""
    config = base if base is not None else ReenactorConfig()
    for section, table in values.items():
        if section not in SECTIONS:
            raise ConfigError(f"Unknown config section '{section}'")
        current = getattr(config, section)
        known = {f.name for f in fields(current)}
        unknown = set(table) - known
        if unknown:
            raise ConfigError(f"Unknown keys in [{section}]: {', '.join(sorted(unknown))}")
        setattr(config, section, replace(current, **table))
    return config


def parse_override_value(raw, current):
    """Convert an override string to the type of the field it replaces"""
    text = raw.strip()
    if isinstance(current, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"Expected a boolean, got '{raw}'")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, list):
        text = text.strip("[]")
        if not text:
            return []
        return [float(v) if "." in v or "e" in v.lower() else int(v) for v in text.split(",")]
    return text


def apply_overrides(config, overrides):
    """Apply 'section.key=value' strings in order"""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"Override '{item}' is not of the form section.key=value")
        key, raw = item.split("=", 1)
        if "." not in key:
            raise ConfigError(f"Override key '{key}' must be dotted (section.key)")
        section, name = key.strip().split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"Unknown config section '{section}'")
        table = getattr(config, section)
        if not hasattr(table, name):
            raise ConfigError(f"Unknown config key '{key}'")
        try:
            value = parse_override_value(raw, getattr(table, name))
        except ValueError as e:
            raise ConfigError(f"Bad value for '{key}': {e}") from e
        setattr(table, name, value)
    return config


def load_config(path=None, overrides=None, resolution=None, base=None):
    """Load a TOML config over `base` (the desk preset by default), apply overrides and validate"""
    config = copy.deepcopy(base) if base is not None else ReenactorConfig()
    if path:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        try:
            with open(path, "rb") as f:
                values = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Could not parse {path}: {e}") from e
        config = config_from_dict(values, config)
    if resolution is not None:
        config.data.resolution = int(resolution)
    apply_overrides(config, overrides)
    return validate_config(config)


def config_hash(config):
    """Stable short hash of the resolved configuration"""
    payload = json.dumps(config_to_dict(config), sort_keys=True).encode("utf-8")
    return hashlib.sha1(payload).hexdigest()[:10]


def echo_config(config, run_dir, name="resolved_config.json"):
    """Write the resolved configuration into the run directory"""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / name
    path.write_text(json.dumps(config_to_dict(config), indent=2, sort_keys=True))
    return path
