# storage/config_loader.py - TOML model configs on top of the named presets
import logging

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from config import BACKBONE_PRESETS
from services.backbone import BackboneConfig
from utils.errors import FormatError

logger = logging.getLogger()

CONFIG_KEYS = (
    "preset",
    "channels",
    "depths",
    "ffn_ratios",
    "plan",
    "selection_kernel",
    "selection_mode",
    "pooling",
    "flow",
    "branch_divisor",
    "stem_channels",
    "in_channels",
)


def parse_model_config(text, source="<config>"):
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise FormatError(f"{source}: invalid TOML ({e})")
    unknown = sorted(set(data) - set(CONFIG_KEYS))
    if unknown:
        raise FormatError(f"{source}: unknown config keys {unknown}, expected a subset of {list(CONFIG_KEYS)}")
    return data


def resolve_backbone_config(data=None, preset=None) -> BackboneConfig:
    """Start from `preset` (argument wins over the file's key), then apply the remaining keys."""
    data = dict(data or {})
    name = preset or data.pop("preset", None)
    data.pop("preset", None)
    if name is None and not {"channels", "depths"} <= set(data):
        name = "lsknet-t"
    settings = {}
    if name is not None:
        if name not in BACKBONE_PRESETS:
            raise FormatError(f"unknown preset {name!r}, expected one of {sorted(BACKBONE_PRESETS)}")
        settings.update(BACKBONE_PRESETS[name])
    settings.update(data)
    cfg = BackboneConfig.from_dict(settings)
    logger.info(f"Resolved backbone config (preset={name}): {cfg.to_dict()}")
    return cfg


def load_model_config(path=None, preset=None) -> BackboneConfig:
    data = {}
    if path is not None:
        with open(path) as handle:
            data = parse_model_config(handle.read(), source=path)
    return resolve_backbone_config(data, preset=preset)
