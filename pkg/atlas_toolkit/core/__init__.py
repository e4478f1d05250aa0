from .config import ModelConfig, debug_enabled, load_config, parse_config_file
from .errors import (
    AtlasToolkitError,
    ConfigError,
    FileFormatError,
    FoldoverError,
    InvalidInputError,
    NumericalError,
)
from .utils import format_eta, make_rng

__all__ = [
    "debug_enabled",
    "ModelConfig",
    "load_config",
    "parse_config_file",
    "AtlasToolkitError",
    "ConfigError",
    "FileFormatError",
    "FoldoverError",
    "InvalidInputError",
    "NumericalError",
    "format_eta",
    "make_rng",
]
