"""Model configuration: JSON profile defaults, flat key = value files, CLI overrides.

Usage:
    from atlas_toolkit.core.config import load_config
    config = load_config()                                  # _defaults.json only
    config = load_config(profile="desk")                    # defaults + desk overlay
    config = load_config("run.cfg", overrides={"threads": 3})  # + file + CLI
"""

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError

logger = logging.getLogger("atlas-toolkit")

DEBUG_ENV = "ATLAS_TOOLKIT_DEBUG"

_PROFILES_DIR = Path(__file__).resolve().parent.parent / "profiles"

_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


def debug_enabled() -> bool:
    """True when ATLAS_TOOLKIT_DEBUG is 1, true or yes."""
    return os.environ.get(DEBUG_ENV, "").strip().lower() in ("1", "true", "yes")


@dataclass
class ModelConfig:
    """Every tunable of the groupwise model. Defaults come from profiles/_defaults.json."""

    profile_name: str = "_defaults"

    # Mixture
    classes: int = 3
    label_map: dict[str, list[int]] = field(default_factory=dict)
    zeta: float = 0.95
    prior_beta: float = 1e-2
    prior_nu_offset: float = 1.0
    eps_pi: float = 1e-6
    mixture_iterations: int = 1

    # Template
    alpha0: float = 1.01
    template_fwhm: float = 0.0

    # Bias
    bias_period_mm: float = 60.0
    bias_orders: list[int] = field(default_factory=list)
    bias_reg: float = 1e3
    bias_dc_precision: float = 1e-4

    # Affine
    affine_rot_precision: float = 1e-4
    affine_zoom_precision: float = 1e-2
    affine_shear_precision: float = 1e-4

    # Diffeomorphic
    lambda_zero: float = 1e-3
    lambda_membrane: float = 0.1
    lambda_bending: float = 0.5
    lambda_mu: float = 0.25
    lambda_lame: float = 0.125
    shoot_steps: int = 16
    multigrid_tol: float = 1e-6
    multigrid_max_cycles: int = 30

    # Gauss-Newton
    levenberg_init: float = 1e-2
    max_backtracks: int = 8
    gn_steps: int = 1

    # Outer loop
    max_sweeps: int = 30
    tol: float = 1e-6
    update_weights: bool = True
    update_bias: bool = True
    register_affine: bool = True
    register_velocity: bool = True
    update_template: bool = True
    fit_hyperpriors: bool = True
    segment_iterations: int = 20

    # Execution
    threads: int = 1

    def class_sets(self) -> dict[int, list[int]]:
        """Label value -> 0-based mixture classes it may be assigned to."""
        if not self.label_map:
            return {k + 1: [k] for k in range(self.classes)}
        return {int(label): [c - 1 for c in classes] for label, classes in self.label_map.items()}

    def validate(self) -> "ModelConfig":
        """Raise ConfigError on values the model cannot run with."""
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        if not (1.0 / self.classes <= self.zeta <= 1.0):
            raise ConfigError(
                f"zeta must lie in [1/K, 1] = [{1.0 / self.classes:.4g}, 1], got {self.zeta}"
            )
        if self.alpha0 < 1.0:
            raise ConfigError(f"alpha0 must be >= 1, got {self.alpha0}")
        if any(order < 1 for order in self.bias_orders):
            raise ConfigError(f"bias_orders must be >= 1 per axis, got {self.bias_orders}")
        if self.bias_orders and len(self.bias_orders) != 3:
            raise ConfigError(f"bias_orders needs 3 entries, got {self.bias_orders}")
        lambdas = (
            self.lambda_zero,
            self.lambda_membrane,
            self.lambda_bending,
            self.lambda_mu,
            self.lambda_lame,
        )
        if any(value < 0 for value in lambdas):
            raise ConfigError("operator weights must be non-negative")
        if self.register_velocity and self.lambda_zero <= 0:
            raise ConfigError("lambda_zero must be > 0 when velocity registration is enabled")
        if self.shoot_steps < 1:
            raise ConfigError(f"shoot_steps must be >= 1, got {self.shoot_steps}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        for label, classes in self.class_sets().items():
            if not classes:
                raise ConfigError(f"label {label} maps to no class")
            bad = [c + 1 for c in classes if not 0 <= c < self.classes]
            if bad:
                raise ConfigError(f"label {label} maps to unknown classes {bad}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _load_json_profile(name: str) -> dict:
    """Load a profile JSON file by name. Raises FileNotFoundError if missing."""
    path = _PROFILES_DIR / f"{name}.json"
    if not path.exists():
        raise FileNotFoundError(
            f"Profile '{name}' not found at {path}. "
            f"Available profiles: {', '.join(sorted(p.stem for p in _PROFILES_DIR.glob('*.json')))}"
        )
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _merge_profiles(defaults: dict, overlay: dict) -> dict:
    """Merge overlay on top of defaults.

    - dict values: deep-merge (overlay wins on key conflicts)
    - other values, lists included: overlay replaces entirely
    """
    merged = dict(defaults)
    for key, value in overlay.items():
        default_val = merged.get(key)
        if isinstance(default_val, dict) and isinstance(value, dict):
            merged[key] = {**default_val, **value}
        else:
            merged[key] = value
    return merged


def _parse_label_map(text: str) -> dict[str, list[int]]:
    """Parse `1:1, 2:2+3` into {"1": [1], "2": [2, 3]}."""
    mapping: dict[str, list[int]] = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if ":" not in item:
            raise ConfigError(f"label_map entry '{item}' must look like label:class[+class...]")
        label, classes = item.split(":", 1)
        try:
            mapping[str(int(label))] = [int(c) for c in classes.split("+")]
        except ValueError:
            raise ConfigError(f"label_map entry '{item}' has non-integer ids") from None
    return mapping


def _coerce(key: str, raw: Any, default: Any) -> Any:
    """Convert a raw value (usually a string) to the type of the default."""
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, list):
            return [int(part) for part in text.split(",") if part.strip()]
        if isinstance(default, dict):
            return _parse_label_map(text)
    except ValueError:
        raise ConfigError(f"Invalid value for '{key}': {raw!r}") from None
    return text


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Read a flat `key = value` file (UTF-8, # comments)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def load_config(
    config_file: Optional[str | Path] = None,
    profile: Optional[str] = None,
    overrides: Optional[dict] = None,
) -> ModelConfig:
    """Resolve a ModelConfig: CLI overrides > config file > profile > defaults."""
    data = _load_json_profile("_defaults")
    if profile and profile != "_defaults":
        data = _merge_profiles(data, _load_json_profile(profile))

    layers = []
    if config_file is not None:
        layers.append(parse_config_file(config_file))
    if overrides:
        layers.append({k: v for k, v in overrides.items() if v is not None})

    valid = {f.name: f for f in dataclasses.fields(ModelConfig)}
    template = ModelConfig()
    for layer in layers:
        for key, raw in layer.items():
            if key not in valid:
                raise ConfigError(
                    f"Unknown config key '{key}'. Valid keys: {', '.join(sorted(valid))}"
                )
            data[key] = _coerce(key, raw, getattr(template, key))

    unknown = set(data) - set(valid)
    if unknown:
        raise ConfigError(f"Unknown keys in profile: {', '.join(sorted(unknown))}")

    config = ModelConfig(**data)
    logger.debug("Resolved config: %s", config.to_dict())
    return config.validate()
