"""
Run configuration
=================

Plain ``key = value`` text with ``#`` comments. Values are resolved as
defaults <- config file <- command-line overrides.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

from panofocus.featurizer import DEFAULT_GROUP_DISTANCE
from panofocus.focuser.core import FocuserConfig
from panofocus.prototyper.losses import DEFAULT_LAMBDA, DEFAULT_LAMBDA_REG
from panofocus.prototyper.model import PrototyperConfig

CONFIG_ENV = "PANOFOCUS_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    focuser: FocuserConfig = field(default_factory=FocuserConfig)
    prototyper: PrototyperConfig = field(default_factory=PrototyperConfig)
    lam: float = DEFAULT_LAMBDA
    lambda_reg: float = DEFAULT_LAMBDA_REG
    weight_seed: int = 0
    gumbel_seed: int = 0
    group_distance: float = DEFAULT_GROUP_DISTANCE
    patch_size: int = 16
    decision_threshold: float = 0.5
    iou_thresh: float = 0.3
    member_iou_thresh: float = 0.3
    frame_width: int = 3760
    frame_height: int = 480
    images_dir: Optional[str] = None

    def __post_init__(self):
        if self.lam < 0 or self.lambda_reg < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.group_distance <= 0:
            raise ConfigError("group_distance must be positive")
        if self.patch_size < 1:
            raise ConfigError("patch_size must be >= 1")
        for name in ("decision_threshold", "iou_thresh", "member_iou_thresh"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.frame_width <= 0 or self.frame_height <= 0:
            raise ConfigError("frame size must be positive")

    @property
    def class_counts(self) -> tuple[int, int, int]:
        p = self.prototyper
        return (p.n_ind, p.n_group, p.n_global)


# key -> (section, attribute, type); section None means a RunConfig field
_KEYS: dict[str, tuple[Optional[str], str, type]] = {
    "theta": ("focuser", "theta", float),
    "beta1": ("focuser", "beta1", float),
    "beta2": ("focuser", "beta2", float),
    "nms_iou": ("focuser", "nms_iou", float),
    "min_merge_count": ("focuser", "min_merge_count", int),
    "min_region_size": ("focuser", "min_region_size", float),
    "d": ("prototyper", "d", int),
    "heads": ("prototyper", "heads", int),
    "prototypes": ("prototyper", "prototypes", int),
    "m_max": ("prototyper", "m_max", int),
    "mlp_ratio": ("prototyper", "mlp_ratio", int),
    "n_individual_classes": ("prototyper", "n_ind", int),
    "n_group_classes": ("prototyper", "n_group", int),
    "n_global_classes": ("prototyper", "n_global", int),
    "init_std": ("prototyper", "init_std", float),
    "lambda": (None, "lam", float),
    "lambda_reg": (None, "lambda_reg", float),
    "weight_seed": (None, "weight_seed", int),
    "gumbel_seed": (None, "gumbel_seed", int),
    "group_distance": (None, "group_distance", float),
    "patch_size": (None, "patch_size", int),
    "decision_threshold": (None, "decision_threshold", float),
    "iou_thresh": (None, "iou_thresh", float),
    "member_iou_thresh": (None, "member_iou_thresh", float),
    "frame_width": (None, "frame_width", int),
    "frame_height": (None, "frame_height", int),
    "images_dir": (None, "images_dir", str),
}
CONFIG_KEYS = tuple(_KEYS)


def _coerce(key: str, raw: Any, where: str) -> Any:
    kind = _KEYS[key][2]
    if kind is str:
        return str(raw)
    if isinstance(raw, bool):
        raise ConfigError(f"{where}: {key} expects {kind.__name__}, got {raw!r}")
    try:
        if kind is int:
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError
            value = int(raw) if not isinstance(raw, str) else int(raw.strip())
        else:
            value = float(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: {key} expects {kind.__name__}, got {raw!r}") from None
    if kind is float and not math.isfinite(value):
        raise ConfigError(f"{where}: {key} must be finite")
    return value


def parse_config_text(text: str, where: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"{where}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, f"{where}:{lineno}")
    return values


def build_config(values: Mapping[str, Any]) -> RunConfig:
    sections: dict[Optional[str], dict[str, Any]] = {None: {}, "focuser": {}, "prototyper": {}}
    for key, value in values.items():
        if key not in _KEYS:
            raise ConfigError(f"unknown key {key!r}")
        section, attr, _ = _KEYS[key]
        sections[section][attr] = _coerce(key, value, "config")
    try:
        return RunConfig(
            focuser=FocuserConfig(**sections["focuser"]),
            prototyper=PrototyperConfig(**sections["prototyper"]),
            **sections[None],
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: Optional[str | os.PathLike] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Defaults, then the file at `path` (if any), then `overrides`."""
    values: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        values.update(parse_config_text(text, str(p)))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return build_config(values)


def dumps_config(cfg: RunConfig) -> str:
    lines = []
    for key, (section, attr, _) in _KEYS.items():
        obj = cfg if section is None else getattr(cfg, section)
        value = getattr(obj, attr)
        if value is not None:
            lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def replace(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **changes)
