import json
from pathlib import Path
from typing import Any, Optional, Union

import yaml
from loguru import logger
from pydantic import ValidationError

from .errors import ConfigValidationError, ConfigurationError
from .models import EngineConfig, EngineMode, NormalizationBounds

MODE_ALIASES = {"ar": EngineMode.AUTOREGRESSIVE}


def _dotted(loc: tuple) -> str:
    return ".".join(str(part) for part in loc)


def config_from_dict(data: Optional[dict]) -> EngineConfig:
    """Validate a raw mapping into an EngineConfig.

    Every rejected value is reported by its dotted key so a sweep script can
    point at the exact line of the config file.
    """
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigValidationError("config root must be a mapping", keys=["<root>"])
    # editor annotations, not engine settings
    data = {k: v for k, v in data.items() if k != "_meta"}
    try:
        return EngineConfig.model_validate(data)
    except ValidationError as e:
        keys = sorted({_dotted(err["loc"]) or "<root>" for err in e.errors()})
        details = "; ".join(f"{_dotted(err['loc']) or '<root>'}: {err['msg']}" for err in e.errors())
        raise ConfigValidationError(f"invalid configuration ({', '.join(keys)}): {details}", keys=keys) from None


def load_config(path: Optional[Union[str, Path]] = None) -> EngineConfig:
    if path is None:
        logger.debug("no config file given, using defaults")
        return EngineConfig()
    path = Path(path)
    with open(path) as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigValidationError(f"{path}: not valid YAML/JSON: {e}", keys=["<root>"]) from None
    config = config_from_dict(data)
    logger.debug(f"loaded config from {path}")
    return config


def parse_mode(value: Union[str, EngineMode]) -> EngineMode:
    if isinstance(value, EngineMode):
        return value
    if value in MODE_ALIASES:
        return MODE_ALIASES[value]
    try:
        return EngineMode(value)
    except ValueError:
        raise ConfigValidationError(f"unknown mode {value!r}", keys=["mode"]) from None


def apply_overrides(config: EngineConfig, **overrides: Any) -> EngineConfig:
    """Return a revalidated copy with CLI overrides applied.

    Keys are dotted paths (``eval.jobs``); ``None`` values are ignored.
    """
    data = config.model_dump(mode="json")
    for dotted, value in overrides.items():
        if value is None:
            continue
        if dotted == "mode":
            value = parse_mode(value).value
        node = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node[part]
        node[parts[-1]] = value
    return config_from_dict(data)


def dump_config(config: EngineConfig) -> str:
    return json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def load_norm_bounds(path: Union[str, Path]) -> dict[str, NormalizationBounds]:
    path = Path(path)
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}: malformed bounds file: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: bounds file must be an object keyed by suite name")
    try:
        return {suite: NormalizationBounds.model_validate(values) for suite, values in raw.items()}
    except ValidationError as e:
        raise ConfigurationError(f"{path}: invalid bounds entry: {e}") from None


def write_norm_bounds(bounds: dict[str, NormalizationBounds], path: Union[str, Path]) -> None:
    payload = {suite: b.model_dump() for suite, b in sorted(bounds.items())}
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")


def resolve_metric_bounds(config: EngineConfig, base_dir: Optional[Path] = None) -> NormalizationBounds:
    """Pick the normalization bounds the metric runs with.

    A configured bounds file wins over the inline ``metric.bounds``; relative
    paths resolve against ``base_dir`` (the config file's directory).
    """
    if config.metric.bounds_file is None:
        return config.metric.bounds
    path = Path(config.metric.bounds_file)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    table = load_norm_bounds(path)
    if config.metric.suite not in table:
        raise ConfigurationError(
            f"suite {config.metric.suite!r} not found in {path} (have: {', '.join(sorted(table))})"
        )
    return table[config.metric.suite]
