"""Run-configuration files: loading, dotted overrides, and snapshots."""

import json
from pathlib import Path
from typing import Any

from pydantic import ValidationError as PydanticValidationError

from src.config import DEFAULT_CONFIG_NAME
from src.models import ConfigError, RunConfig


def load_run_config(
    config_path: str | None = None,
    overrides: list[str] | None = None,
) -> RunConfig:
    """
    Load a run configuration and apply dotted-path overrides.

    Args:
        config_path: Path to a JSON config file, or "default"/None for built-in
            defaults.
        overrides: List of "dotted.key=value" strings. Values are parsed as JSON and
            fall back to plain strings.

    Returns:
        The fully validated RunConfig.

    Raises:
        ConfigError: If the file is unreadable, a key is unknown, or a value fails
            validation.
    """
    if config_path is None or config_path == DEFAULT_CONFIG_NAME:
        tree = RunConfig().model_dump(mode="json")
    else:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {config_path}")
        try:
            with open(path, encoding="utf-8") as f:
                raw_tree = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Could not read config file {config_path}: {e}") from e
        # Fill defaults so partial files can still be overridden key by key
        tree = validate_config_tree(raw_tree).model_dump(mode="json")

    for override in overrides or []:
        key, value = parse_override(override)
        set_dotted(tree, key, value)

    return validate_config_tree(tree)


def validate_config_tree(tree: dict[str, Any]) -> RunConfig:
    """Validate a plain config tree, naming the first offending dotted key."""
    try:
        return RunConfig.model_validate(tree)
    except PydanticValidationError as e:
        first = e.errors()[0]
        dotted = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"Invalid config key '{dotted}': {first['msg']}") from e


def parse_override(override: str) -> tuple[str, Any]:
    """Split "key=value" and decode the value as JSON when possible."""
    if "=" not in override:
        raise ConfigError(f"Override must look like key=value. Got: {override}")
    key, raw = override.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def set_dotted(tree: dict[str, Any], dotted_key: str, value: Any) -> None:
    """Set a nested key, rejecting any path segment the tree does not define."""
    parts = dotted_key.split(".")
    node = tree
    for depth, part in enumerate(parts):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"Unknown config key '{'.'.join(parts[: depth + 1])}'")
        if depth == len(parts) - 1:
            node[part] = value
        else:
            node = node[part]


def write_config_snapshot(config: RunConfig, filepath: str | Path) -> None:
    """Write the resolved configuration that produced a run."""
    with open(filepath, "w", encoding="utf-8") as f:
        f.write(config.model_dump_json(indent=2))


def apply_overrides(config: RunConfig, overrides: list[str]) -> RunConfig:
    """Return a re-validated copy of `config` with "dotted.key=value" overrides."""
    tree = config.model_dump(mode="json")
    for override in overrides:
        key, value = parse_override(override)
        set_dotted(tree, key, value)
    return validate_config_tree(tree)
