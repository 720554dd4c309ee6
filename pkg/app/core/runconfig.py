"""Loads a RunConfig from a sectioned INI file plus ``section.key=value`` overrides.

Precedence: model defaults < file < overrides. Values are parsed as JSON when they
parse (numbers, booleans, lists) and kept as plain strings otherwise, so schedules
such as ``0:1e-3, 60%:1e-4`` need no quoting.
"""
import configparser
import json
from pathlib import Path
from typing import Any, Iterable, Optional

from pydantic import ValidationError

from app.core.errors import ConfigurationError, MissingArtifactError
from app.schemas.config import RunConfig
from app.utils.logger import logger


def parse_value(raw: str) -> Any:
    text = raw.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_sections(path) -> dict[str, dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"Config file not found: {path}", path=path)
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigurationError(f"Cannot parse {path}: {e}")
    return {section: {key: parse_value(value) for key, value in parser.items(section)} for section in parser.sections()}


def parse_override(text: str) -> tuple[str, str, Any]:
    name, sep, value = text.partition("=")
    section, dot, key = name.strip().partition(".")
    if not sep or not dot or not section or not key:
        raise ConfigurationError(f"Override must look like section.key=value, got {text!r}")
    return section, key, parse_value(value)


def load_run_config(
    path: Optional[Path] = None,
    overrides: Iterable[str] = (),
    work_dir: Optional[Path] = None,
) -> RunConfig:
    sections = read_sections(path) if path else {}
    for section, key, value in (parse_override(item) for item in overrides):
        sections.setdefault(section, {})[key] = value
    if work_dir is not None:
        sections.setdefault("paths", {})["work_dir"] = str(work_dir)
    try:
        config = RunConfig(**sections)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid configuration: {e}")
    logger.debug(f"Loaded run config {config.content_hash()[:12]} from {path or 'defaults'}")
    return config


def override_config(config: RunConfig, assignments: dict[str, Any]) -> RunConfig:
    """Copy of ``config`` with ``{"section.key": value}`` assignments applied and revalidated."""
    sections = config.model_dump(mode="json", by_alias=True)
    for name, value in assignments.items():
        section, _, key = name.partition(".")
        if section not in sections or not key:
            raise ConfigurationError(f"Unknown setting {name!r}")
        sections[section][key] = value
    try:
        return RunConfig(**sections)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid configuration: {e}")
