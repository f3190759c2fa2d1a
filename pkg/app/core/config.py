import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

from pydantic import Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.models.config import RunConfig
from app.utils.exceptions import ConfigurationException


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="RNSDE_",
        case_sensitive=False,
        extra="ignore"
    )

    # Application settings
    app_name: str = "RN-SDE Limited-Angle CT Toolkit"
    app_version: str = "1.0.0"
    debug: bool = False

    # Logging settings
    log_level: str = "INFO"
    log_json: bool = True

    # Worker settings
    threads: int = Field(default=os.cpu_count() or 1, ge=1)
    progress: bool = True

    # Storage settings
    data_dir: Path = Path("data")
    runs_dir: Path = Path("runs")

    @field_validator('log_level')
    @classmethod
    def validate_log_level(cls, v):
        level = str(v).upper()
        if level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"Unknown log level: {v}")
        return level

    @property
    def worker_count(self) -> int:
        """Upper bound for every thread pool in the toolkit"""
        return max(1, int(self.threads))


settings = Settings()


def _parse_override(raw: str):
    key, sep, value = raw.partition("=")
    if not sep or not key.strip():
        raise ConfigurationException(
            f"Override must look like a.b=value: {raw!r}", error_code="BAD_OVERRIDE", details={"override": raw}
        )
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return key.strip().split("."), parsed


def _apply_override(data: Dict[str, Any], path: List[str], value: Any, raw: str):
    node: Any = RunConfig().model_dump(mode="json")
    target = data
    for depth, part in enumerate(path):
        if not isinstance(node, dict) or part not in node:
            raise ConfigurationException(
                f"Unknown config key: {'.'.join(path)}",
                error_code="UNKNOWN_KEY",
                details={"override": raw, "key": ".".join(path[: depth + 1])},
            )
        node = node[part]
        if depth == len(path) - 1:
            target[part] = value
        else:
            target = target.setdefault(part, {})


def load_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """
    Defaults, then the JSON file, then dotted ``a.b=value`` overrides (values
    are parsed as JSON and fall back to plain strings).

    Raises:
        ConfigurationException: unreadable file, bad JSON, unknown key or failed validation
    """
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigurationException(
                f"Could not read config {path}",
                error_code="CONFIG_UNREADABLE",
                details={"path": str(path), "error": str(e)},
            )
        except json.JSONDecodeError as e:
            raise ConfigurationException(
                f"Config {path} is not valid JSON",
                error_code="CONFIG_JSON",
                details={"path": str(path), "error": str(e)},
            )
        if not isinstance(data, dict):
            raise ConfigurationException("Config root must be a JSON object", error_code="CONFIG_JSON")

    for raw in overrides:
        keys, value = _parse_override(raw)
        _apply_override(data, keys, value, raw)

    try:
        return RunConfig(**data)
    except ValidationError as e:
        raise ConfigurationException(
            "Invalid configuration",
            error_code="CONFIG_INVALID",
            details={"errors": json.loads(e.json(include_url=False))},
        )


def config_hash(config: RunConfig, input_paths: Iterable[Union[str, Path]] = ()) -> str:
    """sha256 over the canonical config JSON followed by the bytes of every input file"""
    digest = hashlib.sha256()
    digest.update(json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":")).encode("utf-8"))
    for item in sorted(str(p) for p in input_paths):
        with open(item, "rb") as handle:
            for block in iter(lambda: handle.read(1 << 20), b""):
                digest.update(block)
    return digest.hexdigest()
