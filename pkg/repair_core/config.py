import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict

from dotenv import load_dotenv

from .errors import InvalidFlag, parse_bool, parse_positive_int

DEFAULT_SEED = 123
DEFAULT_MISSING_TOKEN = "-"

LOG_FORMAT = "[SageRepair] %(levelname)s %(message)s"


@dataclass
class Settings:
    seed: int = DEFAULT_SEED
    missing_token: str = DEFAULT_MISSING_TOKEN
    deterministic: bool = True
    workers: int = 1
    log_level: str = "INFO"
    metrics_file: str | None = None


def load_settings(env_file: str | os.PathLike | None = None) -> Settings:
    # .env is optional; real environment variables win
    load_dotenv(env_file, override=False)
    try:
        seed = int(os.getenv("SAGEREPAIR_SEED", DEFAULT_SEED))
    except ValueError:
        raise InvalidFlag("SAGEREPAIR_SEED must be an integer")
    return Settings(
        seed=seed,
        missing_token=os.getenv("SAGEREPAIR_MISSING_TOKEN", DEFAULT_MISSING_TOKEN),
        deterministic=parse_bool(os.getenv("SAGEREPAIR_DETERMINISTIC", "true"), "SAGEREPAIR_DETERMINISTIC"),
        workers=parse_positive_int(os.getenv("SAGEREPAIR_WORKERS", 1), "SAGEREPAIR_WORKERS"),
        log_level=os.getenv("SAGEREPAIR_LOG_LEVEL", "INFO").upper(),
        metrics_file=os.getenv("SAGEREPAIR_METRICS_FILE") or None,
    )


def configure_logging(level: str = "INFO") -> None:
    root = logging.getLogger("repair_core")
    if not any(getattr(h, "_sagerepair", False) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._sagerepair = True
        root.addHandler(handler)
    root.setLevel(getattr(logging, level, logging.INFO))


@dataclass
class CliConfig:
    """Merged view: env settings < JSON config file < explicit flags."""

    settings: Settings
    model: Dict[str, Any] = field(default_factory=dict)
    train: Dict[str, Any] = field(default_factory=dict)
    search: Dict[str, Any] = field(default_factory=dict)
    paths: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def build(cls, settings: Settings, config_path: str | None = None, **overrides: Dict[str, Any]) -> "CliConfig":
        data: Dict[str, Any] = {}
        if config_path:
            data = read_json_file(config_path)
            if not isinstance(data, dict):
                raise InvalidFlag("--config must hold a JSON object")
        cfg = cls(
            settings=settings,
            model=dict(data.get("model") or {}),
            train=dict(data.get("train") or {}),
            search=dict(data.get("search") or {}),
            paths=dict(data.get("paths") or {}),
        )
        for section, values in overrides.items():
            target = getattr(cfg, section)
            target.update({k: v for k, v in values.items() if v is not None})
        return cfg

    def path(self, key: str, given: str | os.PathLike | None = None) -> str | None:
        """A path flag wins over the `paths` section of --config."""
        value = given if given is not None else self.paths.get(key)
        return os.fspath(value) if value is not None else None


def read_json_file(path: str | os.PathLike) -> Any:
    p = Path(path)
    if not p.exists():
        raise InvalidFlag(f"file not found: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise InvalidFlag(f"{p} is not valid JSON: {e}")
