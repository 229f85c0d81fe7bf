import logging
from typing import Optional

import structlog
from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

__version__ = "0.3.0"


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="BIOSLIM_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    counter_root: str = Field(default="/sys/class/powercap")
    energy_sample_period_s: float = Field(default=0.1, gt=0)

    log_level: str = Field(default="INFO")
    log_file: Optional[str] = Field(default=None)

    tool_version: str = Field(default=__version__)

    @field_validator("log_level")
    @classmethod
    def _known_level(cls, value: str) -> str:
        value = value.upper()
        if not isinstance(logging.getLevelName(value), int):
            raise ValueError(f"unknown log level {value}")
        return value


def setup_logging(level: str = "INFO", log_file: Optional[str] = None):
    log_level = getattr(logging, level.upper())

    handlers = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=log_level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )

    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    logging.getLogger("numexpr").setLevel(logging.WARNING)

    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_log_level,
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.processors.KeyValueRenderer(key_order=["event"], sort_keys=True),
        ],
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )

    return structlog.get_logger("bioslim")


settings = Settings()
logger = setup_logging(settings.log_level, settings.log_file)
