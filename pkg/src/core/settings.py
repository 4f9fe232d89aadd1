"""Process-level runtime settings read from the environment."""

from typing import Literal

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class RuntimeSettings(BaseSettings):
    """Settings that never influence experiment artifacts.

    Read from ``TAL_*`` environment variables, e.g. ``TAL_LOG_LEVEL=DEBUG``.
    """

    model_config = SettingsConfigDict(env_prefix="TAL_", extra="ignore")

    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"
    log_file: str = "logs/tal.log"
    torch_threads: int = Field(default=1, ge=1)
