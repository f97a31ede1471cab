"""Process configuration using Pydantic Settings."""

from functools import lru_cache

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Toolkit settings loaded from CATREID_* environment variables."""

    model_config = SettingsConfigDict(
        env_prefix="CATREID_",
        env_file=".env",
        case_sensitive=True,
        extra="ignore",
    )

    # Logging
    LOG_LEVEL: str = "INFO"
    PROGRESS_BARS: bool = True

    # Compute
    DEVICE: str = "auto"
    NUM_WORKERS: int = 0
    DETERMINISTIC: bool = False

    # Pretrained weights
    WEIGHTS_OFFLINE: bool = False

    # Preprocessing
    DETECTOR_TIMEOUT_SECONDS: float = 30.0
    PREPROCESS_WORKERS: int = 4

    # Defaults for the CLI
    DEFAULT_SEED: int = 0
    WORK_DIR: str = "work"


@lru_cache
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()


settings = get_settings()
