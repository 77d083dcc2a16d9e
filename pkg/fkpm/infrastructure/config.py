import os
from functools import lru_cache

from pydantic import BaseModel, Field


class Settings(BaseModel):
    threads: int = Field(1, ge=1, description="Worker cap for ensemble pools")
    database_url: str = "sqlite:///./fkpm.db"
    enumeration_cap: int = Field(10**7, ge=1, description="Max paths for exact enumeration")
    log_level: str = "INFO"
    cache_densities: bool = False

    @classmethod
    def from_env(cls) -> "Settings":
        env = {
            "threads": os.environ.get("FKPM_THREADS"),
            "database_url": os.environ.get("FKPM_DATABASE_URL"),
            "enumeration_cap": os.environ.get("FKPM_ENUMERATION_CAP"),
            "log_level": os.environ.get("FKPM_LOG_LEVEL"),
            "cache_densities": os.environ.get("FKPM_CACHE_DENSITIES"),
        }
        return cls(**{k: v for k, v in env.items() if v is not None})


@lru_cache
def get_settings() -> Settings:
    return Settings.from_env()
