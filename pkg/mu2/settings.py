from functools import lru_cache
from typing import Optional

from dotenv import load_dotenv
from pydantic import AliasChoices, Field
from pydantic_settings import BaseSettings, SettingsConfigDict

from .config import ROOT_DIR

_ENV_PATH = ROOT_DIR / ".env"
if _ENV_PATH.exists():
    load_dotenv(_ENV_PATH)


class EndpointSettings(BaseSettings):
    api_key: Optional[str] = Field(None, validation_alias=AliasChoices("MU2_API_KEY", "OPENAI_API_KEY"))
    base_url: Optional[str] = Field(None, validation_alias="MU2_BASE_URL")
    model: Optional[str] = Field(None, validation_alias="MU2_MODEL")

    model_config = SettingsConfigDict(case_sensitive=False, extra="ignore")


@lru_cache(maxsize=1)
def get_settings() -> EndpointSettings:
    return EndpointSettings()
