from pathlib import Path
from typing import Optional, Tuple, Type

from pydantic_settings import (
    BaseSettings,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
    TomlConfigSettingsSource,
)

from app.schemas import ExperimentConfig


class Settings(BaseSettings):
    # Seed override for every experiment run in this process
    SHORTFT_SEED: Optional[int] = None

    model_config = SettingsConfigDict(env_file=".env", case_sensitive=True, extra="ignore")


settings = Settings()


class _ConfigFile(BaseSettings):
    """Raw TOML sections; validated into ExperimentConfig afterwards"""

    model_config = SettingsConfigDict(extra="allow")

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: Type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        return (init_settings,)


def load_experiment_config(path: Optional[Path] = None, seed: Optional[int] = None) -> ExperimentConfig:
    """
    Load an experiment config file and apply seed overrides

    Precedence for the seed: explicit argument (CLI --seed), then
    SHORTFT_SEED, then [experiment] seed in the file.

    Args:
        path: TOML config file; defaults only when None
        seed: Explicit seed override

    Returns:
        Validated ExperimentConfig
    """
    data = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ValueError(f"Config file not found: {path}")
        data = TomlConfigSettingsSource(_ConfigFile, toml_file=path).toml_data

    config = ExperimentConfig.model_validate(data)

    override = seed if seed is not None else settings.SHORTFT_SEED
    if override is not None:
        config = config.model_copy(
            update={"experiment": config.experiment.model_copy(update={"seed": override})}
        )
    return config
