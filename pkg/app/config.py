"""
Timbre Engine Configuration Module.
Handles environment-based configuration with validation.
"""
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Optional, Type

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app import __version__
from app.exceptions import ConfigError
from app.models import (
    FeatureConfig,
    FeatureSet,
    LossWeights,
    NetworkConfig,
    NnlsConfig,
    TrainConfig,
)


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    model_config = SettingsConfigDict(
        env_prefix="TIMBRE_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )

    # Application
    app_name: str = "Timbre Style Transfer Engine"
    app_version: str = __version__
    debug: bool = False

    # Runtime
    cache_dir: Path = Path(".timbre_cache")
    jobs: int = 1
    deterministic: bool = True  # single-threaded torch for bitwise reruns

    # Signal chain
    sample_rate: int = 22050
    n_fft: int = 2048
    hop: int = 256
    n_mels: int = 256
    f_min: float = 0.0
    f_max: float = 11025.0
    gamma: float = 0.6
    eta: int = 15
    peak_level: float = 0.9
    style_dim: int = 8

    # Observability
    log_level: str = "INFO"
    log_json: bool = True
    metrics_enabled: bool = True
    metrics_textfile: Optional[Path] = None

    @field_validator("log_level", mode="before")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        if isinstance(v, str):
            return v.upper()
        return v

    @field_validator("jobs")
    @classmethod
    def validate_jobs(cls, v: int) -> int:
        if v < 1:
            raise ValueError("jobs must be at least 1")
        return v

    def feature_config(self) -> FeatureConfig:
        """Feature extraction parameters derived from the settings."""
        return FeatureConfig(
            sample_rate=self.sample_rate,
            n_fft=self.n_fft,
            hop=self.hop,
            n_mels=self.n_mels,
            f_min=self.f_min,
            f_max=self.f_max,
            gamma=self.gamma,
            eta=self.eta,
        )


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()


# ==================== Command configuration ====================

TRAIN_KEYS = (
    "lr", "weight_decay", "batch_size", "max_iters", "seed",
    "patch_frames", "checkpoint_every", "log_every",
)
WEIGHT_KEYS = ("lambda_c", "lambda_s", "lambda_r", "lambda_mfcc", "lambda_delta", "lambda_env")
NETWORK_KEYS = ("feature_set", "base_channels", "n_res", "style_dim", "mlp_dim")
NNLS_KEYS = {"nnls_max_iters": "max_iters", "nnls_tol": "tol"}


class CliConfig(BaseModel):
    """
    Overrides for training, network and NNLS parameters.
    Unset keys fall back to the defaults of the respective config model.
    """
    model_config = ConfigDict(extra="forbid")

    # Training
    lr: Optional[float] = None
    weight_decay: Optional[float] = None
    batch_size: Optional[int] = None
    max_iters: Optional[int] = None
    seed: Optional[int] = None
    patch_frames: Optional[int] = None
    checkpoint_every: Optional[int] = None
    log_every: Optional[int] = None

    # Loss weights
    lambda_c: Optional[float] = None
    lambda_s: Optional[float] = None
    lambda_r: Optional[float] = None
    lambda_mfcc: Optional[float] = None
    lambda_delta: Optional[float] = None
    lambda_env: Optional[float] = None

    # Network
    feature_set: Optional[FeatureSet] = None
    base_channels: Optional[int] = None
    n_res: Optional[int] = None
    style_dim: Optional[int] = None
    mlp_dim: Optional[int] = None

    # Reconstruction
    nnls_max_iters: Optional[int] = None
    nnls_tol: Optional[float] = None

    @classmethod
    def from_mapping(cls, values: Dict[str, Any]) -> "CliConfig":
        unknown = sorted(set(values) - set(cls.model_fields))
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}", keys=unknown)
        try:
            return cls(**values)
        except ValidationError as e:
            raise ConfigError(f"invalid configuration: {e.errors()[0]['msg']}") from e

    @classmethod
    def from_file(cls, path: Path) -> "CliConfig":
        """Parse `key = value` lines; '#' starts a comment."""
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}", path=str(path)) from e
        values: Dict[str, str] = {}
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{number}: expected 'key = value'", line=number)
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
        return cls.from_mapping(values)

    def merged(self, overrides: Dict[str, Any]) -> "CliConfig":
        """Copy with every non-None override applied (flags win over the file)."""
        values = self.model_dump(exclude_none=True)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return self.from_mapping(values)

    def _pick(self, keys) -> Dict[str, Any]:
        return {k: getattr(self, k) for k in keys if getattr(self, k) is not None}

    def _build(self, model: Type[BaseModel], values: Dict[str, Any]) -> Any:
        try:
            return model(**values)
        except ValidationError as e:
            raise ConfigError(f"invalid {model.__name__}: {e.errors()[0]['msg']}") from e

    def train_config(self) -> TrainConfig:
        values = self._pick(TRAIN_KEYS)
        values["weights"] = self._build(LossWeights, self._pick(WEIGHT_KEYS))
        return self._build(TrainConfig, values)

    def network_config(self, default_style_dim: int = 8) -> NetworkConfig:
        values = {"style_dim": default_style_dim, **self._pick(NETWORK_KEYS)}
        return self._build(NetworkConfig, values)

    def nnls_config(self) -> NnlsConfig:
        values = {field: getattr(self, key) for key, field in NNLS_KEYS.items() if getattr(self, key) is not None}
        return self._build(NnlsConfig, values)
