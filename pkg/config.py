# config.py
import hashlib
import json
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
from pathlib import Path
from typing import Any, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from errors import ConfigParseError


class Settings(BaseSettings):
    endpoint: Optional[str] = None
    model_name: str = "external-llm"
    log_level: str = "INFO"
    log_file: Optional[str] = None

    model_config = SettingsConfigDict(
        env_prefix="HOLMES_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    mag: float = Field(0.1, ge=0.0)
    triplet: float = Field(0.1, ge=0.0)
    kl: float = Field(0.1, ge=0.0)
    abn: float = Field(1.0, ge=0.0)


class PipelineConfig(BaseModel):
    """Every tunable of the pipeline. Defaults follow the published setup where one exists."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    # pseudo labels
    alpha: float = Field(0.9, gt=0.0, le=1.0)
    smoothing_ratio: float = Field(0.1, gt=0.0)
    sigma_mode: Literal["relative", "absolute"] = "relative"

    # sampler
    theta: float = Field(0.8, gt=0.0, lt=1.0)
    fallback_frames: int = Field(8, gt=0)
    max_frames: Optional[int] = Field(None, gt=0)

    # scorer and training
    learning_rate: float = Field(1e-4, gt=0.0)
    epochs: int = Field(30, gt=0)
    topk_ratio: float = Field(0.1, gt=0.0, le=1.0)
    local_window: int = Field(9, gt=0)
    memory_slots: int = Field(8, gt=0)
    hidden_dim: int = Field(32, gt=0)
    grad_clip: float = Field(10.0, gt=0.0)
    weights: LossWeights = LossWeights()
    rng_seed: int = Field(0, ge=0)

    # event proposals
    proposal_levels: Tuple[float, ...] = (0.5, 0.7, 0.9)
    proposal_pad: int = Field(2, ge=0)
    normal_proposal_count: int = Field(3, ge=0)
    normal_length_range: Tuple[int, int] = (16, 64)

    @model_validator(mode="after")
    def _check_ranges(self):
        if not self.proposal_levels or any(not 0.0 < lv <= 1.0 for lv in self.proposal_levels):
            raise ValueError("proposal_levels must be a nonempty list of values in (0, 1]")
        low, high = self.normal_length_range
        if low < 1 or high < low:
            raise ValueError("normal_length_range must satisfy 1 <= min <= max")
        return self


class ClientConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    endpoint: Optional[str] = None
    timeout: float = Field(30.0, gt=0.0)
    max_in_flight: int = Field(4, gt=0)
    retries: int = Field(2, ge=0)
    mode: Literal["live", "mock"] = "mock"
    mock_seed: int = Field(0, ge=0)
    max_tokens: int = Field(256, gt=0)
    model_name: str = "mock-echo"

    @model_validator(mode="after")
    def _check_endpoint(self):
        if self.mode == "live":
            if not self.endpoint or not self.endpoint.startswith(("http://", "https://")):
                raise ValueError(f"live mode requires a well-formed http(s) endpoint, got {self.endpoint!r}")
        return self


def config_hash(cfg: BaseModel) -> str:
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _read_mapping(path: Path) -> dict[str, Any]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigParseError(f"cannot read config {path}: {e}") from e
    try:
        if path.suffix.lower() == ".toml":
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigParseError(f"cannot parse config {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigParseError(f"config {path} must hold a table/object at top level")
    return data


def load_config(
    path: Optional[str | Path] = None,
    overrides: Optional[dict[str, Any]] = None,
) -> Tuple[PipelineConfig, ClientConfig]:
    """Resolve pipeline and client configuration.

    Precedence, lowest first: defaults, settings from the environment,
    the config file (pipeline keys at top level, client keys under `client`),
    then `overrides` (CLI flags). Keys prefixed `client.` in overrides
    target the client section.
    """
    data: dict[str, Any] = _read_mapping(Path(path)) if path else {}
    client_data = dict(data.pop("client", {}) or {})
    if settings.endpoint and "endpoint" not in client_data:
        client_data["endpoint"] = settings.endpoint

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key.startswith("client."):
            client_data[key.split(".", 1)[1]] = value
        else:
            data[key] = value

    try:
        pipeline = PipelineConfig.model_validate(data)
        client = ClientConfig.model_validate(client_data)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or "<root>"
        raise ConfigParseError(f"invalid config value for '{where}': {first['msg']}") from e
    return pipeline, client


settings = Settings()
