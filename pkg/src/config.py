import logging
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import ArtifactNotFoundError, ConfigError
from schedules import ModelKind, NoiseSchedule, build_schedule
from utils.helper import sha256_hex

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent.parent / "config" / "config.yaml"

RESULT_SECTIONS = ("data", "model", "schedule", "train", "sampler", "attack", "ode", "report")

# Config sections each artifact kind depends on; its fingerprint covers exactly these.
_TRAINED = ("data", "model", "schedule", "train")
STAGE_SECTIONS = {
    "dataset": ("data",),
    "checkpoint": _TRAINED,
    "loss_history": _TRAINED,
    "loss_scores": (*_TRAINED, "attack"),
    "loss_profile": (*_TRAINED, "attack"),
    "likelihood_scores": (*_TRAINED, "ode"),
    "samples": (*_TRAINED, "sampler"),
    "quality": (*_TRAINED, "sampler"),
    "roc": RESULT_SECTIONS,
    "tpr_vs_step": RESULT_SECTIONS,
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Section):
    generator: Literal["ring8", "moons", "spiral", "gauss_grid"] = "ring8"
    n_members: int = Field(64, ge=1)
    n_nonmembers: int = Field(64, ge=1)
    seed: int = 0


class ModelConfig(_Section):
    kind: ModelKind = ModelKind.DDPM
    hidden_dims: list[int] = Field(default_factory=lambda: [128, 128, 128, 128], min_length=1)
    time_embed_width: int = Field(16, ge=2)
    min_frequency: float = Field(0.25, gt=0)
    max_frequency: float = Field(32.0, gt=0)
    seed: int = 7

    @field_validator("time_embed_width")
    @classmethod
    def _even_width(cls, value: int) -> int:
        if value % 2:
            raise ValueError("time_embed_width must be even")
        return value


class ScheduleConfig(_Section):
    num_steps: int = Field(1000, ge=1)
    beta_min: float = Field(0.1, gt=0)
    beta_max: float = Field(20.0, gt=0)
    sigma_min: float = Field(0.01, gt=0)
    sigma_max: float = Field(50.0, gt=0)


class DpConfig(_Section):
    enabled: bool = False
    clip_bound: float = Field(1.0, gt=0)
    noise_multiplier: float = Field(1.0, ge=0)
    delta: float = Field(5e-4, gt=0, lt=1)


class TrainConfig(_Section):
    steps: int = Field(20000, ge=1)
    batch_size: int = Field(64, ge=1)
    learning_rate: float = Field(1e-3, ge=0)
    seed: int = 0
    log_every: int = Field(100, ge=1)
    dp: DpConfig = Field(default_factory=DpConfig)


class SamplerConfig(_Section):
    n_samples: int = Field(1000, ge=0)
    seed: int = 0
    langevin_inner_steps: int = Field(20, ge=1)
    langevin_step_scale: float = Field(2e-5, gt=0)
    sde_steps: int = Field(1000, ge=1)


class AttackConfig(_Section):
    k_draws: int = Field(5, ge=1)
    seed: int = 0
    step_mode: Literal["grid", "random"] = "grid"
    n_continuous_steps: int = Field(1000, ge=1)
    discrete_stride: int = Field(1, ge=1)


class OdeConfig(_Section):
    rtol: float = Field(1e-5, gt=0)
    atol: float = Field(1e-5, gt=0)
    n_probes: int = Field(8, ge=1)
    probe_dist: Literal["rademacher", "gaussian"] = "rademacher"
    seed: int = 0
    max_steps: int = Field(20000, ge=1)


class ReportConfig(_Section):
    fpr_levels: list[float] = Field(default_factory=lambda: [0.1, 0.01, 0.001, 0.0001])
    discrete_steps: list[int] = Field(default_factory=lambda: [0, 200, 500, 600, 700, 800, 900, 999])
    continuous_times: list[float] = Field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])

    @field_validator("fpr_levels")
    @classmethod
    def _probabilities(cls, value: list[float]) -> list[float]:
        if any(not 0 <= level <= 1 for level in value):
            raise ValueError("fpr levels must lie in [0, 1]")
        return value


class RuntimeConfig(_Section):
    threads: int = Field(1, ge=1)
    show_progress: bool = True


class RunConfig(_Section):
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    attack: AttackConfig = Field(default_factory=AttackConfig)
    ode: OdeConfig = Field(default_factory=OdeConfig)
    report: ReportConfig = Field(default_factory=ReportConfig)
    runtime: RuntimeConfig = Field(default_factory=RuntimeConfig)

    @model_validator(mode="after")
    def _ddpm_betas_below_one(self) -> "RunConfig":
        # DDPM betas run up to beta_max / num_steps
        if self.model.kind == ModelKind.DDPM and self.schedule.beta_max >= self.schedule.num_steps:
            raise ValueError(
                f"ddpm needs schedule.beta_max ({self.schedule.beta_max}) below schedule.num_steps "
                f"({self.schedule.num_steps}) so every beta stays in (0, 1)"
            )
        return self

    def build_schedule(self) -> NoiseSchedule:
        return build_schedule(self.model.kind, **self.schedule.model_dump())

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True)

    def fingerprint(self, sections: tuple[str, ...] | None = None) -> str:
        """SHA-256 over the given sections, by default every section that influences results."""
        sections = sections or RESULT_SECTIONS
        payload = self.model_dump(mode="json", include=set(sections))
        return sha256_hex(yaml.safe_dump(payload, sort_keys=True))[:16]

    def stage_fingerprint(self, kind: str) -> str:
        return self.fingerprint(STAGE_SECTIONS[kind])


def load_config(config_path: str | Path = DEFAULT_CONFIG_PATH) -> dict:
    """
    Load and parse the run configuration from the YAML file.
    """
    config_path = Path(config_path)
    logger.info(f"Loading configuration from {config_path}")

    try:
        with open(config_path, "r") as config_file:
            config = yaml.safe_load(config_file) or {}
            logger.debug(f"Successfully loaded configuration: {config}")
            return config
    except FileNotFoundError:
        logger.error(f"Configuration file not found at {config_path}")
        raise ArtifactNotFoundError(f"configuration file not found: {config_path}") from None
    except yaml.YAMLError as e:
        logger.error(f"Error parsing YAML configuration: {str(e)}")
        raise ConfigError(f"cannot parse {config_path}: {e}") from e


def apply_override(raw: dict, dotted_key: str, value) -> None:
    """Set raw[a][b] = value for dotted_key "a.b", creating sections as needed."""
    *sections, leaf = dotted_key.split(".")
    node = raw
    for section in sections:
        child = node.setdefault(section, {})
        if not isinstance(child, dict):
            raise ConfigError(f"override {dotted_key}: {section} is not a section")
        node = child
    node[leaf] = value


def parse_override(assignment: str) -> tuple[str, object]:
    """Split "section.key=value", typing the value with YAML scalar rules."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form section.key=value")
    key, text = assignment.split("=", 1)
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"override {assignment!r}: {e}") from e
    return key.strip(), value


def resolve_config(
    config_path: str | Path | None = None,
    overrides: list[str] | tuple[str, ...] = (),
    flags: dict | None = None,
) -> RunConfig:
    """File < --set overrides < explicit flags, validated into a RunConfig."""
    raw = load_config(config_path or DEFAULT_CONFIG_PATH)
    for assignment in overrides:
        apply_override(raw, *parse_override(assignment))
    for dotted_key, value in (flags or {}).items():
        if value is not None:
            apply_override(raw, dotted_key, value)
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"]) or "config"
        raise ConfigError(f"{location}: {first['msg']} ({e.error_count()} error(s))") from e
