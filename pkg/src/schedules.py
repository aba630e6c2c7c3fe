"""Noise schedules for the four model kinds and their forward marginals."""

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch

from autodiff import DTYPE, as_tensor
from errors import ConfigError, KindError, RangeError, ShapeError

# Continuous-time evaluations never go below this (the t -> 0 integrand is singular).
TIME_CUTOFF = 1e-5


class ModelKind(str, Enum):
    DDPM = "ddpm"
    SMLD = "smld"
    VPSDE = "vpsde"
    VESDE = "vesde"

    @property
    def is_discrete(self) -> bool:
        return self in (ModelKind.DDPM, ModelKind.SMLD)


@dataclass(frozen=True)
class MarginalStats:
    mean_coef: float
    std: float


def per_sample_coef(coef: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Reshape a per-sample coefficient of shape t.shape so it scales rows of x."""
    if coef.dim() == 0:
        return coef
    return coef.reshape(tuple(coef.shape) + (1,) * (x.dim() - coef.dim()))


class NoiseSchedule(ABC):
    kind: ModelKind

    @property
    def is_discrete(self) -> bool:
        return self.kind.is_discrete

    @abstractmethod
    def marginal_coefficients(self, t) -> tuple[torch.Tensor, torch.Tensor]:
        """(mean_coef, std) as tensors shaped like t."""

    @abstractmethod
    def network_time(self, t) -> torch.Tensor:
        """Time input in [0, 1] that the score network is conditioned on."""

    @abstractmethod
    def sample_time(self, n: int, generator: torch.Generator) -> torch.Tensor:
        """Training-time draw of n diffusion steps/times."""

    @property
    @abstractmethod
    def prior_std(self) -> float:
        """Standard deviation of the isotropic Gaussian prior."""

    @abstractmethod
    def to_params(self) -> dict:
        """Parameters that rebuild this schedule through `build_schedule`."""

    def marginal_stats(self, t) -> MarginalStats:
        mean, std = self.marginal_coefficients(t)
        if mean.dim() != 0:
            raise RangeError("marginal_stats takes a single step or time")
        return MarginalStats(mean_coef=float(mean), std=float(std))

    def std(self, t) -> torch.Tensor:
        return self.marginal_coefficients(t)[1]


class DiscreteSchedule(NoiseSchedule):
    """DDPM variance schedule (β_t, α_t, ᾱ_t) or SMLD noise levels σ_t, t = 0..T-1.

    SMLD levels are stored max-first: σ_0 = σ_max down to σ_{T-1} = σ_min.
    """

    def __init__(self, kind: ModelKind, betas=None, sigmas=None):
        self.kind = ModelKind(kind)
        if self.kind == ModelKind.DDPM:
            betas = np.asarray(betas, dtype=np.float64)
            if betas.ndim != 1 or betas.size == 0:
                raise ConfigError("DDPM schedule needs a non-empty 1-D beta array")
            if not np.all((betas > 0) & (betas < 1)):
                raise ConfigError("DDPM betas must lie in (0, 1)")
            self.betas = betas
            self.alphas = 1.0 - betas
            self.alphabars = np.cumprod(self.alphas)
            self.sigmas = None
            mean = np.sqrt(self.alphabars)
            std = np.sqrt(1.0 - self.alphabars)
        elif self.kind == ModelKind.SMLD:
            sigmas = np.asarray(sigmas, dtype=np.float64)
            if sigmas.ndim != 1 or sigmas.size == 0:
                raise ConfigError("SMLD schedule needs a non-empty 1-D sigma array")
            if not np.all(sigmas > 0) or not np.all(np.diff(sigmas) < 0):
                raise ConfigError("SMLD sigmas must be positive and strictly decreasing")
            self.betas = self.alphas = self.alphabars = None
            self.sigmas = sigmas
            mean = np.ones_like(sigmas)
            std = sigmas
        else:
            raise KindError(f"{self.kind.value} is a continuous model kind")
        self.num_steps = int(self.alphas.size if self.kind == ModelKind.DDPM else self.sigmas.size)
        self._mean = torch.from_numpy(mean.copy())
        self._std = torch.from_numpy(std.copy())

    @classmethod
    def ddpm(cls, num_steps: int = 1000, beta_min: float = 0.1, beta_max: float = 20.0) -> "DiscreteSchedule":
        """Linear betas from beta_min/T to beta_max/T, the discretization of VP(beta_min, beta_max)."""
        return cls(ModelKind.DDPM, betas=np.linspace(beta_min / num_steps, beta_max / num_steps, num_steps))

    @classmethod
    def smld(cls, num_steps: int = 1000, sigma_min: float = 0.01, sigma_max: float = 50.0) -> "DiscreteSchedule":
        return cls(ModelKind.SMLD, sigmas=np.geomspace(sigma_max, sigma_min, num_steps))

    def _steps(self, t) -> torch.Tensor:
        t = torch.as_tensor(t)
        if t.is_floating_point():
            if not torch.all(t == torch.round(t)):
                raise RangeError(f"discrete step must be an integer, got {t.tolist()}")
            t = t.long()
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= self.num_steps):
            raise RangeError(f"step {t.tolist()} outside 0..{self.num_steps - 1}")
        return t

    def marginal_coefficients(self, t) -> tuple[torch.Tensor, torch.Tensor]:
        t = self._steps(t)
        return self._mean[t], self._std[t]

    def network_time(self, t) -> torch.Tensor:
        return as_tensor(t) / self.num_steps

    def sample_time(self, n: int, generator: torch.Generator) -> torch.Tensor:
        return torch.randint(0, self.num_steps, (n,), generator=generator)

    @property
    def prior_std(self) -> float:
        return 1.0 if self.kind == ModelKind.DDPM else float(self.sigmas[0])

    def to_continuous_time(self, t):
        """Continuous time of the counterpart SDE whose marginal matches step t."""
        t = as_tensor(t)
        if self.kind == ModelKind.DDPM:
            return (t + 1.0) / self.num_steps
        if self.num_steps == 1:
            return torch.ones_like(t)
        return torch.clamp(1.0 - t / (self.num_steps - 1), min=TIME_CUTOFF)

    def from_continuous_time(self, s):
        """Fractional step index matching continuous time s (inverse of `to_continuous_time`)."""
        s = as_tensor(s)
        if self.kind == ModelKind.DDPM:
            t = s * self.num_steps - 1.0
        else:
            t = (1.0 - s) * (self.num_steps - 1)
        return torch.clamp(t, 0.0, self.num_steps - 1.0)

    def continuous_counterpart(self) -> "ContinuousSchedule":
        if self.kind == ModelKind.DDPM:
            return ContinuousSchedule(
                ModelKind.VPSDE,
                beta_min=float(self.betas[0] * self.num_steps),
                beta_max=float(self.betas[-1] * self.num_steps),
                origin=self,
            )
        return ContinuousSchedule(
            ModelKind.VESDE, sigma_min=float(self.sigmas[-1]), sigma_max=float(self.sigmas[0]), origin=self
        )

    def to_params(self) -> dict:
        if self.kind == ModelKind.DDPM:
            return {
                "kind": self.kind.value,
                "num_steps": self.num_steps,
                "beta_min": float(self.betas[0] * self.num_steps),
                "beta_max": float(self.betas[-1] * self.num_steps),
            }
        return {
            "kind": self.kind.value,
            "num_steps": self.num_steps,
            "sigma_min": float(self.sigmas[-1]),
            "sigma_max": float(self.sigmas[0]),
        }


class ContinuousSchedule(NoiseSchedule):
    """VP (linear β(t)) or VE (geometric σ(t)) SDE on the horizon [0, 1].

    `origin` is set when the schedule stands in for a discrete one; the network
    is then conditioned on the matching discrete step.
    """

    horizon = 1.0

    def __init__(
        self,
        kind: ModelKind,
        beta_min: float = 0.1,
        beta_max: float = 20.0,
        sigma_min: float = 0.01,
        sigma_max: float = 50.0,
        origin: DiscreteSchedule | None = None,
    ):
        self.kind = ModelKind(kind)
        if self.kind == ModelKind.VPSDE:
            if not 0 < beta_min < beta_max:
                raise ConfigError(f"VP schedule needs 0 < beta_min < beta_max, got {beta_min}, {beta_max}")
        elif self.kind == ModelKind.VESDE:
            if not 0 < sigma_min < sigma_max:
                raise ConfigError(f"VE schedule needs 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
        else:
            raise KindError(f"{self.kind.value} is a discrete model kind")
        self.beta_min = float(beta_min)
        self.beta_max = float(beta_max)
        self.sigma_min = float(sigma_min)
        self.sigma_max = float(sigma_max)
        self.origin = origin

    def _times(self, t) -> torch.Tensor:
        t = as_tensor(t)
        if t.numel() and (float(t.min()) <= 0.0 or float(t.max()) > self.horizon):
            raise RangeError(f"time {t.tolist()} outside (0, {self.horizon}]")
        return t

    def beta(self, t) -> torch.Tensor:
        return self.beta_min + as_tensor(t) * (self.beta_max - self.beta_min)

    def sigma(self, t) -> torch.Tensor:
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** as_tensor(t)

    def marginal_coefficients(self, t) -> tuple[torch.Tensor, torch.Tensor]:
        t = self._times(t)
        if self.kind == ModelKind.VPSDE:
            log_mean = -0.25 * t**2 * (self.beta_max - self.beta_min) - 0.5 * t * self.beta_min
            return torch.exp(log_mean), torch.sqrt(-torch.expm1(2.0 * log_mean))
        return torch.ones_like(t), self.sigma(t)

    def diffusion(self, t) -> torch.Tensor:
        t = self._times(t)
        if self.kind == ModelKind.VPSDE:
            return torch.sqrt(self.beta(t))
        return self.sigma(t) * math.sqrt(2.0 * math.log(self.sigma_max / self.sigma_min))

    def network_time(self, t) -> torch.Tensor:
        if self.origin is None:
            return as_tensor(t)
        return self.origin.network_time(self.origin.from_continuous_time(t))

    def sample_time(self, n: int, generator: torch.Generator) -> torch.Tensor:
        return TIME_CUTOFF + (self.horizon - TIME_CUTOFF) * torch.rand(n, generator=generator, dtype=DTYPE)

    @property
    def prior_std(self) -> float:
        return 1.0 if self.kind == ModelKind.VPSDE else self.sigma_max

    def to_params(self) -> dict:
        if self.kind == ModelKind.VPSDE:
            return {"kind": self.kind.value, "beta_min": self.beta_min, "beta_max": self.beta_max}
        return {"kind": self.kind.value, "sigma_min": self.sigma_min, "sigma_max": self.sigma_max}


def build_schedule(
    kind: ModelKind | str,
    num_steps: int = 1000,
    beta_min: float = 0.1,
    beta_max: float = 20.0,
    sigma_min: float = 0.01,
    sigma_max: float = 50.0,
) -> NoiseSchedule:
    kind = ModelKind(kind)
    if kind == ModelKind.DDPM:
        return DiscreteSchedule.ddpm(num_steps, beta_min, beta_max)
    if kind == ModelKind.SMLD:
        return DiscreteSchedule.smld(num_steps, sigma_min, sigma_max)
    if kind == ModelKind.VPSDE:
        return ContinuousSchedule(kind, beta_min=beta_min, beta_max=beta_max)
    return ContinuousSchedule(kind, sigma_min=sigma_min, sigma_max=sigma_max)


def continuous_view(schedule: NoiseSchedule) -> ContinuousSchedule:
    """The schedule itself if continuous, else its VP/VE counterpart."""
    if isinstance(schedule, DiscreteSchedule):
        return schedule.continuous_counterpart()
    return schedule


def marginal_stats(schedule: NoiseSchedule, t) -> MarginalStats:
    return schedule.marginal_stats(t)


def perturb(schedule: NoiseSchedule, x0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    """mean_coef(t) * x0 + std(t) * eps; t may be one step/time or one per row of x0."""
    x0, eps = as_tensor(x0), as_tensor(eps)
    if x0.shape != eps.shape:
        raise ShapeError(f"perturb: x0 shape {tuple(x0.shape)} and eps shape {tuple(eps.shape)} differ")
    mean, std = schedule.marginal_coefficients(t)
    return per_sample_coef(mean, x0) * x0 + per_sample_coef(std, x0) * eps


def sde_coefficients(schedule: NoiseSchedule, x: torch.Tensor, t) -> tuple[torch.Tensor, torch.Tensor]:
    """Drift f(x, t) and diffusion g(t) of the forward SDE."""
    if not isinstance(schedule, ContinuousSchedule):
        raise KindError(f"sde_coefficients needs a continuous schedule, got {schedule.kind.value}")
    x = as_tensor(x)
    g = schedule.diffusion(t)
    if schedule.kind == ModelKind.VPSDE:
        drift = -0.5 * per_sample_coef(schedule.beta(t), x) * x
    else:
        drift = torch.zeros_like(x)
    return drift, g


def prior_logp(schedule: NoiseSchedule, x: torch.Tensor) -> torch.Tensor:
    """Log density (nats) of the Gaussian prior, summed over the last dimension."""
    x = as_tensor(x)
    dim = x.shape[-1]
    var = schedule.prior_std**2
    return -0.5 * dim * math.log(2.0 * math.pi * var) - torch.sum(x**2, dim=-1) / (2.0 * var)
