import logging
import math

import torch
from torch import nn
from tqdm import tqdm

from autodiff import DTYPE, as_tensor
from config import SamplerConfig
from errors import DivergenceError, KindError, RangeError
from schedules import TIME_CUTOFF, ContinuousSchedule, DiscreteSchedule, ModelKind, NoiseSchedule, sde_coefficients
from score_network import predict_eps, predict_score
from utils.helper import torch_generator

NOISE_BLOCK = 256


def ddpm_ancestral_step(
    net: nn.Module, x_t: torch.Tensor, t: int, noise: torch.Tensor, schedule: DiscreteSchedule
) -> torch.Tensor:
    """x_{t-1} = (x_t - β_t/√(1-ᾱ_t) ε_θ(x_t, t)) / √α_t + √β_t · noise; no noise at t = 0."""
    if schedule.kind != ModelKind.DDPM:
        raise KindError(f"ancestral sampling needs a DDPM schedule, got {schedule.kind.value}")
    x_t = as_tensor(x_t)
    beta = float(schedule.betas[t])
    alpha = float(schedule.alphas[t])
    alphabar = float(schedule.alphabars[t])
    eps = predict_eps(net, x_t, t, schedule)
    mean = (x_t - beta / math.sqrt(1.0 - alphabar) * eps) / math.sqrt(alpha)
    if t == 0:
        return mean
    return mean + math.sqrt(beta) * as_tensor(noise)


def langevin_step(
    net: nn.Module, x: torch.Tensor, t: int, alpha: float, noise: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """x + (α/2) s_θ(x, σ_t) + √α · noise at the noise level σ_t of step t."""
    if alpha <= 0:
        raise RangeError(f"Langevin step size must be positive, got {alpha}")
    return as_tensor(x) + 0.5 * alpha * predict_score(net, x, t, schedule) + math.sqrt(alpha) * as_tensor(noise)


def reverse_sde_euler_step(
    net: nn.Module, x: torch.Tensor, t: float, dt: float, noise: torch.Tensor, schedule: ContinuousSchedule
) -> torch.Tensor:
    """x + (f(x,t) - g(t)² s_θ(x,t)) dt + g(t) √|dt| · noise, with dt < 0."""
    if not isinstance(schedule, ContinuousSchedule):
        raise KindError(f"reverse-time SDE stepping needs a continuous schedule, got {schedule.kind.value}")
    if t - abs(dt) < TIME_CUTOFF * (1.0 - 1e-9):
        raise RangeError(f"step from t={t} by dt={dt} goes below the cutoff {TIME_CUTOFF}")
    x = as_tensor(x)
    drift, g = sde_coefficients(schedule, x, t)
    score = predict_score(net, x, t, schedule)
    return x + (drift - g**2 * score) * dt + g * math.sqrt(abs(dt)) * as_tensor(noise)


class ChainNoise:
    """Standard normal draws for n chains, chain i fed only by its own stream keyed by (seed, i).

    Each stream is read in blocks of NOISE_BLOCK draws so a chain's noise does not depend on how many chains run.
    """

    def __init__(self, seed: int, n_chains: int, dim: int):
        self.generators = [torch_generator(seed, chain) for chain in range(n_chains)]
        self.dim = dim
        self._block = None
        self._position = NOISE_BLOCK

    def draw(self) -> torch.Tensor:
        if self._position == NOISE_BLOCK:
            self._block = torch.stack(
                [torch.randn(NOISE_BLOCK, self.dim, generator=g, dtype=DTYPE) for g in self.generators], dim=1
            )
            self._position = 0
        noise = self._block[self._position]
        self._position += 1
        return noise


class DiffusionSampler:
    """Runs the reverse process of a trained network from its Gaussian prior."""

    def __init__(self, net: nn.Module, schedule: NoiseSchedule, config: SamplerConfig, show_progress: bool = False):
        self.net = net
        self.schedule = schedule
        self.config = config
        self.show_progress = show_progress
        self.logger = logging.getLogger(__name__)

    def langevin_step_size(self, t: int) -> float:
        sigmas = self.schedule.sigmas
        return self.config.langevin_step_scale * (float(sigmas[t]) / float(sigmas[-1])) ** 2

    def _ancestral(self, x: torch.Tensor, chains: ChainNoise) -> torch.Tensor:
        for t in tqdm(range(self.schedule.num_steps - 1, -1, -1), disable=not self.show_progress, desc="ddpm"):
            noise = chains.draw()
            x = ddpm_ancestral_step(self.net, x, t, noise, self.schedule)
        return x

    def _annealed_langevin(self, x: torch.Tensor, chains: ChainNoise) -> torch.Tensor:
        # Step 0 carries the largest noise level.
        for t in tqdm(range(self.schedule.num_steps), disable=not self.show_progress, desc="langevin"):
            alpha = self.langevin_step_size(t)
            for _ in range(self.config.langevin_inner_steps):
                noise = chains.draw()
                x = langevin_step(self.net, x, t, alpha, noise, self.schedule)
        return x

    def _euler_maruyama(self, x: torch.Tensor, chains: ChainNoise) -> torch.Tensor:
        times = torch.linspace(self.schedule.horizon, TIME_CUTOFF, self.config.sde_steps + 1, dtype=DTYPE)
        for i in tqdm(range(self.config.sde_steps), disable=not self.show_progress, desc="sde"):
            t, t_next = float(times[i]), float(times[i + 1])
            noise = chains.draw()
            x = reverse_sde_euler_step(self.net, x, t, t_next - t, noise, self.schedule)
        return x

    def generate(self, data_dim: int) -> torch.Tensor:
        """n_samples draws; chain i depends only on (seed, i)."""
        n = self.config.n_samples
        if n == 0:
            return torch.empty(0, data_dim, dtype=DTYPE)
        chains = ChainNoise(self.config.seed, n, data_dim)
        x = self.schedule.prior_std * chains.draw()
        self.logger.info(f"Generating {n} samples with the {self.schedule.kind.value} reverse process")

        with torch.no_grad():
            if self.schedule.kind == ModelKind.DDPM:
                x = self._ancestral(x, chains)
            elif self.schedule.kind == ModelKind.SMLD:
                x = self._annealed_langevin(x, chains)
            else:
                x = self._euler_maruyama(x, chains)

        if not torch.all(torch.isfinite(x)):
            self.logger.error("Sampling produced non-finite values")
            raise DivergenceError("generated samples contain non-finite values")
        return x


def generate(net: nn.Module, schedule: NoiseSchedule, config: SamplerConfig, data_dim: int = 2) -> torch.Tensor:
    return DiffusionSampler(net, schedule, config).generate(data_dim)
