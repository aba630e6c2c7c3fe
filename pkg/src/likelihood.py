"""Log-likelihood through the probability-flow ODE with Hutchinson divergence estimates."""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import integrate
from torch import nn

from autodiff import DTYPE, as_tensor, forward, vjp
from config import OdeConfig
from errors import ConvergenceError, DivergenceError, RangeError, ShapeError
from schedules import TIME_CUTOFF, ContinuousSchedule, NoiseSchedule, continuous_view, prior_logp, sde_coefficients
from score_network import predict_score
from utils.helper import torch_generator


@dataclass
class OdeState:
    x: torch.Tensor
    delta_logp: float


@dataclass(frozen=True)
class LikelihoodResult:
    log_likelihood: float
    bits_per_dim: float
    prior_logp: float
    delta_logp: float
    nfev: int


def pf_drift(net: nn.Module, x: torch.Tensor, t: float, schedule: ContinuousSchedule) -> torch.Tensor:
    """f̃(x, t) = f(x, t) - ½ g(t)² s_θ(x, t)."""
    if float(t) < TIME_CUTOFF:
        raise RangeError(f"time {t} below the cutoff {TIME_CUTOFF}")
    drift, g = sde_coefficients(schedule, x, t)
    return drift - 0.5 * g**2 * predict_score(net, x, t, schedule)


def draw_probes(shape: Sequence[int], n_probes: int, dist: str, generator: torch.Generator) -> torch.Tensor:
    """n_probes probe vectors of the given shape, Rademacher (±1) or standard normal."""
    if dist == "gaussian":
        return torch.randn((n_probes, *shape), generator=generator, dtype=DTYPE)
    return torch.randint(0, 2, (n_probes, *shape), generator=generator).to(DTYPE) * 2.0 - 1.0


def divergence_estimate(
    fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, probes: Sequence[torch.Tensor] | torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """(fn(x), mean over probes of vᵀ (∂fn/∂x) v), one vector-Jacobian product for all probes.

    fn must act row-wise on an n x m batch; stacking the probe copies of x along the
    batch axis then keeps every probe's product independent.
    """
    x = as_tensor(x)
    if not isinstance(probes, torch.Tensor):
        probes = torch.stack([as_tensor(v) for v in probes])
    if tuple(probes.shape[1:]) != tuple(x.shape):
        raise ShapeError(f"probe shape {tuple(probes.shape[1:])} does not match x shape {tuple(x.shape)}")
    rows = x.reshape(1, -1) if x.dim() == 1 else x
    n_probes, (n_rows, dim) = probes.shape[0], rows.shape
    replicated = rows.unsqueeze(0).expand(n_probes, n_rows, dim).reshape(n_probes * n_rows, dim)
    flat_probes = probes.reshape(n_probes * n_rows, dim)

    value, tape = forward(fn, [replicated])
    if tuple(value.shape) != tuple(replicated.shape):
        raise ShapeError(f"divergence needs a map R^m -> R^m, got output shape {tuple(value.shape)}")
    products = torch.sum(vjp(tape, value, flat_probes) * flat_probes, dim=-1).reshape(n_probes, n_rows)
    fx = value.detach()[:n_rows]
    divergence = products.mean(dim=0)
    if x.dim() == 1:
        return fx[0], divergence[0]
    return fx, divergence


def hutchinson_divergence(
    net: nn.Module, x: torch.Tensor, t: float, schedule: ContinuousSchedule, probes
) -> torch.Tensor:
    """Skilling–Hutchinson estimate of ∇·f̃(x, t)."""
    return divergence_estimate(lambda y: pf_drift(net, y, t, schedule), x, probes)[1]


class LikelihoodEstimator:
    """Integrates (x, Δlogp) from the time cutoff to T with adaptive RK45 and adds the prior term."""

    def __init__(self, net: nn.Module, schedule: NoiseSchedule, config: OdeConfig):
        self.net = net
        self.source_schedule = schedule
        self.schedule = continuous_view(schedule)
        self.config = config
        self.logger = logging.getLogger(__name__)
        if schedule is not self.schedule:
            self.logger.info(
                f"Evaluating {schedule.kind.value} likelihoods under its {self.schedule.kind.value} counterpart"
            )

    def log_likelihood(self, x, sample_index: int = 0) -> LikelihoodResult:
        x = as_tensor(x).reshape(-1)
        dim = x.shape[0]
        generator = torch_generator(self.config.seed, sample_index)
        probes = draw_probes((1, dim), self.config.n_probes, self.config.probe_dist, generator)
        nfev = 0

        def rhs(t: float, state: np.ndarray) -> np.ndarray:
            nonlocal nfev
            nfev += 1
            if nfev > self.config.max_steps:
                raise ConvergenceError(
                    f"likelihood ODE exceeded {self.config.max_steps} drift evaluations at t={t:.6g}"
                )
            current = torch.from_numpy(state[:dim].copy()).reshape(1, dim)
            drift, divergence = divergence_estimate(
                lambda y: pf_drift(self.net, y, t, self.schedule), current, probes
            )
            if not (torch.all(torch.isfinite(drift)) and torch.all(torch.isfinite(divergence))):
                raise DivergenceError(f"likelihood ODE state became non-finite at t={t:.6g}")
            return np.concatenate([drift.reshape(-1).numpy(), divergence.reshape(-1).numpy()])

        initial = np.concatenate([x.numpy(), np.zeros(1)])
        solution = integrate.solve_ivp(
            rhs,
            (TIME_CUTOFF, self.schedule.horizon),
            initial,
            method="RK45",
            rtol=self.config.rtol,
            atol=self.config.atol,
        )
        if solution.status != 0:
            raise ConvergenceError(f"likelihood ODE failed: {solution.message}")
        final = solution.y[:, -1]
        if not np.all(np.isfinite(final)):
            raise DivergenceError("likelihood ODE state became non-finite")

        state = OdeState(x=torch.from_numpy(final[:dim].copy()), delta_logp=float(final[dim]))
        prior = float(prior_logp(self.schedule, state.x))
        # log p_0(x_0) = log p_T(x_T) + ∫ ∇·f̃ dt along the forward-time trajectory.
        logp = prior + state.delta_logp
        return LikelihoodResult(
            log_likelihood=logp,
            bits_per_dim=-logp / (dim * math.log(2.0)),
            prior_logp=prior,
            delta_logp=state.delta_logp,
            nfev=nfev,
        )


def log_likelihood(net: nn.Module, x, schedule: NoiseSchedule, config: OdeConfig, sample_index: int = 0) -> float:
    return LikelihoodEstimator(net, schedule, config).log_likelihood(x, sample_index).log_likelihood
