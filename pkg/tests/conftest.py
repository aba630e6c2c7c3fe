import logging

import pytest
import torch
from torch import nn

from autodiff import DTYPE, as_tensor
from config import RunConfig
from schedules import ContinuousSchedule, DiscreteSchedule, ModelKind
from score_network import ParamKind


def _raw_from_score(score: torch.Tensor, std: torch.Tensor, param_kind: ParamKind) -> torch.Tensor:
    # predict_score returns -raw/std for ε networks and raw/std for score networks.
    if param_kind == ParamKind.EPSILON:
        return -score * std
    return score * std


class GaussianOracle(nn.Module):
    """Exact score of data ~ N(0, data_var I) pushed through the schedule's forward process.

    `time_to_t` maps the network's time input back to the step/time of `marginals`.
    """

    def __init__(self, marginals, data_var: float, param_kind: ParamKind, time_to_t=None):
        super().__init__()
        self.marginals = marginals
        self.data_var = data_var
        self.param_kind = ParamKind(param_kind)
        self.time_to_t = time_to_t or (lambda time: time)

    def forward(self, x, time):
        t = self.time_to_t(as_tensor(time))
        mean, std = self.marginals.marginal_coefficients(t)
        var = mean**2 * self.data_var + std**2
        return _raw_from_score(-x / var, std, self.param_kind)


class PointOracle(nn.Module):
    """Denoiser that knows the clean point x0 exactly; its denoising loss at x0 is zero."""

    def __init__(self, schedule, x0, param_kind: ParamKind):
        super().__init__()
        self.schedule = schedule
        self.x0 = as_tensor(x0)
        self.param_kind = ParamKind(param_kind)

    def forward(self, x, time):
        time = as_tensor(time)
        t = torch.round(time * self.schedule.num_steps).long() if self.schedule.is_discrete else time
        mean, std = self.schedule.marginal_coefficients(t)
        eps = (x - mean * self.x0) / std
        return eps if self.param_kind == ParamKind.EPSILON else -eps


class ZeroNetwork(nn.Module):
    def __init__(self, param_kind: ParamKind = ParamKind.EPSILON):
        super().__init__()
        self.param_kind = ParamKind(param_kind)

    def forward(self, x, time):
        return torch.zeros_like(as_tensor(x))


def ddpm_network_time_to_vp(schedule: DiscreteSchedule):
    """Inverse of the VP counterpart's network_time for a DDPM origin."""
    return lambda time: schedule.to_continuous_time(time * schedule.num_steps)


@pytest.fixture(autouse=True)
def quiet_logs():
    logging.getLogger().setLevel(logging.WARNING)
    yield


@pytest.fixture
def ddpm_schedule():
    return DiscreteSchedule.ddpm(1000, 0.1, 20.0)


@pytest.fixture
def smld_schedule():
    return DiscreteSchedule.smld(1000, 0.01, 50.0)


@pytest.fixture
def vp_schedule():
    return ContinuousSchedule(ModelKind.VPSDE, beta_min=0.1, beta_max=20.0)


@pytest.fixture
def ve_schedule():
    return ContinuousSchedule(ModelKind.VESDE, sigma_min=0.01, sigma_max=50.0)


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def small_config() -> RunConfig:
    """A run small enough for CLI tests: tiny network, a few training steps, coarse attack grids."""
    return RunConfig.model_validate(
        {
            "data": {"generator": "ring8", "n_members": 16, "n_nonmembers": 16, "seed": 0},
            "model": {"kind": "ddpm", "hidden_dims": [16, 16], "seed": 7},
            "schedule": {"num_steps": 50},
            "train": {"steps": 20, "batch_size": 8, "log_every": 5},
            "sampler": {"n_samples": 32},
            "attack": {"k_draws": 2, "discrete_stride": 10, "n_continuous_steps": 5},
            "ode": {"rtol": 1e-3, "atol": 1e-3, "n_probes": 2, "max_steps": 5000},
            "report": {"discrete_steps": [0, 20, 49], "continuous_times": [0.0, 1.0]},
            "runtime": {"threads": 1, "show_progress": False},
        }
    )


def points(n: int, dim: int = 2, seed: int = 0, scale: float = 1.0) -> torch.Tensor:
    return scale * torch.randn(n, dim, generator=torch.Generator().manual_seed(seed), dtype=DTYPE)
