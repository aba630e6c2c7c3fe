import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import torch
from torch import nn

from autodiff import DTYPE, as_tensor
from errors import KindError, SingularityError
from schedules import ModelKind, NoiseSchedule

CHECKPOINT_VERSION = 1


class ParamKind(str, Enum):
    EPSILON = "epsilon"
    SCORE = "score"


def default_param_kind(kind: ModelKind) -> ParamKind:
    """ε-prediction for the ε-loss models (DDPM, VP), score prediction otherwise."""
    if ModelKind(kind) in (ModelKind.DDPM, ModelKind.VPSDE):
        return ParamKind.EPSILON
    return ParamKind.SCORE


def fourier_frequencies(width: int, min_frequency: float, max_frequency: float) -> torch.Tensor:
    """width/2 geometrically spaced frequencies from min to max."""
    count = width // 2
    if count == 1:
        return as_tensor([min_frequency])
    return as_tensor(torch.logspace(math.log10(min_frequency), math.log10(max_frequency), count, dtype=DTYPE))


def time_embedding(t, frequencies: torch.Tensor) -> torch.Tensor:
    """[sin(2π f_k t) ..., cos(2π f_k t) ...] for a time or a batch of times in [0, 1]."""
    t = as_tensor(t)
    angles = 2.0 * math.pi * t.unsqueeze(-1) * frequencies
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class ScoreNetwork(nn.Module):
    """Time-conditioned tanh MLP: concat(x_t, time features) -> hidden layers -> m outputs."""

    def __init__(
        self,
        data_dim: int = 2,
        hidden_dims: list[int] | tuple[int, ...] = (128, 128, 128, 128),
        time_embed_width: int = 16,
        param_kind: ParamKind = ParamKind.EPSILON,
        min_frequency: float = 0.25,
        max_frequency: float = 32.0,
        seed: int = 7,
    ):
        super().__init__()
        if time_embed_width <= 0 or time_embed_width % 2:
            raise ValueError(f"time_embed_width must be a positive even integer, got {time_embed_width}")
        self.data_dim = int(data_dim)
        self.hidden_dims = [int(h) for h in hidden_dims]
        self.time_embed_width = int(time_embed_width)
        self.param_kind = ParamKind(param_kind)
        self.min_frequency = float(min_frequency)
        self.max_frequency = float(max_frequency)
        self.register_buffer(
            "frequencies", fourier_frequencies(self.time_embed_width, self.min_frequency, self.max_frequency)
        )

        self.layer_dims = [self.data_dim + self.time_embed_width, *self.hidden_dims, self.data_dim]
        self.layers = nn.ModuleList(
            nn.Linear(d_in, d_out, dtype=DTYPE) for d_in, d_out in zip(self.layer_dims[:-1], self.layer_dims[1:])
        )
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        # Fan-in uniform init; the output layer starts at zero.
        generator = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for layer in self.layers[:-1]:
                bound = 1.0 / math.sqrt(layer.in_features)
                layer.weight.copy_(torch.empty_like(layer.weight).uniform_(-bound, bound, generator=generator))
                layer.bias.copy_(torch.empty_like(layer.bias).uniform_(-bound, bound, generator=generator))
            self.layers[-1].weight.zero_()
            self.layers[-1].bias.zero_()

    def forward(self, x: torch.Tensor, time) -> torch.Tensor:
        x = as_tensor(x)
        features = time_embedding(time, self.frequencies)
        if features.dim() < x.dim():
            features = features.expand(*x.shape[:-1], self.time_embed_width)
        h = torch.cat([x, features], dim=-1)
        for layer in self.layers[:-1]:
            h = torch.tanh(layer(h))
        return self.layers[-1](h)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def predict_eps(net: nn.Module, x_t: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    """ε_θ(x_t, t) of an ε-parameterized network."""
    if net.param_kind != ParamKind.EPSILON:
        raise KindError(f"predict_eps needs an epsilon-prediction network, got {net.param_kind.value}")
    return net(x_t, schedule.network_time(t))


def predict_score(net: nn.Module, x_t: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    """s_θ(x_t, t): raw/std for score networks, -ε/std for ε networks."""
    std = schedule.std(t)
    if torch.any(std == 0):
        raise SingularityError(f"noise std is zero at t={as_tensor(t).tolist()}")
    if std.dim() > 0:
        std = std.reshape(tuple(std.shape) + (1,) * (as_tensor(x_t).dim() - std.dim()))
    raw = net(x_t, schedule.network_time(t))
    if net.param_kind == ParamKind.EPSILON:
        return -raw / std
    return raw / std


@dataclass
class Checkpoint:
    model_kind: ModelKind
    schedule_params: dict
    network: dict
    weights: dict[str, torch.Tensor]
    metadata: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    @classmethod
    def from_network(cls, net: ScoreNetwork, schedule: NoiseSchedule, metadata: dict | None = None) -> "Checkpoint":
        return cls(
            model_kind=schedule.kind,
            schedule_params=schedule.to_params(),
            network={
                "data_dim": net.data_dim,
                "hidden_dims": list(net.hidden_dims),
                "time_embed_width": net.time_embed_width,
                "param_kind": net.param_kind.value,
                "min_frequency": net.min_frequency,
                "max_frequency": net.max_frequency,
                "layer_dims": list(net.layer_dims),
            },
            weights={name: tensor.detach().clone() for name, tensor in net.state_dict().items()},
            metadata=dict(metadata or {}),
        )

    def build_network(self) -> ScoreNetwork:
        params = {key: value for key, value in self.network.items() if key != "layer_dims"}
        net = ScoreNetwork(**params)
        net.load_state_dict(self.weights)
        net.eval()
        logging.getLogger(__name__).debug(f"Rebuilt {self.model_kind.value} network with {net.parameter_count()} parameters")
        return net
