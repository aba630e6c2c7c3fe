import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import pandas as pd
import torch
from torch import nn
from tqdm import tqdm

from autodiff import as_tensor
from config import TrainConfig
from errors import ContractError, DivergenceError, KindError, RangeError
from schedules import TIME_CUTOFF, ContinuousSchedule, ModelKind, NoiseSchedule, per_sample_coef, perturb
from score_network import predict_eps, predict_score
from utils.helper import torch_generator

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def loss_ddpm(net: nn.Module, x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """||ε - ε_θ(√ᾱ_t x0 + √(1-ᾱ_t) ε, t)||², summed over data dimensions (one value per row)."""
    x_t = perturb(schedule, x0, t, eps)
    residual = as_tensor(eps) - predict_eps(net, x_t, t, schedule)
    return torch.sum(residual**2, dim=-1)


def loss_smld(net: nn.Module, x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """σ_t² ||s_θ(x_t, σ_t) + (x_t - x0)/σ_t²||², evaluated as ||σ_t s_θ + ε||²."""
    x_t = perturb(schedule, x0, t, eps)
    sigma = per_sample_coef(schedule.std(t), x_t)
    residual = sigma * predict_score(net, x_t, t, schedule) + as_tensor(eps)
    return torch.sum(residual**2, dim=-1)


def loss_sde(net: nn.Module, x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """std(t)² ||s_θ(x_t, t) - ∇log q(x_t | x0)||² with ∇log q = -(x_t - mean x0)/std² = -ε/std."""
    if not isinstance(schedule, ContinuousSchedule):
        raise KindError(f"loss_sde needs a continuous schedule, got {schedule.kind.value}")
    times = as_tensor(t)
    if torch.any(times < TIME_CUTOFF):
        raise RangeError(f"time {times.tolist()} below the cutoff {TIME_CUTOFF}")
    x_t = perturb(schedule, x0, t, eps)
    std = per_sample_coef(schedule.std(t), x_t)
    residual = std * predict_score(net, x_t, t, schedule) + as_tensor(eps)
    return torch.sum(residual**2, dim=-1)


def denoising_loss(net: nn.Module, x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """The training objective of the schedule's model kind."""
    if schedule.kind == ModelKind.DDPM:
        return loss_ddpm(net, x0, t, eps, schedule)
    if schedule.kind == ModelKind.SMLD:
        return loss_smld(net, x0, t, eps, schedule)
    return loss_sde(net, x0, t, eps, schedule)


@dataclass
class DpStepResult:
    mean_loss: float
    clipped_norms: torch.Tensor
    clean_grad: torch.Tensor
    noised_grad: torch.Tensor


@dataclass
class TrainResult:
    net: nn.Module
    history: pd.DataFrame
    metadata: dict = field(default_factory=dict)


class DiffusionTrainer:
    def __init__(self, config: TrainConfig, schedule: NoiseSchedule, threads: int = 1, show_progress: bool = False):
        self.config = config
        self.schedule = schedule
        self.threads = max(1, int(threads))
        self.show_progress = show_progress
        self.logger = logging.getLogger(__name__)

    def _generators(self) -> dict[str, torch.Generator]:
        seed = self.config.seed
        return {
            "batch": torch_generator(seed, 0),
            "time": torch_generator(seed, 1),
            "noise": torch_generator(seed, 2),
            "dp": torch_generator(seed, 3),
        }

    def draw_batch(self, members: torch.Tensor, generators: dict) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Shuffled fixed-size minibatch with a diffusion step/time and fresh noise per sample."""
        index = torch.randperm(members.shape[0], generator=generators["batch"])[: self.config.batch_size]
        batch = members[index]
        t = self.schedule.sample_time(batch.shape[0], generators["time"])
        eps = torch.randn(batch.shape, generator=generators["noise"], dtype=batch.dtype)
        return batch, t, eps

    def make_optimizer(self, net: nn.Module) -> torch.optim.Optimizer:
        return torch.optim.Adam(net.parameters(), lr=self.config.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)

    def train_step(self, net, optimizer, batch, t, eps) -> float:
        optimizer.zero_grad(set_to_none=True)
        loss = denoising_loss(net, batch, t, eps, self.schedule).mean()
        loss.backward()
        optimizer.step()
        return float(loss.detach())

    def per_sample_gradients(self, net, batch, t, eps) -> tuple[torch.Tensor, torch.Tensor]:
        """(per-sample losses, flattened per-sample gradients), reduced in index order."""
        params = [p for p in net.parameters() if p.requires_grad]

        def gradient(i: int):
            loss = denoising_loss(net, batch[i], t[i], eps[i], self.schedule)
            grads = torch.autograd.grad(loss, params)
            return loss.detach(), torch.cat([g.reshape(-1) for g in grads])

        if self.threads > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(gradient, range(batch.shape[0])))
        else:
            results = [gradient(i) for i in range(batch.shape[0])]
        losses = torch.stack([loss for loss, _ in results])
        grads = torch.stack([g for _, g in results])
        return losses, grads

    def dp_train_step(self, net, optimizer, batch, t, eps, generator: torch.Generator) -> DpStepResult:
        """Clip each per-sample gradient to norm C, add N(0, (σ_dp C)² I) to the sum, average, Adam step."""
        dp = self.config.dp
        if not dp.enabled:
            raise ContractError("dp_train_step called without DP enabled in the train config")
        losses, grads = self.per_sample_gradients(net, batch, t, eps)
        norms = torch.linalg.vector_norm(grads, dim=1)
        factors = torch.clamp(dp.clip_bound / norms, max=1.0)
        clipped = grads * factors.unsqueeze(1)
        total = clipped.sum(dim=0)
        noise_std = dp.noise_multiplier * dp.clip_bound if dp.noise_multiplier > 0 else 0.0
        noise = noise_std * torch.randn(total.shape, generator=generator, dtype=total.dtype)
        batch_size = batch.shape[0]
        noised = (total + noise) / batch_size

        optimizer.zero_grad(set_to_none=True)
        offset = 0
        for p in net.parameters():
            if not p.requires_grad:
                continue
            count = p.numel()
            p.grad = noised[offset : offset + count].reshape(p.shape).clone()
            offset += count
        optimizer.step()
        return DpStepResult(
            mean_loss=float(losses.mean()),
            clipped_norms=torch.linalg.vector_norm(clipped, dim=1),
            clean_grad=total / batch_size,
            noised_grad=noised,
        )

    def train(self, net: nn.Module, members, dataset_fingerprint: str | None = None) -> TrainResult:
        members = as_tensor(members)
        if members.dim() != 2 or members.shape[0] == 0:
            raise ContractError(f"training needs a non-empty n x m member set, got shape {tuple(members.shape)}")
        if self.config.batch_size > members.shape[0]:
            raise ContractError(
                f"batch_size {self.config.batch_size} exceeds the {members.shape[0]} member samples"
            )

        dp = self.config.dp
        mode = f"DP-SGD (C={dp.clip_bound}, sigma={dp.noise_multiplier})" if dp.enabled else "plain"
        self.logger.info(
            f"Training {self.schedule.kind.value} for {self.config.steps} steps, batch {self.config.batch_size}, "
            f"lr {self.config.learning_rate}, {mode}"
        )

        # Create the seeded streams and the optimizer
        generators = self._generators()
        optimizer = self.make_optimizer(net)
        net.train()
        history, window = [], []
        max_clipped_norm = 0.0

        # Run the optimization loop
        for step in tqdm(range(1, self.config.steps + 1), disable=not self.show_progress, desc="train"):
            batch, t, eps = self.draw_batch(members, generators)
            if dp.enabled:
                result = self.dp_train_step(net, optimizer, batch, t, eps, generators["dp"])
                loss = result.mean_loss
                max_clipped_norm = max(max_clipped_norm, float(result.clipped_norms.max()))
            else:
                loss = self.train_step(net, optimizer, batch, t, eps)

            if not math.isfinite(loss):
                self.logger.error(f"Non-finite loss {loss} at step {step}")
                raise DivergenceError(f"non-finite training loss at step {step}", step=step)

            # Record the windowed mean loss
            window.append(loss)
            if step % self.config.log_every == 0 or step == self.config.steps:
                history.append((step, sum(window) / len(window)))
                window.clear()
                if len(history) % 50 == 0:
                    self.logger.info(f"step {step}: mean loss {history[-1][1]:.6f}")

        # Build the training metadata
        net.eval()
        metadata = {"steps": self.config.steps, "seed": self.config.seed, "dp": dp.enabled}
        if dataset_fingerprint is not None:
            metadata["dataset_fingerprint"] = dataset_fingerprint
        if dp.enabled:
            metadata["dp_params"] = {
                "clip_bound": dp.clip_bound,
                "noise_multiplier": dp.noise_multiplier,
                "batch_size": self.config.batch_size,
                "steps": self.config.steps,
                "delta": dp.delta,
            }
            metadata["max_clipped_norm"] = max_clipped_norm
            self.logger.info(f"Largest post-clip per-sample gradient norm: {max_clipped_norm:.6g}")

        history_frame = pd.DataFrame(history, columns=["step", "mean_loss"])
        if not history_frame.empty:
            self.logger.info(
                f"Training finished: first window loss {history_frame.mean_loss.iloc[0]:.6f}, "
                f"last window loss {history_frame.mean_loss.iloc[-1]:.6f}"
            )
        return TrainResult(net=net, history=history_frame, metadata=metadata)
