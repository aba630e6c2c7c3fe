"""Membership inference by per-step denoising loss and by probability-flow likelihood."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch
from torch import nn
from tqdm import tqdm

from autodiff import DTYPE, as_tensor
from config import AttackConfig, OdeConfig
from errors import ContractError, ConvergenceError, RangeError
from likelihood import LikelihoodEstimator
from schedules import TIME_CUTOFF, NoiseSchedule, continuous_view
from trainer import denoising_loss
from utils.helper import derive_seed, time_key, torch_generator

logger = logging.getLogger(__name__)


class Orientation(str, Enum):
    HIGHER_IS_MEMBER = "higher_is_member"
    LOWER_IS_MEMBER = "lower_is_member"

    def flipped(self) -> "Orientation":
        if self == Orientation.HIGHER_IS_MEMBER:
            return Orientation.LOWER_IS_MEMBER
        return Orientation.HIGHER_IS_MEMBER


class Provenance(str, Enum):
    LOSS = "loss"
    LIKELIHOOD = "likelihood"


@dataclass
class AttackScoreSet:
    """Scores of the member and nonmember evaluation samples under one attack."""

    member_scores: np.ndarray
    nonmember_scores: np.ndarray
    orientation: Orientation
    provenance: Provenance = Provenance.LOSS
    step: float | None = None
    member_ids: np.ndarray | None = None
    nonmember_ids: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.member_scores = np.asarray(self.member_scores, dtype=np.float64).reshape(-1)
        self.nonmember_scores = np.asarray(self.nonmember_scores, dtype=np.float64).reshape(-1)
        self.orientation = Orientation(self.orientation)
        self.provenance = Provenance(self.provenance)
        if self.member_scores.size == 0 or self.nonmember_scores.size == 0:
            raise ContractError(
                f"score set needs members and nonmembers, got {self.member_scores.size} and "
                f"{self.nonmember_scores.size}"
            )
        if not (np.all(np.isfinite(self.member_scores)) and np.all(np.isfinite(self.nonmember_scores))):
            raise ContractError("score set contains NaN or infinite scores")
        if self.member_ids is None:
            self.member_ids = np.arange(self.member_scores.size)
        if self.nonmember_ids is None:
            self.nonmember_ids = np.arange(self.nonmember_scores.size)
        self.member_ids = np.asarray(self.member_ids, dtype=np.int64)
        self.nonmember_ids = np.asarray(self.nonmember_ids, dtype=np.int64)

    @property
    def n_members(self) -> int:
        return int(self.member_scores.size)

    @property
    def n_nonmembers(self) -> int:
        return int(self.nonmember_scores.size)

    def normalized(self) -> tuple[np.ndarray, np.ndarray]:
        """(member, nonmember) scores oriented so that higher means member."""
        if self.orientation == Orientation.HIGHER_IS_MEMBER:
            return self.member_scores, self.nonmember_scores
        return -self.member_scores, -self.nonmember_scores

    def negated(self) -> "AttackScoreSet":
        return AttackScoreSet(
            member_scores=-self.member_scores,
            nonmember_scores=-self.nonmember_scores,
            orientation=self.orientation.flipped(),
            provenance=self.provenance,
            step=self.step,
            member_ids=self.member_ids,
            nonmember_ids=self.nonmember_ids,
            metadata=dict(self.metadata),
        )


@dataclass
class StepProfile:
    """Loss-attack score sets for every attacked step, in increasing step order."""

    steps: np.ndarray
    score_sets: list[AttackScoreSet]

    def __post_init__(self):
        self.steps = np.asarray(self.steps)
        if self.steps.ndim != 1 or self.steps.size == 0:
            raise ContractError("a step profile needs at least one step")
        if len(self.score_sets) != self.steps.size:
            raise ContractError(f"{self.steps.size} steps but {len(self.score_sets)} score sets")
        if np.any(np.diff(self.steps) <= 0):
            raise ContractError("profile steps must be strictly increasing")

    def __len__(self) -> int:
        return int(self.steps.size)

    def __iter__(self):
        return iter(zip(self.steps.tolist(), self.score_sets))

    def nearest(self, step: float) -> AttackScoreSet:
        return self.score_sets[int(np.argmin(np.abs(self.steps - step)))]


def attack_steps(schedule: NoiseSchedule, config: AttackConfig) -> np.ndarray:
    """Every stride-th discrete step, or n continuous times in (cutoff, 1] on a grid or drawn at random."""
    if schedule.is_discrete:
        return np.arange(0, schedule.num_steps, config.discrete_stride, dtype=np.int64)
    n = config.n_continuous_steps
    if config.step_mode == "random":
        rng = np.random.default_rng(derive_seed(config.seed, n))
        times = TIME_CUTOFF + (1.0 - TIME_CUTOFF) * (1.0 - rng.random(n))
        return np.unique(times)
    return np.linspace(TIME_CUTOFF, 1.0, n + 1)[1:]


def loss_noise(seed: int, t, k_draws: int, sample_ids, dim: int) -> torch.Tensor:
    """(k_draws, n, dim) noise; row i of draw d depends only on (seed, t, d, sample_ids[i])."""
    sample_ids = np.asarray(sample_ids, dtype=np.int64).reshape(-1)
    key = time_key(float(t))
    noise = torch.empty(k_draws, sample_ids.size, dim, dtype=DTYPE)
    for draw in range(k_draws):
        for row, sample_id in enumerate(sample_ids):
            generator = torch_generator(seed, key, draw, int(sample_id))
            noise[draw, row] = torch.randn(dim, generator=generator, dtype=DTYPE)
    return noise


def per_step_loss(
    net: nn.Module,
    x,
    t,
    schedule: NoiseSchedule,
    k_draws: int = 5,
    seed: int = 0,
    sample_ids=None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """(1/m) · mean over k_draws of the kind's denoising residual at step t, one value per row of x."""
    if k_draws < 1:
        raise RangeError(f"k_draws must be at least 1, got {k_draws}")
    x = as_tensor(x)
    single = x.dim() == 1
    rows = x.reshape(1, -1) if single else x
    n, dim = rows.shape
    if sample_ids is None:
        sample_ids = np.arange(n)
    if noise is None:
        noise = loss_noise(seed, t, k_draws, sample_ids, dim)
    else:
        noise = as_tensor(noise).reshape(-1, n, dim)

    with torch.no_grad():
        losses = torch.stack([denoising_loss(net, rows, t, eps, schedule) for eps in noise])
    scores = losses.mean(dim=0) / dim
    return scores[0] if single else scores


class LossAttack:
    """Threat model with access to the network: low denoising loss at step t marks a member."""

    def __init__(
        self,
        net: nn.Module,
        schedule: NoiseSchedule,
        k_draws: int = 5,
        seed: int = 0,
        threads: int = 1,
        show_progress: bool = False,
    ):
        self.net = net
        self.schedule = schedule
        self.k_draws = k_draws
        self.seed = seed
        self.threads = max(1, int(threads))
        self.show_progress = show_progress
        self.logger = logging.getLogger(__name__)

    def score_step(self, step, members, nonmembers, member_ids, nonmember_ids) -> AttackScoreSet:
        points = torch.cat([members, nonmembers])
        ids = np.concatenate([member_ids, nonmember_ids])
        scores = per_step_loss(self.net, points, step, self.schedule, self.k_draws, self.seed, ids).numpy()
        n_members = members.shape[0]
        return AttackScoreSet(
            member_scores=scores[:n_members],
            nonmember_scores=scores[n_members:],
            orientation=Orientation.LOWER_IS_MEMBER,
            provenance=Provenance.LOSS,
            step=step,
            member_ids=member_ids,
            nonmember_ids=nonmember_ids,
        )

    def run(self, members, nonmembers, steps, member_ids=None, nonmember_ids=None) -> StepProfile:
        members, nonmembers = as_tensor(members), as_tensor(nonmembers)
        if members.shape[0] == 0 or nonmembers.shape[0] == 0:
            raise ContractError(
                f"loss attack needs members and nonmembers, got {members.shape[0]} and {nonmembers.shape[0]}"
            )
        steps = np.asarray(steps)
        if steps.size == 0:
            raise ContractError("loss attack needs at least one step")
        member_ids = np.arange(members.shape[0]) if member_ids is None else np.asarray(member_ids)
        nonmember_ids = np.arange(nonmembers.shape[0]) if nonmember_ids is None else np.asarray(nonmember_ids)
        step_values = [int(s) for s in steps] if self.schedule.is_discrete else [float(s) for s in steps]

        self.logger.info(
            f"Loss attack on {members.shape[0]} members / {nonmembers.shape[0]} nonmembers over "
            f"{len(step_values)} steps, {self.k_draws} noise draws each"
        )

        def score(step):
            return self.score_step(step, members, nonmembers, member_ids, nonmember_ids)

        progress = tqdm(total=len(step_values), disable=not self.show_progress, desc="loss attack")
        with progress:
            if self.threads > 1:
                with ThreadPoolExecutor(max_workers=self.threads) as pool:
                    score_sets = []
                    for result in pool.map(score, step_values):
                        score_sets.append(result)
                        progress.update()
            else:
                score_sets = []
                for step in step_values:
                    score_sets.append(score(step))
                    progress.update()
        return StepProfile(steps=steps, score_sets=score_sets)


def loss_attack_scores(
    net: nn.Module,
    members,
    nonmembers,
    steps,
    schedule: NoiseSchedule,
    k_draws: int = 5,
    seed: int = 0,
    member_ids=None,
    nonmember_ids=None,
    threads: int = 1,
    show_progress: bool = False,
) -> StepProfile:
    """Per-step loss scores; sample ids default to each row's position within its own set."""
    attack = LossAttack(net, schedule, k_draws, seed, threads, show_progress)
    return attack.run(members, nonmembers, steps, member_ids, nonmember_ids)


def likelihood_attack_scores(
    net: nn.Module,
    members,
    nonmembers,
    schedule: NoiseSchedule,
    ode_config: OdeConfig,
    member_ids=None,
    nonmember_ids=None,
    threads: int = 1,
    show_progress: bool = False,
) -> AttackScoreSet:
    """Log-likelihood of every sample; high likelihood marks a member.

    Samples whose ODE solve does not converge are left out and counted in the
    metadata. Per-sample records (nats, bits/dim, evaluations) go to metadata["records"].
    """
    members, nonmembers = as_tensor(members), as_tensor(nonmembers)
    if members.shape[0] == 0 or nonmembers.shape[0] == 0:
        raise ContractError(
            f"likelihood attack needs members and nonmembers, got {members.shape[0]} and {nonmembers.shape[0]}"
        )
    member_ids = np.arange(members.shape[0]) if member_ids is None else np.asarray(member_ids)
    nonmember_ids = np.arange(nonmembers.shape[0]) if nonmember_ids is None else np.asarray(nonmember_ids)
    # Create one task per sample, members first
    estimator = LikelihoodEstimator(net, schedule, ode_config)
    tasks = [(True, int(i), x) for i, x in zip(member_ids, members)]
    tasks += [(False, int(i), x) for i, x in zip(nonmember_ids, nonmembers)]
    logger.info(f"Likelihood attack on {members.shape[0]} members / {nonmembers.shape[0]} nonmembers")

    def evaluate(task):
        _, sample_id, x = task
        try:
            return estimator.log_likelihood(x, sample_id)
        except ConvergenceError as e:
            logger.warning(f"Sample {sample_id} excluded: {e}")
            return None

    # Solve every sample's ODE
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(tqdm(pool.map(evaluate, tasks), total=len(tasks), disable=not show_progress, desc="likelihood"))
    else:
        results = [evaluate(task) for task in tqdm(tasks, disable=not show_progress, desc="likelihood")]

    # Split converged scores by membership
    records, excluded = [], []
    scores = {True: ([], []), False: ([], [])}
    for (is_member, sample_id, _), result in zip(tasks, results):
        if result is None:
            excluded.append(sample_id)
            continue
        scores[is_member][0].append(result.log_likelihood)
        scores[is_member][1].append(sample_id)
        records.append(
            {
                "sample_id": sample_id,
                "is_member": is_member,
                "log_likelihood": result.log_likelihood,
                "bits_per_dim": result.bits_per_dim,
                "nfev": result.nfev,
            }
        )

    if records:
        mean_nfev = sum(r["nfev"] for r in records) / len(records)
        logger.info(f"Likelihood attack done: {len(excluded)} excluded, {mean_nfev:.1f} drift evaluations per sample")
    return AttackScoreSet(
        member_scores=scores[True][0],
        nonmember_scores=scores[False][0],
        orientation=Orientation.HIGHER_IS_MEMBER,
        provenance=Provenance.LIKELIHOOD,
        member_ids=scores[True][1],
        nonmember_ids=scores[False][1],
        metadata={
            "excluded": len(excluded),
            "excluded_ids": excluded,
            "counterpart": continuous_view(schedule).kind.value,
            "records": records,
        },
    )


def decide(score: float, threshold: float, orientation: Orientation) -> bool:
    """Member iff the score is strictly past the threshold; ties are nonmember."""
    if Orientation(orientation) == Orientation.LOWER_IS_MEMBER:
        return score < threshold
    return score > threshold
