"""Trend-level reproductions on overfit toy models. Run with `pytest -m slow`."""

import numpy as np
import pytest
import torch

from attacks import attack_steps, likelihood_attack_scores, loss_attack_scores
from config import AttackConfig, DpConfig, OdeConfig, SamplerConfig, TrainConfig
from dataset import generate_dataset
from metrics import frechet_distance, roc
from report import profile_reports
from sampler import generate
from schedules import DiscreteSchedule
from score_network import ScoreNetwork
from trainer import DiffusionTrainer

pytestmark = pytest.mark.slow

N_NONMEMBERS = 128
STRIDE = 10


def _train(n_members: int, dp: DpConfig | None = None, steps: int = 20000, batch_size: int = 64):
    schedule = DiscreteSchedule.ddpm(1000)
    dataset = generate_dataset("ring8", n_members, N_NONMEMBERS, seed=0)
    config = TrainConfig(steps=steps, batch_size=batch_size, learning_rate=1e-3, dp=dp or DpConfig())
    net = ScoreNetwork(hidden_dims=[128, 128, 128, 128], seed=7)
    result = DiffusionTrainer(config, schedule, threads=4).train(net, torch.from_numpy(dataset.members))
    return schedule, dataset, result


def _loss_profile(schedule, dataset, net, max_members: int = N_NONMEMBERS):
    steps = attack_steps(schedule, AttackConfig(discrete_stride=STRIDE))
    return loss_attack_scores(
        net,
        torch.from_numpy(dataset.members[:max_members]),
        torch.from_numpy(dataset.nonmembers),
        steps,
        schedule,
        k_draws=5,
        member_ids=dataset.member_indices[:max_members],
        nonmember_ids=dataset.nonmember_indices,
        threads=4,
    )


def _best_auc(profile) -> float:
    return max(report.auc for report in profile_reports(profile, [0.1]))


@pytest.fixture(scope="module")
def overfit_model():
    return _train(64)


def test_privacy_risk_peaks_at_low_noise_steps(overfit_model):
    schedule, dataset, result = overfit_model
    profile = _loss_profile(schedule, dataset, result.net)
    aucs = np.array([report.auc for report in profile_reports(profile, [0.1])])
    low = aucs[profile.steps < schedule.num_steps / 3]
    high = aucs[profile.steps >= 2 * schedule.num_steps / 3]
    final_step = loss_attack_scores(
        result.net,
        torch.from_numpy(dataset.members),
        torch.from_numpy(dataset.nonmembers),
        [schedule.num_steps - 1],
        schedule,
        member_ids=dataset.member_indices,
        nonmember_ids=dataset.nonmember_indices,
    )
    final = roc(final_step.score_sets[0]).auc
    assert low.max() >= 0.90
    assert final <= 0.60
    assert low.max() - high.max() >= 0.15


def test_likelihood_attack_separates_an_overfit_model(overfit_model):
    schedule, dataset, result = overfit_model
    scores = likelihood_attack_scores(
        result.net,
        torch.from_numpy(dataset.members),
        torch.from_numpy(dataset.nonmembers),
        schedule,
        OdeConfig(rtol=1e-4, atol=1e-4, n_probes=4),
        member_ids=dataset.member_indices,
        nonmember_ids=dataset.nonmember_indices,
        threads=4,
    )
    report = roc(scores)
    assert scores.metadata["counterpart"] == "vpsde"
    assert report.auc >= 0.85
    assert report.best_accuracy >= 0.80


def test_attack_weakens_as_the_training_set_grows(overfit_model):
    schedule, dataset, result = overfit_model
    aucs = [_best_auc(_loss_profile(schedule, dataset, result.net))]
    for n_members in (256, 1024):
        larger_schedule, larger_dataset, larger = _train(n_members)
        aucs.append(_best_auc(_loss_profile(larger_schedule, larger_dataset, larger.net)))
    assert aucs[0] - aucs[1] >= 0.02
    assert aucs[1] - aucs[2] >= 0.02


def test_dp_training_blunts_the_attack_at_a_utility_cost(overfit_model):
    schedule, dataset, plain = overfit_model
    dp_schedule, dp_dataset, private = _train(64, DpConfig(enabled=True, clip_bound=1.0, noise_multiplier=1.0))
    assert private.metadata["max_clipped_norm"] <= 1.0 + 1e-12

    plain_auc = _best_auc(_loss_profile(schedule, dataset, plain.net))
    private_auc = _best_auc(_loss_profile(dp_schedule, dp_dataset, private.net))
    assert plain_auc - private_auc >= 0.10

    sampler_config = SamplerConfig(n_samples=1000, seed=0)
    plain_fd = frechet_distance(generate(plain.net, schedule, sampler_config).numpy(), dataset.members)
    private_fd = frechet_distance(generate(private.net, dp_schedule, sampler_config).numpy(), dp_dataset.members)
    assert private_fd > plain_fd
