import math

import pytest
import torch

from autodiff import DTYPE
from config import OdeConfig
from conftest import GaussianOracle, ddpm_network_time_to_vp, points
from errors import ConvergenceError, RangeError, ShapeError
from likelihood import (
    LikelihoodEstimator,
    divergence_estimate,
    draw_probes,
    hutchinson_divergence,
    log_likelihood,
    pf_drift,
)
from schedules import DiscreteSchedule
from score_network import ParamKind

A = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=DTYPE)


def gaussian_logpdf(x: torch.Tensor, var: float) -> float:
    dim = x.shape[-1]
    return -0.5 * dim * math.log(2 * math.pi * var) - float(x @ x) / (2 * var)


def test_rademacher_pair_gives_the_exact_trace():
    probes = torch.tensor([[1.0, 1.0], [1.0, -1.0]], dtype=DTYPE)
    fx, divergence = divergence_estimate(lambda y: y @ A.T, torch.tensor([0.3, 0.7], dtype=DTYPE), probes)
    assert float(divergence) == pytest.approx(5.0, abs=1e-12)
    assert torch.allclose(fx, torch.tensor([0.3, 0.7], dtype=DTYPE) @ A.T)


def test_divergence_of_the_identity_is_the_dimension():
    probes = draw_probes((3,), 4, "gaussian", torch.Generator().manual_seed(0))
    _, divergence = divergence_estimate(lambda y: y * 1.0, torch.zeros(3, dtype=DTYPE), probes)
    expected = float(torch.mean(torch.sum(probes**2, dim=-1)))
    assert float(divergence) == pytest.approx(expected, rel=1e-12)


def test_divergence_of_batched_rows_stays_per_row():
    x = torch.tensor([[1.0, 2.0], [0.5, -1.0]], dtype=DTYPE)
    probes = draw_probes((2, 2), 3, "rademacher", torch.Generator().manual_seed(1))
    fx, divergence = divergence_estimate(lambda y: y**3, x, probes)
    assert fx.shape == (2, 2)
    # Rademacher probes recover a diagonal Jacobian's trace exactly.
    assert divergence.tolist() == pytest.approx([3.0 + 12.0, 0.75 + 3.0], rel=1e-12)


def test_divergence_rejects_mismatched_probes():
    with pytest.raises(ShapeError):
        divergence_estimate(lambda y: y, torch.zeros(2, dtype=DTYPE), torch.ones(3, 3, dtype=DTYPE))


def test_hutchinson_estimator_is_unbiased():
    generator = torch.Generator().manual_seed(2024)
    for _ in range(20):
        matrix = torch.randn(3, 3, generator=generator, dtype=DTYPE)
        estimates = []
        for _ in range(1000):
            probes = draw_probes((3,), 1, "gaussian", generator)
            estimates.append(float(divergence_estimate(lambda y: y @ matrix.T, torch.zeros(3, dtype=DTYPE), probes)[1]))
        estimates = torch.tensor(estimates, dtype=DTYPE)
        standard_error = float(estimates.std()) / math.sqrt(len(estimates))
        assert abs(float(estimates.mean()) - float(torch.trace(matrix))) <= 4 * standard_error


def test_pf_drift_vanishes_for_standard_gaussian_data(vp_schedule):
    oracle = GaussianOracle(vp_schedule, 1.0, ParamKind.EPSILON)
    x = points(3)
    assert torch.allclose(pf_drift(oracle, x, 0.4, vp_schedule), torch.zeros_like(x), atol=1e-12)
    with pytest.raises(RangeError):
        pf_drift(oracle, x, 1e-7, vp_schedule)


def test_hutchinson_divergence_of_the_probability_flow(vp_schedule):
    data_var = 0.25
    oracle = GaussianOracle(vp_schedule, data_var, ParamKind.EPSILON)
    t = 0.3
    stats = vp_schedule.marginal_stats(t)
    beta = float(vp_schedule.beta(t))
    var = stats.mean_coef**2 * data_var + stats.std**2
    probes = draw_probes((1, 2), 2, "rademacher", torch.Generator().manual_seed(0))
    divergence = hutchinson_divergence(oracle, torch.tensor([[0.2, -0.4]], dtype=DTYPE), t, vp_schedule, probes)
    assert float(divergence[0]) == pytest.approx(2 * (-0.5 * beta + 0.5 * beta / var), rel=1e-10)


@pytest.mark.parametrize("data_var", [1.0, 0.25])
def test_likelihood_matches_the_closed_form_gaussian_density(vp_schedule, data_var):
    oracle = GaussianOracle(vp_schedule, data_var, ParamKind.EPSILON)
    estimator = LikelihoodEstimator(oracle, vp_schedule, OdeConfig())
    for i, x in enumerate(points(50, seed=7, scale=math.sqrt(data_var))):
        result = estimator.log_likelihood(x, sample_index=i)
        assert result.log_likelihood == pytest.approx(gaussian_logpdf(x, data_var), abs=1e-2)
        assert result.bits_per_dim == pytest.approx(-result.log_likelihood / (2 * math.log(2)))
        assert result.nfev > 0


def test_discrete_models_use_their_continuous_counterpart():
    schedule = DiscreteSchedule.ddpm(1000)
    counterpart = schedule.continuous_counterpart()
    oracle = GaussianOracle(counterpart, 1.0, ParamKind.EPSILON, ddpm_network_time_to_vp(schedule))
    x = torch.tensor([0.4, -0.9], dtype=DTYPE)
    value = log_likelihood(oracle, x, schedule, OdeConfig())
    assert value == pytest.approx(gaussian_logpdf(x, 1.0), abs=1e-2)


def test_likelihood_is_deterministic_per_sample(vp_schedule):
    oracle = GaussianOracle(vp_schedule, 0.25, ParamKind.EPSILON)
    config = OdeConfig(probe_dist="gaussian", n_probes=1)
    x = torch.tensor([0.1, 0.3], dtype=DTYPE)
    assert log_likelihood(oracle, x, vp_schedule, config, 5) == log_likelihood(oracle, x, vp_schedule, config, 5)


def test_step_budget_raises_convergence_error(vp_schedule):
    oracle = GaussianOracle(vp_schedule, 0.25, ParamKind.EPSILON)
    with pytest.raises(ConvergenceError):
        log_likelihood(oracle, torch.tensor([0.1, 0.3], dtype=DTYPE), vp_schedule, OdeConfig(max_steps=3))


def test_tighter_tolerances_barely_move_the_likelihood(vp_schedule):
    oracle = GaussianOracle(vp_schedule, 0.25, ParamKind.EPSILON)
    loose = LikelihoodEstimator(oracle, vp_schedule, OdeConfig(rtol=1e-3, atol=1e-3, n_probes=2))
    tight = LikelihoodEstimator(oracle, vp_schedule, OdeConfig(rtol=1e-6, atol=1e-6, n_probes=2))
    for i, x in enumerate(points(20, seed=11, scale=0.5)):
        coarse = loose.log_likelihood(x, sample_index=i).log_likelihood
        fine = tight.log_likelihood(x, sample_index=i).log_likelihood
        assert abs(coarse - fine) < 1e-2


def test_more_probes_shrink_the_estimator_variance(vp_schedule):
    oracle = GaussianOracle(vp_schedule, 0.25, ParamKind.EPSILON)
    x = torch.tensor([0.3, -0.6], dtype=DTYPE)
    variances = []
    for n_probes in (1, 8, 64):
        values = [
            log_likelihood(
                oracle,
                x,
                vp_schedule,
                OdeConfig(rtol=1e-4, atol=1e-4, n_probes=n_probes, probe_dist="gaussian", seed=seed),
            )
            for seed in range(20)
        ]
        variances.append(float(torch.tensor(values, dtype=DTYPE).var()))
    assert variances[0] > variances[1] > variances[2]
    assert variances[2] / variances[0] < 0.1
