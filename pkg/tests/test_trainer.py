import math

import pytest
import torch

from autodiff import DTYPE
from config import DpConfig, TrainConfig
from conftest import PointOracle, ZeroNetwork, points
from dataset import generate_dataset
from errors import ContractError, DivergenceError, KindError, RangeError
from score_network import ParamKind, ScoreNetwork
from trainer import DiffusionTrainer, denoising_loss, loss_ddpm, loss_sde, loss_smld


def test_losses_vanish_for_the_exact_denoiser(ddpm_schedule, smld_schedule, vp_schedule, ve_schedule):
    x0 = torch.tensor([[0.7, -1.3]], dtype=DTYPE)
    eps = torch.tensor([[0.4, 2.0]], dtype=DTYPE)
    cases = [
        (ddpm_schedule, ParamKind.EPSILON, 250),
        (smld_schedule, ParamKind.SCORE, 250),
        (vp_schedule, ParamKind.EPSILON, 0.25),
        (ve_schedule, ParamKind.SCORE, 0.25),
    ]
    for schedule, param_kind, t in cases:
        oracle = PointOracle(schedule, x0, param_kind)
        assert float(denoising_loss(oracle, x0, t, eps, schedule)) == pytest.approx(0.0, abs=1e-18)


def test_zero_network_losses_reduce_to_noise_norm(ddpm_schedule, smld_schedule, vp_schedule):
    x0 = points(4)
    eps = points(4, seed=1)
    expected = torch.sum(eps**2, dim=-1)
    assert torch.allclose(loss_ddpm(ZeroNetwork(), x0, 10, eps, ddpm_schedule), expected)
    assert torch.allclose(loss_smld(ZeroNetwork(ParamKind.SCORE), x0, 10, eps, smld_schedule), expected)
    assert torch.allclose(loss_sde(ZeroNetwork(), x0, 0.5, eps, vp_schedule), expected)


def test_sde_loss_guards(ddpm_schedule, vp_schedule):
    x0, eps = points(2), points(2, seed=1)
    with pytest.raises(KindError):
        loss_sde(ZeroNetwork(), x0, 10, eps, ddpm_schedule)
    with pytest.raises(RangeError):
        loss_sde(ZeroNetwork(), x0, 1e-7, eps, vp_schedule)


def _members(n: int = 16) -> torch.Tensor:
    return torch.from_numpy(generate_dataset("ring8", n, 4, seed=0).members)


def test_training_lowers_the_denoising_loss(ddpm_schedule):
    config = TrainConfig(steps=400, batch_size=16, learning_rate=1e-3, log_every=50)
    net = ScoreNetwork(hidden_dims=[32, 32], seed=0)
    result = DiffusionTrainer(config, ddpm_schedule).train(net, _members())
    history = result.history
    assert list(history.columns) == ["step", "mean_loss"]
    assert history.step.tolist() == list(range(50, 401, 50))
    assert history.mean_loss.iloc[-1] < history.mean_loss.iloc[0]
    assert result.metadata["dp"] is False


def test_training_is_deterministic_per_seed(vp_schedule):
    config = TrainConfig(steps=15, batch_size=8, log_every=5)
    nets = [ScoreNetwork(hidden_dims=[8], seed=1) for _ in range(2)]
    for net in nets:
        DiffusionTrainer(config, vp_schedule).train(net, _members())
    for a, b in zip(nets[0].parameters(), nets[1].parameters()):
        assert torch.equal(a, b)


def test_training_contracts(ddpm_schedule):
    trainer = DiffusionTrainer(TrainConfig(steps=1, batch_size=32), ddpm_schedule)
    with pytest.raises(ContractError):
        trainer.train(ScoreNetwork(hidden_dims=[4]), _members(16))
    with pytest.raises(ContractError):
        trainer.train(ScoreNetwork(hidden_dims=[4]), torch.empty(0, 2, dtype=DTYPE))


def test_non_finite_loss_reports_the_step(ddpm_schedule):
    net = ScoreNetwork(hidden_dims=[4])
    with torch.no_grad():
        net.layers[-1].bias.fill_(float("nan"))
    with pytest.raises(DivergenceError) as excinfo:
        DiffusionTrainer(TrainConfig(steps=5, batch_size=4), ddpm_schedule).train(net, _members())
    assert excinfo.value.step == 1


def _dp_setup(schedule, noise_multiplier: float, clip_bound: float = 1.0, threads: int = 1):
    config = TrainConfig(
        steps=3,
        batch_size=8,
        dp=DpConfig(enabled=True, clip_bound=clip_bound, noise_multiplier=noise_multiplier),
    )
    trainer = DiffusionTrainer(config, schedule, threads=threads)
    net = ScoreNetwork(hidden_dims=[8, 8], seed=5)
    with torch.no_grad():
        net.layers[-1].weight.fill_(0.3)
    batch = _members()[:8]
    generator = torch.Generator().manual_seed(0)
    t = torch.randint(0, schedule.num_steps, (8,), generator=generator)
    eps = torch.randn(8, 2, generator=generator, dtype=DTYPE)
    return trainer, net, batch, t, eps


def test_dp_step_clips_every_per_sample_gradient(ddpm_schedule):
    trainer, net, batch, t, eps = _dp_setup(ddpm_schedule, noise_multiplier=1.0, clip_bound=0.05)
    optimizer = trainer.make_optimizer(net)
    result = trainer.dp_train_step(net, optimizer, batch, t, eps, torch.Generator().manual_seed(1))
    assert torch.all(result.clipped_norms <= 0.05 * (1 + 1e-12))
    assert not torch.allclose(result.clean_grad, result.noised_grad)


def test_dp_step_without_noise_is_the_clipped_mean(ddpm_schedule):
    trainer, net, batch, t, eps = _dp_setup(ddpm_schedule, noise_multiplier=0.0, clip_bound=1e6)
    _, grads = trainer.per_sample_gradients(net, batch, t, eps)
    optimizer = trainer.make_optimizer(net)
    result = trainer.dp_train_step(net, optimizer, batch, t, eps, torch.Generator().manual_seed(1))
    assert torch.allclose(result.noised_grad, result.clean_grad)
    assert torch.allclose(result.clean_grad, grads.mean(dim=0))


def test_per_sample_gradients_do_not_depend_on_threads(ddpm_schedule):
    serial, net, batch, t, eps = _dp_setup(ddpm_schedule, noise_multiplier=1.0)
    threaded, _, _, _, _ = _dp_setup(ddpm_schedule, noise_multiplier=1.0, threads=4)
    losses_a, grads_a = serial.per_sample_gradients(net, batch, t, eps)
    losses_b, grads_b = threaded.per_sample_gradients(net, batch, t, eps)
    assert torch.equal(losses_a, losses_b)
    assert torch.equal(grads_a, grads_b)


def test_dp_training_records_its_parameters(ddpm_schedule):
    config = TrainConfig(
        steps=4, batch_size=8, log_every=2, dp=DpConfig(enabled=True, clip_bound=1.0, noise_multiplier=1.0)
    )
    result = DiffusionTrainer(config, ddpm_schedule).train(ScoreNetwork(hidden_dims=[8]), _members())
    assert result.metadata["dp"] is True
    assert result.metadata["dp_params"]["clip_bound"] == 1.0
    assert 0.0 <= result.metadata["max_clipped_norm"] <= 1.0 + 1e-12


def test_dp_step_requires_dp_enabled(ddpm_schedule):
    trainer = DiffusionTrainer(TrainConfig(steps=1, batch_size=2), ddpm_schedule)
    net = ScoreNetwork(hidden_dims=[4])
    with pytest.raises(ContractError):
        trainer.dp_train_step(
            net, trainer.make_optimizer(net), points(2), torch.tensor([1, 2]), points(2), torch.Generator()
        )


def test_dp_noise_matches_its_theoretical_scale(ddpm_schedule):
    trainer, net, batch, t, eps = _dp_setup(ddpm_schedule, noise_multiplier=1.0, clip_bound=1.0)
    optimizer = torch.optim.SGD(net.parameters(), lr=0.0)
    dim = sum(p.numel() for p in net.parameters())
    norms = []
    for rep in range(1000):
        result = trainer.dp_train_step(net, optimizer, batch, t, eps, torch.Generator().manual_seed(rep))
        norms.append(float(torch.linalg.vector_norm(result.noised_grad - result.clean_grad)))
    norms = torch.tensor(norms, dtype=DTYPE)
    expected = 1.0 * 1.0 * math.sqrt(dim) / batch.shape[0]
    standard_error = float(norms.std()) / math.sqrt(norms.numel())
    assert abs(float(norms.mean()) - expected) <= 5 * standard_error


@pytest.mark.parametrize("dp", [DpConfig(), DpConfig(enabled=True, clip_bound=1.0, noise_multiplier=1.0)])
def test_zero_learning_rate_leaves_the_parameters_unchanged(ddpm_schedule, dp):
    config = TrainConfig(steps=6, batch_size=8, learning_rate=0.0, log_every=3, dp=dp)
    net = ScoreNetwork(hidden_dims=[8], seed=2)
    before = [p.detach().clone() for p in net.parameters()]
    DiffusionTrainer(config, ddpm_schedule).train(net, _members())
    for old, new in zip(before, net.parameters()):
        assert torch.equal(old, new)


def test_training_metadata_names_the_dataset(ddpm_schedule):
    config = TrainConfig(steps=2, batch_size=4, log_every=1)
    members = generate_dataset("ring8", 16, 4, seed=0)
    result = DiffusionTrainer(config, ddpm_schedule).train(
        ScoreNetwork(hidden_dims=[4]), torch.from_numpy(members.members), dataset_fingerprint=members.fingerprint()
    )
    assert result.metadata["dataset_fingerprint"] == members.fingerprint()
    assert result.metadata["seed"] == 0
