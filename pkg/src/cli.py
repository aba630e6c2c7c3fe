"""diffaudit command line: dataset generation, training, both attacks, sampling and reports."""

import functools
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import click
import numpy as np
import torch

import artifacts
from attacks import attack_steps, likelihood_attack_scores, loss_attack_scores
from config import RunConfig, resolve_config
from dataset import generate_dataset
from errors import ArtifactNotFoundError, AuditError, ContractError
from metrics import frechet_distance, roc
from report import (
    SummaryRow,
    best_step,
    profile_reports,
    render_summary,
    report_steps,
    step_label,
    tpr_vs_step,
)
from sampler import DiffusionSampler
from score_network import Checkpoint, ScoreNetwork, default_param_kind
from trainer import DiffusionTrainer
from utils.helper import prepare_output_dir
from utils.logger import setup_logger

logger = logging.getLogger(__name__)

OUTPUT_ENV = "DIFFAUDIT_OUTPUT_ROOT"

DATASET_FILE = "dataset.csv"
CHECKPOINT_FILE = "checkpoint.yaml"
HISTORY_FILE = "loss_history.csv"
LOSS_SCORES_FILE = "scores_loss.csv"
LOSS_PROFILE_FILE = "loss_profile.csv"
LIKELIHOOD_SCORES_FILE = "scores_likelihood.csv"
SAMPLES_FILE = "samples.csv"
QUALITY_FILE = "quality.yaml"
REPORT_DIR = "report"
RUN_CONFIG_FILE = "run_config.yaml"


@dataclass
class CliState:
    config_path: Path | None
    overrides: tuple[str, ...]
    output_dir: Path
    threads: int | None
    show_progress: bool | None
    resolved: RunConfig | None = None

    def resolve(self, flags: dict | None = None) -> RunConfig:
        """Resolve the run config; a run directory's own run_config.yaml is the base when no --config is given."""
        base = self.config_path
        if base is None and (self.output_dir / RUN_CONFIG_FILE).is_file():
            base = self.output_dir / RUN_CONFIG_FILE
        flags = dict(flags or {})
        flags["runtime.threads"] = self.threads
        flags["runtime.show_progress"] = self.show_progress
        config = resolve_config(base, self.overrides, flags)
        prepare_output_dir(self.output_dir)
        setup_logger(self.output_dir / "logs")
        self.resolved = config
        click.echo(f"# resolved config (fingerprint {config.fingerprint()})")
        click.echo(config.to_yaml().rstrip())
        return config

    def commit(self) -> None:
        """Persist the resolved config once a command has finished without errors."""
        if self.resolved is not None:
            artifacts.write_run_config(self.output_dir, self.resolved)

    def path(self, name: str) -> Path:
        return self.output_dir / name


def audit_command(func):
    """Turn toolkit errors into one `error: <Class>: <message>` line and the class's exit code."""

    @functools.wraps(func)
    def wrapper(state: CliState, *args, **kwargs):
        try:
            result = func(state, *args, **kwargs)
            state.commit()
            return result
        except AuditError as e:
            logger.error(f"{type(e).__name__}: {e}")
            click.echo(f"error: {type(e).__name__}: {e}", err=True)
            sys.exit(e.exit_code)

    return wrapper


def _expect(config: RunConfig, kind: str, header: dict) -> None:
    artifacts.check_fingerprints(config.stage_fingerprint(kind), header)


def _load_dataset(state: CliState, config: RunConfig):
    dataset, header = artifacts.load_dataset(state.path(DATASET_FILE))
    _expect(config, "dataset", header)
    return dataset


def _load_network(state: CliState, config: RunConfig) -> tuple[ScoreNetwork, Checkpoint]:
    checkpoint, header = artifacts.load_checkpoint(state.path(CHECKPOINT_FILE))
    _expect(config, "checkpoint", header)
    return checkpoint.build_network(), checkpoint


@click.group()
@click.option(
    "--config",
    "config_path",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="Run config YAML (default: the run directory's run_config.yaml, else config/config.yaml).",
)
@click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE", help="Override one config field.")
@click.option(
    "--output",
    "output_dir",
    type=click.Path(file_okay=False, path_type=Path),
    envvar=OUTPUT_ENV,
    default="outputs",
    show_default=True,
    help=f"Run directory (env: {OUTPUT_ENV}).",
)
@click.option("--threads", type=click.IntRange(min=1), default=None, help="Cap on worker threads.")
@click.option("--progress/--no-progress", "show_progress", default=None, help="Show progress bars.")
@click.pass_context
def cli(ctx, config_path, overrides, output_dir, threads, show_progress):
    """Membership-inference auditing for diffusion models on toy data."""
    ctx.obj = CliState(
        config_path=config_path,
        overrides=tuple(overrides),
        output_dir=Path(output_dir),
        threads=threads,
        show_progress=show_progress,
    )


@cli.command("gen-data")
@click.option("--generator", type=click.Choice(["ring8", "moons", "spiral", "gauss_grid"]), default=None)
@click.option("--n-members", type=int, default=None)
@click.option("--n-nonmembers", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.pass_obj
@audit_command
def gen_data(state: CliState, generator, n_members, n_nonmembers, seed):
    """Generate the toy dataset and its member/nonmember split."""
    config = state.resolve(
        {"data.generator": generator, "data.n_members": n_members, "data.n_nonmembers": n_nonmembers, "data.seed": seed}
    )
    data = config.data
    dataset = generate_dataset(data.generator, data.n_members, data.n_nonmembers, data.seed)
    path = artifacts.save_dataset(state.path(DATASET_FILE), dataset, config.stage_fingerprint("dataset"))
    click.echo(f"dataset written to {path}")


@cli.command("train")
@click.option("--kind", type=click.Choice(["ddpm", "smld", "vpsde", "vesde"]), default=None)
@click.option("--steps", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--learning-rate", type=float, default=None)
@click.option("--dp/--no-dp", "dp_enabled", default=None, help="Train with DP-SGD.")
@click.option("--clip-bound", type=float, default=None)
@click.option("--noise-multiplier", type=float, default=None)
@click.pass_obj
@audit_command
def train(state: CliState, kind, steps, batch_size, learning_rate, dp_enabled, clip_bound, noise_multiplier):
    """Train a score network on the member set."""
    config = state.resolve(
        {
            "model.kind": kind,
            "train.steps": steps,
            "train.batch_size": batch_size,
            "train.learning_rate": learning_rate,
            "train.dp.enabled": dp_enabled,
            "train.dp.clip_bound": clip_bound,
            "train.dp.noise_multiplier": noise_multiplier,
        }
    )
    dataset = _load_dataset(state, config)
    schedule = config.build_schedule()
    model = config.model
    net = ScoreNetwork(
        data_dim=dataset.dim,
        hidden_dims=model.hidden_dims,
        time_embed_width=model.time_embed_width,
        param_kind=default_param_kind(model.kind),
        min_frequency=model.min_frequency,
        max_frequency=model.max_frequency,
        seed=model.seed,
    )
    trainer = DiffusionTrainer(config.train, schedule, config.runtime.threads, config.runtime.show_progress)
    result = trainer.train(net, torch.from_numpy(dataset.members), dataset_fingerprint=dataset.fingerprint())

    fingerprint = config.stage_fingerprint("checkpoint")
    checkpoint = Checkpoint.from_network(result.net, schedule, result.metadata)
    artifacts.save_checkpoint(state.path(CHECKPOINT_FILE), checkpoint, fingerprint)
    artifacts.save_loss_history(state.path(HISTORY_FILE), result.history, fingerprint)
    click.echo(f"checkpoint written to {state.path(CHECKPOINT_FILE)}")


@cli.command("attack-loss")
@click.option("--k-draws", type=int, default=None)
@click.option("--step-mode", type=click.Choice(["grid", "random"]), default=None)
@click.option("--stride", "discrete_stride", type=int, default=None, help="Attack every n-th discrete step.")
@click.pass_obj
@audit_command
def attack_loss(state: CliState, k_draws, step_mode, discrete_stride):
    """Score members and nonmembers by denoising loss at every attacked step."""
    config = state.resolve(
        {"attack.k_draws": k_draws, "attack.step_mode": step_mode, "attack.discrete_stride": discrete_stride}
    )
    dataset = _load_dataset(state, config)
    net, _ = _load_network(state, config)
    schedule = config.build_schedule()
    attack = config.attack
    profile = loss_attack_scores(
        net,
        torch.from_numpy(dataset.members),
        torch.from_numpy(dataset.nonmembers),
        attack_steps(schedule, attack),
        schedule,
        k_draws=attack.k_draws,
        seed=attack.seed,
        member_ids=dataset.member_indices,
        nonmember_ids=dataset.nonmember_indices,
        threads=config.runtime.threads,
        show_progress=config.runtime.show_progress,
    )

    fingerprint = config.stage_fingerprint("loss_scores")
    artifacts.save_loss_scores(state.path(LOSS_SCORES_FILE), profile, fingerprint, config.model.kind)
    reports = profile_reports(profile, config.report.fpr_levels)
    summary = tpr_vs_step(profile, reports, config.report.fpr_levels)
    summary.insert(1, "member_mean", [s.member_scores.mean() for s in profile.score_sets])
    summary.insert(2, "nonmember_mean", [s.nonmember_scores.mean() for s in profile.score_sets])
    artifacts.write_table(state.path(LOSS_PROFILE_FILE), summary, "loss_profile", fingerprint)

    step, report = best_step(profile, reports)
    click.echo(f"loss attack over {len(profile)} steps; best step {step_label(step)} with AUC {report.auc:.4f}")


@cli.command("attack-likelihood")
@click.option("--n-probes", type=int, default=None)
@click.option("--probe-dist", type=click.Choice(["rademacher", "gaussian"]), default=None)
@click.pass_obj
@audit_command
def attack_likelihood(state: CliState, n_probes, probe_dist):
    """Score members and nonmembers by probability-flow log-likelihood."""
    config = state.resolve({"ode.n_probes": n_probes, "ode.probe_dist": probe_dist})
    dataset = _load_dataset(state, config)
    net, _ = _load_network(state, config)
    score_set = likelihood_attack_scores(
        net,
        torch.from_numpy(dataset.members),
        torch.from_numpy(dataset.nonmembers),
        config.build_schedule(),
        config.ode,
        member_ids=dataset.member_indices,
        nonmember_ids=dataset.nonmember_indices,
        threads=config.runtime.threads,
        show_progress=config.runtime.show_progress,
    )
    artifacts.save_likelihood_scores(
        state.path(LIKELIHOOD_SCORES_FILE), score_set, config.stage_fingerprint("likelihood_scores")
    )
    click.echo(
        f"likelihood attack: AUC {roc(score_set, config.report.fpr_levels).auc:.4f}, "
        f"{score_set.metadata['excluded']} sample(s) excluded"
    )


@cli.command("sample")
@click.option("--n-samples", type=int, default=None)
@click.pass_obj
@audit_command
def sample(state: CliState, n_samples):
    """Draw samples from the trained model and measure their Fréchet distance to the members."""
    config = state.resolve({"sampler.n_samples": n_samples})
    dataset = _load_dataset(state, config)
    net, _ = _load_network(state, config)
    sampler = DiffusionSampler(net, config.build_schedule(), config.sampler, config.runtime.show_progress)
    samples = sampler.generate(dataset.dim).numpy()

    fingerprint = config.stage_fingerprint("samples")
    artifacts.save_samples(state.path(SAMPLES_FILE), samples, fingerprint)
    if samples.shape[0] < dataset.dim + 1:
        raise ContractError(f"{samples.shape[0]} samples are too few for a Fréchet distance")
    distance = frechet_distance(samples, dataset.members)
    artifacts.save_quality(
        state.path(QUALITY_FILE),
        {"frechet_distance": distance, "n_samples": int(samples.shape[0]), "n_members": int(dataset.members.shape[0])},
        config.stage_fingerprint("quality"),
    )
    click.echo(f"Fréchet distance (generated vs members): {distance:.6g}")


@cli.command("report")
@click.pass_obj
@audit_command
def report(state: CliState):
    """ROC exports, the summary table and the TPR-vs-step table from the attack scores."""
    config = state.resolve()
    levels = config.report.fpr_levels
    schedule = config.build_schedule()
    report_dir = prepare_output_dir(state.path(REPORT_DIR))
    fingerprint = config.stage_fingerprint("roc")
    rows, best = [], None

    # Collect whichever attack scores exist
    loss_path = state.path(LOSS_SCORES_FILE)
    likelihood_path = state.path(LIKELIHOOD_SCORES_FILE)
    if not loss_path.is_file() and not likelihood_path.is_file():
        raise ArtifactNotFoundError(f"no attack scores in {state.output_dir}; run attack-loss or attack-likelihood first")

    # Per-step loss attack: TPR table and ROC exports at the report steps
    if loss_path.is_file():
        profile, header = artifacts.load_loss_scores(loss_path)
        _expect(config, "loss_scores", header)
        reports = profile_reports(profile, levels)
        artifacts.write_table(
            report_dir / "tpr_vs_step.csv", tpr_vs_step(profile, reports, levels), "tpr_vs_step", fingerprint
        )
        for step in report_steps(schedule, profile, config.report):
            index = int(np.flatnonzero(profile.steps == step)[0])
            label = step_label(step)
            artifacts.save_roc(report_dir / f"roc_loss_t{label}.csv", reports[index], fingerprint, attack="loss", step=step)
            rows.append(SummaryRow(attack="loss", step=label, report=reports[index]))
        best = best_step(profile, reports)

    # Likelihood attack: one ROC for the whole run
    if likelihood_path.is_file():
        score_set, header = artifacts.load_likelihood_scores(likelihood_path)
        _expect(config, "likelihood_scores", header)
        likelihood_report = roc(score_set, levels)
        artifacts.save_roc(report_dir / "roc_likelihood.csv", likelihood_report, fingerprint, attack="likelihood")
        rows.append(SummaryRow(attack="likelihood", step="-", report=likelihood_report))

    # Sample quality and DP record, when available
    quality = None
    if state.path(QUALITY_FILE).is_file():
        quality = artifacts.load_quality(state.path(QUALITY_FILE))
        _expect(config, "quality", quality)

    dp_record = None
    if state.path(CHECKPOINT_FILE).is_file():
        checkpoint, header = artifacts.load_checkpoint(state.path(CHECKPOINT_FILE))
        _expect(config, "checkpoint", header)
        if checkpoint.metadata.get("dp"):
            dp_record = checkpoint.metadata

    summary = render_summary(rows, levels, config.fingerprint(), best=best, quality=quality, dp_record=dp_record)
    (report_dir / "summary.txt").write_text(summary)
    click.echo(summary, nl=False)


def main():
    cli(prog_name="diffaudit")


if __name__ == "__main__":
    main()
