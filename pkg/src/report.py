"""Summary tables and per-step TPR exports built from ROC reports."""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from attacks import StepProfile
from config import ReportConfig
from metrics import RocReport, roc
from schedules import NoiseSchedule

logger = logging.getLogger(__name__)

FLOOR_MARK = "*"


def tpr_column(level: float) -> str:
    return f"tpr_at_{level:g}"


def percent_label(level: float) -> str:
    return f"TPR@{100 * level:g}%FPR"


@dataclass
class SummaryRow:
    attack: str
    step: str
    report: RocReport


def step_label(step) -> str:
    if step is None:
        return "-"
    if isinstance(step, (int, np.integer)):
        return str(int(step))
    return f"{float(step):.4f}"


def profile_reports(profile: StepProfile, fpr_levels) -> list[RocReport]:
    return [roc(score_set, fpr_levels) for score_set in profile.score_sets]


def tpr_vs_step(profile: StepProfile, reports: list[RocReport], fpr_levels) -> pd.DataFrame:
    """One row per attacked step: step, auc, best_accuracy and TPR at each FPR level."""
    frame = pd.DataFrame(
        {
            "step": profile.steps,
            "auc": [r.auc for r in reports],
            "best_accuracy": [r.best_accuracy for r in reports],
        }
    )
    for level in fpr_levels:
        frame[tpr_column(level)] = [r.tpr_at_fpr[float(level)] for r in reports]
    return frame


def report_steps(schedule: NoiseSchedule, profile: StepProfile, config: ReportConfig) -> list:
    """Attacked steps to break out in the summary: the configured steps, snapped to the nearest attacked one."""
    targets = config.discrete_steps if schedule.is_discrete else config.continuous_times
    chosen = []
    for target in targets:
        step = profile.steps[int(np.argmin(np.abs(profile.steps - target)))]
        step = int(step) if schedule.is_discrete else float(step)
        if step not in chosen:
            chosen.append(step)
    return chosen


def best_step(profile: StepProfile, reports: list[RocReport]):
    index = int(np.argmax([r.auc for r in reports]))
    step = profile.steps[index]
    return (int(step) if np.issubdtype(profile.steps.dtype, np.integer) else float(step)), reports[index]


def format_rate(value: float, below_floor: bool) -> str:
    text = f"{100 * value:.2f}%"
    return f"{text}{FLOOR_MARK}" if below_floor else text


def summary_frame(rows: list[SummaryRow], fpr_levels) -> pd.DataFrame:
    records = []
    for row in rows:
        record = {"attack": row.attack, "step": row.step}
        for level in fpr_levels:
            record[percent_label(level)] = format_rate(row.report.tpr_at_fpr[float(level)], row.report.below_floor(level))
        record["accuracy"] = f"{100 * row.report.best_accuracy:.2f}%"
        record["AUC"] = f"{row.report.auc:.4f}"
        records.append(record)
    return pd.DataFrame.from_records(records)


def render_summary(
    rows: list[SummaryRow],
    fpr_levels,
    fingerprint: str,
    best: tuple | None = None,
    quality: dict | None = None,
    dp_record: dict | None = None,
) -> str:
    """Plain-text summary; deterministic for identical inputs."""
    lines = [f"config fingerprint: {fingerprint}", ""]
    if rows:
        lines.append(summary_frame(rows, fpr_levels).to_string(index=False))
    else:
        lines.append("no attack scores found")
    if best is not None:
        step, report = best
        lines += ["", f"loss attack best step: {step_label(step)} (AUC {report.auc:.4f}, accuracy {100 * report.best_accuracy:.2f}%)"]
    if quality is not None and "frechet_distance" in quality:
        lines.append(f"Fréchet distance (generated vs members): {quality['frechet_distance']:.6g}")
    if dp_record:
        params = dp_record.get("dp_params", {})
        lines.append(
            "DP-SGD: "
            + ", ".join(f"{key}={value}" for key, value in params.items())
            + f", max post-clip gradient norm={dp_record.get('max_clipped_norm', float('nan')):.6g}"
        )
    if any(row.report.below_floor(level) for row in rows for level in fpr_levels):
        floors = sorted({row.report.n_nonmembers for row in rows})
        lines += [
            "",
            f"{FLOOR_MARK} FPR level below the empirical resolution floor 1/n_nonmembers "
            f"(n_nonmembers = {', '.join(str(n) for n in floors)}); value is the TPR at zero false positives.",
        ]
    return "\n".join(lines) + "\n"
