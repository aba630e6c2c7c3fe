"""Reading and writing every file the pipeline produces.

Tables are CSV files led by a block of `# key: value` comment lines (a YAML
mapping with at least format_version, kind and config_fingerprint). The
checkpoint and the quality record are single YAML documents.
"""

import io
import logging
from pathlib import Path

import numpy as np
import pandas as pd
import torch
import yaml

from attacks import AttackScoreSet, Orientation, Provenance, StepProfile
from config import RunConfig
from dataset import Dataset
from errors import ArtifactNotFoundError, FingerprintMismatchError, SchemaError, VersionError
from metrics import RocReport
from schedules import ModelKind
from score_network import CHECKPOINT_VERSION, Checkpoint

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
FLOAT_FORMAT = "%.17g"


def _require(path: Path) -> None:
    if not path.is_file():
        logger.error(f"Missing artifact: {path}")
        raise ArtifactNotFoundError(f"no such file: {path}")


def write_table(path: str | Path, frame: pd.DataFrame, kind: str, fingerprint: str, **header) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format_version": FORMAT_VERSION, "kind": kind, "config_fingerprint": fingerprint, **header}
    header_text = yaml.safe_dump(meta, sort_keys=False, default_flow_style=None, width=10**6)
    with open(path, "w", newline="") as f:
        for line in header_text.splitlines():
            f.write(f"# {line}\n")
        frame.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.debug(f"Wrote {kind} table with {len(frame)} rows to {path}")
    return path


def read_table(path: str | Path, kind: str, columns: list[str]) -> tuple[dict, pd.DataFrame]:
    """(header, frame) of a table written by `write_table`, checked against kind, version and columns."""
    path = Path(path)
    _require(path)
    with open(path, "r") as f:
        lines = f.read().splitlines()
    header_lines = []
    for line in lines:
        if not line.startswith("#"):
            break
        header_lines.append(line[2:] if line.startswith("# ") else line[1:])

    try:
        header = yaml.safe_load("\n".join(header_lines)) or {}
    except yaml.YAMLError as e:
        raise SchemaError(f"{path}: unreadable header: {e}") from e
    if not isinstance(header, dict) or "format_version" not in header:
        raise SchemaError(f"{path}: missing format_version header")
    if header.get("kind") != kind:
        raise SchemaError(f"{path}: expected a {kind} table, found {header.get('kind')!r}")
    if header["format_version"] != FORMAT_VERSION:
        raise VersionError(kind, header["format_version"], FORMAT_VERSION)

    body = "\n".join(lines[len(header_lines):])
    try:
        frame = pd.read_csv(io.StringIO(body), float_precision="round_trip", keep_default_na=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise SchemaError(f"{path}: malformed table: {e}") from e
    missing = [column for column in columns if column not in frame.columns]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    return header, frame


def check_fingerprints(expected: str, *headers: dict) -> None:
    """Every artifact of one run must carry the same config fingerprint."""
    for header in headers:
        found = header.get("config_fingerprint")
        if found != expected:
            raise FingerprintMismatchError(
                f"{header.get('kind', 'artifact')} was produced under config {found}, expected {expected}"
            )


def write_run_config(output_dir: str | Path, config: RunConfig) -> Path:
    path = Path(output_dir) / "run_config.yaml"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(f"# config_fingerprint: {config.fingerprint()}\n{config.to_yaml()}")
    return path


# Dataset


def save_dataset(path: str | Path, dataset: Dataset, fingerprint: str) -> Path:
    split = np.full(dataset.points.shape[0], "", dtype=object)
    split[dataset.member_indices] = "member"
    split[dataset.nonmember_indices] = "nonmember"
    frame = pd.DataFrame(dataset.points, columns=[f"x{j}" for j in range(dataset.dim)])
    frame.insert(0, "sample_id", np.arange(dataset.points.shape[0]))
    frame["split"] = split
    frame["component"] = dataset.components
    return write_table(
        path,
        frame,
        "dataset",
        fingerprint,
        generator_name=dataset.generator_name,
        seed=dataset.seed,
        shift=[float(v) for v in dataset.shift],
        scale=[float(v) for v in dataset.scale],
        dataset_fingerprint=dataset.fingerprint(),
    )


def load_dataset(path: str | Path) -> tuple[Dataset, dict]:
    header, frame = read_table(path, "dataset", ["sample_id", "split", "component"])
    for key in ("generator_name", "seed", "shift", "scale"):
        if key not in header:
            raise SchemaError(f"{path}: dataset header lacks {key}")
    frame = frame.sort_values("sample_id")
    if not np.array_equal(frame["sample_id"].to_numpy(), np.arange(len(frame))):
        raise SchemaError(f"{path}: sample ids are not 0..n-1")
    coordinates = [column for column in frame.columns if column.startswith("x")]
    dataset = Dataset(
        points=frame[coordinates].to_numpy(dtype=np.float64),
        generator_name=header["generator_name"],
        seed=int(header["seed"]),
        member_indices=frame["sample_id"][frame["split"] == "member"].to_numpy(),
        nonmember_indices=frame["sample_id"][frame["split"] == "nonmember"].to_numpy(),
        components=frame["component"].to_numpy(),
        shift=header["shift"],
        scale=header["scale"],
    )
    return dataset, header


# Checkpoint


def save_checkpoint(path: str | Path, checkpoint: Checkpoint, fingerprint: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {
        "format_version": checkpoint.version,
        "kind": "checkpoint",
        "config_fingerprint": fingerprint,
        "model_kind": checkpoint.model_kind.value,
        "schedule": checkpoint.schedule_params,
        "network": checkpoint.network,
        "metadata": checkpoint.metadata,
        "weights": {
            name: {"shape": list(tensor.shape), "values": tensor.reshape(-1).tolist()}
            for name, tensor in checkpoint.weights.items()
        },
    }
    with open(path, "w") as f:
        yaml.safe_dump(document, f, sort_keys=False)
    logger.info(f"Saved checkpoint to {path}")
    return path


def load_checkpoint(path: str | Path) -> tuple[Checkpoint, dict]:
    path = Path(path)
    _require(path)
    try:
        with open(path, "r") as f:
            document = yaml.safe_load(f)
    except yaml.YAMLError as e:
        logger.error(f"Error parsing checkpoint {path}: {str(e)}")
        raise SchemaError(f"{path}: unreadable checkpoint: {e}") from e
    if not isinstance(document, dict) or document.get("kind") != "checkpoint":
        raise SchemaError(f"{path}: not a checkpoint document")
    if document.get("format_version") != CHECKPOINT_VERSION:
        raise VersionError("checkpoint", document.get("format_version"), CHECKPOINT_VERSION)
    try:
        weights = {
            name: torch.tensor(entry["values"], dtype=torch.float64).reshape(entry["shape"])
            for name, entry in document["weights"].items()
        }
        checkpoint = Checkpoint(
            model_kind=ModelKind(document["model_kind"]),
            schedule_params=document["schedule"],
            network=document["network"],
            weights=weights,
            metadata=document.get("metadata") or {},
            version=document["format_version"],
        )
    except (KeyError, TypeError, ValueError, RuntimeError) as e:
        raise SchemaError(f"{path}: malformed checkpoint: {e}") from e
    header = {key: document.get(key) for key in ("format_version", "kind", "config_fingerprint")}
    return checkpoint, header


# Scores

SCORE_COLUMNS = ["sample_id", "is_member", "step", "score", "orientation"]
LIKELIHOOD_COLUMNS = ["sample_id", "is_member", "step", "log_likelihood_nats", "orientation"]


def _score_frame(score_set: AttackScoreSet) -> pd.DataFrame:
    step = np.nan if score_set.step is None else score_set.step
    return pd.DataFrame(
        {
            "sample_id": np.concatenate([score_set.member_ids, score_set.nonmember_ids]),
            "is_member": [1] * score_set.n_members + [0] * score_set.n_nonmembers,
            "step": step,
            "score": np.concatenate([score_set.member_scores, score_set.nonmember_scores]),
            "orientation": score_set.orientation.value,
        }
    )


def save_loss_scores(path: str | Path, profile: StepProfile, fingerprint: str, model_kind: ModelKind) -> Path:
    """All steps of a loss attack in one long table, one row per (step, sample)."""
    frame = pd.concat([_score_frame(score_set) for score_set in profile.score_sets], ignore_index=True)
    return write_table(
        path,
        frame,
        "loss_scores",
        fingerprint,
        provenance=Provenance.LOSS.value,
        model_kind=ModelKind(model_kind).value,
        discrete_steps=ModelKind(model_kind).is_discrete,
    )


def load_loss_scores(path: str | Path) -> tuple[StepProfile, dict]:
    header, frame = read_table(path, "loss_scores", SCORE_COLUMNS)
    if frame["step"].isna().any():
        raise SchemaError(f"{path}: loss scores need a step on every row")
    discrete = bool(header.get("discrete_steps"))
    steps, score_sets = [], []
    for step, rows in frame.groupby("step", sort=True):
        step = int(step) if discrete else float(step)
        steps.append(step)
        score_sets.append(_score_set_from_rows(rows, Provenance.LOSS, step))
    return StepProfile(steps=np.asarray(steps), score_sets=score_sets), header


def save_likelihood_scores(path: str | Path, score_set: AttackScoreSet, fingerprint: str) -> Path:
    records = pd.DataFrame(score_set.metadata.get("records", []))
    frame = _score_frame(score_set).rename(columns={"score": "log_likelihood_nats"})
    if not records.empty:
        records["is_member"] = records["is_member"].astype(int)
        frame = frame.merge(
            records[["sample_id", "is_member", "bits_per_dim", "nfev"]], on=["sample_id", "is_member"], how="left"
        )
    return write_table(
        path,
        frame,
        "likelihood_scores",
        fingerprint,
        provenance=Provenance.LIKELIHOOD.value,
        counterpart=score_set.metadata.get("counterpart"),
        excluded=score_set.metadata.get("excluded", 0),
        excluded_ids=list(score_set.metadata.get("excluded_ids", [])),
    )


def load_likelihood_scores(path: str | Path) -> tuple[AttackScoreSet, dict]:
    header, frame = read_table(path, "likelihood_scores", LIKELIHOOD_COLUMNS)
    frame = frame.rename(columns={"log_likelihood_nats": "score"})
    score_set = _score_set_from_rows(frame, Provenance.LIKELIHOOD, None)
    score_set.metadata = {"excluded": header.get("excluded", 0), "counterpart": header.get("counterpart")}
    return score_set, header


def _score_set_from_rows(rows: pd.DataFrame, provenance: Provenance, step) -> AttackScoreSet:
    orientations = rows["orientation"].unique()
    if len(orientations) != 1:
        raise SchemaError(f"score rows mix orientations {list(orientations)}")
    members = rows[rows["is_member"] == 1]
    nonmembers = rows[rows["is_member"] == 0]
    return AttackScoreSet(
        member_scores=members["score"].to_numpy(),
        nonmember_scores=nonmembers["score"].to_numpy(),
        orientation=Orientation(orientations[0]),
        provenance=provenance,
        step=step,
        member_ids=members["sample_id"].to_numpy(),
        nonmember_ids=nonmembers["sample_id"].to_numpy(),
    )


# ROC and reports


def save_roc(path: str | Path, report: RocReport, fingerprint: str, **header) -> Path:
    frame = pd.DataFrame({"fpr": report.fpr, "tpr": report.tpr})
    return write_table(
        path,
        frame,
        "roc",
        fingerprint,
        auc=report.auc,
        best_accuracy=report.best_accuracy,
        n_members=report.n_members,
        n_nonmembers=report.n_nonmembers,
        **header,
    )


def load_roc(path: str | Path) -> tuple[pd.DataFrame, dict]:
    header, frame = read_table(path, "roc", ["fpr", "tpr"])
    return frame, header


def save_loss_history(path: str | Path, history: pd.DataFrame, fingerprint: str) -> Path:
    return write_table(path, history, "loss_history", fingerprint)


def load_loss_history(path: str | Path) -> tuple[pd.DataFrame, dict]:
    header, frame = read_table(path, "loss_history", ["step", "mean_loss"])
    return frame, header


def save_samples(path: str | Path, samples, fingerprint: str) -> Path:
    samples = np.asarray(samples, dtype=np.float64)
    frame = pd.DataFrame(samples, columns=[f"x{j}" for j in range(samples.shape[1])])
    return write_table(path, frame, "samples", fingerprint)


def load_samples(path: str | Path) -> tuple[np.ndarray, dict]:
    header, frame = read_table(path, "samples", [])
    return frame.to_numpy(dtype=np.float64), header


def save_quality(path: str | Path, quality: dict, fingerprint: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {"format_version": FORMAT_VERSION, "kind": "quality", "config_fingerprint": fingerprint, **quality}
    with open(path, "w") as f:
        yaml.safe_dump(document, f, sort_keys=False)
    return path


def load_quality(path: str | Path) -> dict:
    path = Path(path)
    _require(path)
    try:
        with open(path, "r") as f:
            document = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise SchemaError(f"{path}: unreadable quality record: {e}") from e
    if not isinstance(document, dict) or document.get("kind") != "quality":
        raise SchemaError(f"{path}: not a quality record")
    if document.get("format_version") != FORMAT_VERSION:
        raise VersionError("quality", document.get("format_version"), FORMAT_VERSION)
    return document
