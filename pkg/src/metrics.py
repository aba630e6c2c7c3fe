"""ROC-based attack evaluation and the data-space Fréchet distance."""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from sklearn.metrics import roc_auc_score, roc_curve

from attacks import AttackScoreSet
from errors import ContractError, RangeError

logger = logging.getLogger(__name__)

DEFAULT_FPR_LEVELS = (0.1, 0.01, 0.001, 0.0001)


@dataclass
class RocReport:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float
    best_accuracy: float
    n_members: int
    n_nonmembers: int
    tpr_at_fpr: dict[float, float] = field(default_factory=dict)

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    @property
    def resolution_floor(self) -> float:
        """Smallest non-zero FPR the nonmember set can resolve."""
        return 1.0 / self.n_nonmembers

    def below_floor(self, level: float) -> bool:
        return level < self.resolution_floor


def _labels_and_scores(scores: AttackScoreSet) -> tuple[np.ndarray, np.ndarray]:
    members, nonmembers = scores.normalized()
    values = np.concatenate([members, nonmembers])
    if not np.all(np.isfinite(values)):
        raise ContractError("ROC input contains NaN or infinite scores")
    labels = np.concatenate([np.ones(members.size, dtype=int), np.zeros(nonmembers.size, dtype=int)])
    return labels, values


def roc_points(scores: AttackScoreSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds) of the sweep over every distinct observed score, from (0,0) to (1,1)."""
    labels, values = _labels_and_scores(scores)
    fpr, tpr, thresholds = roc_curve(labels, values, drop_intermediate=False)
    points = np.stack([fpr, tpr], axis=1)
    _, keep = np.unique(points, axis=0, return_index=True)
    keep = np.sort(keep)
    return fpr[keep], tpr[keep], thresholds[keep]


def accuracy_curve(fpr: np.ndarray, tpr: np.ndarray, n_members: int, n_nonmembers: int) -> np.ndarray:
    return (tpr * n_members + (1.0 - fpr) * n_nonmembers) / (n_members + n_nonmembers)


def tpr_at_fpr(report: RocReport, target_fpr: float) -> float:
    """TPR of the ROC point with the largest FPR not above the target; no interpolation."""
    if not 0.0 <= target_fpr <= 1.0:
        raise RangeError(f"target FPR must lie in [0, 1], got {target_fpr}")
    admissible = report.fpr <= target_fpr
    return float(np.max(report.tpr[admissible]))


def best_accuracy(scores: AttackScoreSet) -> float:
    """Best (TP + TN) / (P + N) over all thresholds under the set's orientation."""
    fpr, tpr, _ = roc_points(scores)
    return float(np.max(accuracy_curve(fpr, tpr, scores.n_members, scores.n_nonmembers)))


def roc(scores: AttackScoreSet, fpr_levels=DEFAULT_FPR_LEVELS) -> RocReport:
    fpr, tpr, thresholds = roc_points(scores)
    labels, values = _labels_and_scores(scores)
    report = RocReport(
        fpr=fpr,
        tpr=tpr,
        thresholds=thresholds,
        auc=float(roc_auc_score(labels, values)),
        best_accuracy=float(np.max(accuracy_curve(fpr, tpr, scores.n_members, scores.n_nonmembers))),
        n_members=scores.n_members,
        n_nonmembers=scores.n_nonmembers,
    )
    report.tpr_at_fpr = {float(level): tpr_at_fpr(report, level) for level in fpr_levels}
    return report


def _sqrtm_psd(matrix: np.ndarray) -> np.ndarray:
    eigvals, eigvecs = linalg.eigh(matrix)
    return (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T


def frechet_distance_from_stats(mu_a, cov_a, mu_b, cov_b) -> float:
    """||μa - μb||² + Tr(Σa + Σb - 2 (Σa Σb)^½) for Gaussian fits."""
    mu_a, mu_b = np.atleast_1d(np.asarray(mu_a, dtype=np.float64)), np.atleast_1d(np.asarray(mu_b, dtype=np.float64))
    cov_a, cov_b = np.atleast_2d(np.asarray(cov_a, dtype=np.float64)), np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape or cov_a.shape != (mu_a.size, mu_a.size):
        raise ContractError(
            f"mismatched Gaussian statistics: means {mu_a.shape} / {mu_b.shape}, covariances {cov_a.shape} / {cov_b.shape}"
        )
    # Tr((Σa Σb)^½) = Tr((√Σa Σb √Σa)^½), and the inner matrix is symmetric PSD.
    root_a = _sqrtm_psd(cov_a)
    middle = root_a @ cov_b @ root_a
    middle = 0.5 * (middle + middle.T)
    trace_root = float(np.sum(np.sqrt(np.clip(linalg.eigvalsh(middle), 0.0, None))))
    diff = mu_a - mu_b
    distance = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_root)
    return max(distance, 0.0)


def frechet_distance(set_a, set_b) -> float:
    """Fréchet distance between Gaussian fits of two n x m sample sets."""
    set_a, set_b = np.asarray(set_a, dtype=np.float64), np.asarray(set_b, dtype=np.float64)
    if set_a.ndim != 2 or set_b.ndim != 2 or set_a.shape[1] != set_b.shape[1]:
        raise ContractError(f"sample sets must be n x m with equal m, got {set_a.shape} and {set_b.shape}")
    dim = set_a.shape[1]
    if min(set_a.shape[0], set_b.shape[0]) < dim + 1:
        raise ContractError(
            f"Fréchet distance needs at least {dim + 1} samples per set, got {set_a.shape[0]} and {set_b.shape[0]}"
        )
    return frechet_distance_from_stats(
        set_a.mean(axis=0), np.cov(set_a, rowvar=False), set_b.mean(axis=0), np.cov(set_b, rowvar=False)
    )
