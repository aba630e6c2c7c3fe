"""Seeded 2-D toy distributions and their member/nonmember split."""

import logging
import math
from dataclasses import dataclass

import numpy as np
from sklearn.datasets import make_moons

from errors import ConfigError, ContractError
from utils.helper import derive_seed, sha256_hex

logger = logging.getLogger(__name__)

RING_MODES = 8
RING_RADIUS = 2.0
RING_STD = 0.1
GRID_SIDE = 5
GRID_STD = 0.05
MOONS_NOISE = 0.05
SPIRAL_NOISE = 0.05


def _ring8(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    components = rng.integers(0, RING_MODES, size=n)
    angles = 2.0 * math.pi * components / RING_MODES
    centers = RING_RADIUS * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return centers + RING_STD * rng.standard_normal((n, 2)), components


def _moons(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    points, components = make_moons(
        n_samples=n, noise=MOONS_NOISE, random_state=int(rng.integers(0, 2**31 - 1))
    )
    # make_moons returns the two moons in blocks; shuffle so row order carries no label.
    order = rng.permutation(n)
    return points[order], components[order]


def _spiral(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    turns = 3.0 * math.pi * np.sqrt(rng.random(n))
    points = np.stack([turns * np.cos(turns), turns * np.sin(turns)], axis=1) / (3.0 * math.pi)
    return points + SPIRAL_NOISE * rng.standard_normal((n, 2)), np.zeros(n, dtype=np.int64)


def _gauss_grid(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    components = rng.integers(0, GRID_SIDE * GRID_SIDE, size=n)
    offset = (GRID_SIDE - 1) / 2.0
    centers = np.stack([components % GRID_SIDE - offset, components // GRID_SIDE - offset], axis=1)
    return centers + GRID_STD * rng.standard_normal((n, 2)), components


GENERATORS = {
    "ring8": _ring8,
    "moons": _moons,
    "spiral": _spiral,
    "gauss_grid": _gauss_grid,
}


@dataclass
class Dataset:
    """Standardized points with the indices of the training (member) and held-out (nonmember) rows."""

    points: np.ndarray
    generator_name: str
    seed: int
    member_indices: np.ndarray
    nonmember_indices: np.ndarray
    components: np.ndarray
    shift: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.member_indices = np.asarray(self.member_indices, dtype=np.int64)
        self.nonmember_indices = np.asarray(self.nonmember_indices, dtype=np.int64)
        self.components = np.asarray(self.components, dtype=np.int64)
        self.shift = np.asarray(self.shift, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        n = self.points.shape[0]
        if np.intersect1d(self.member_indices, self.nonmember_indices).size:
            raise ContractError("member and nonmember splits share indices")
        if self.member_indices.size == 0 or self.nonmember_indices.size == 0:
            raise ContractError("both splits need at least one sample")
        every = np.concatenate([self.member_indices, self.nonmember_indices])
        if every.min() < 0 or every.max() >= n:
            raise ContractError(f"split index outside 0..{n - 1}")

    @property
    def members(self) -> np.ndarray:
        return self.points[self.member_indices]

    @property
    def nonmembers(self) -> np.ndarray:
        return self.points[self.nonmember_indices]

    @property
    def dim(self) -> int:
        return int(self.points.shape[1])

    def fingerprint(self) -> str:
        return sha256_hex(
            self.generator_name,
            str(self.seed),
            self.points.tobytes(),
            self.member_indices.tobytes(),
            self.nonmember_indices.tobytes(),
        )[:16]


def generate_dataset(generator_name: str, n_members: int, n_nonmembers: int, seed: int = 0) -> Dataset:
    """i.i.d. draws from one generator, split at random into members and nonmembers.

    Points are standardized with the member set's per-coordinate mean and std.
    """
    if generator_name not in GENERATORS:
        raise ConfigError(f"unknown dataset generator {generator_name!r}; choose from {sorted(GENERATORS)}")
    if n_members < 1 or n_nonmembers < 1:
        raise ConfigError(f"need at least one member and one nonmember, got {n_members} and {n_nonmembers}")

    n = n_members + n_nonmembers
    rng = np.random.default_rng(derive_seed(seed, 0))
    raw, components = GENERATORS[generator_name](n, rng)
    order = np.random.default_rng(derive_seed(seed, 1)).permutation(n)
    member_indices = np.sort(order[:n_members])
    nonmember_indices = np.sort(order[n_members:])

    members = raw[member_indices]
    shift = members.mean(axis=0)
    scale = members.std(axis=0)
    scale[scale == 0] = 1.0
    points = (raw - shift) / scale

    logger.info(f"Generated {generator_name}: {n_members} members, {n_nonmembers} nonmembers, seed {seed}")
    return Dataset(
        points=points,
        generator_name=generator_name,
        seed=int(seed),
        member_indices=member_indices,
        nonmember_indices=nonmember_indices,
        components=components,
        shift=shift,
        scale=scale,
    )
