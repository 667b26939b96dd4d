"""Parameter spaces and Latin hypercube designs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .csvio import read_table, write_table


@dataclass
class ParameterSpace:
    names: list[str]
    lower: np.ndarray
    upper: np.ndarray
    prior: list[dict] = field(default_factory=list)  # per-dim {"kind": "uniform"} or gaussian mean/std

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        if not (len(self.names) == len(self.lower) == len(self.upper)):
            raise ValueError("names and bounds differ in length")
        if np.any(self.lower >= self.upper):
            raise ValueError("every lower bound must be below its upper bound")
        if not self.prior:
            self.prior = [{"kind": "uniform"} for _ in self.names]

    @property
    def dim(self) -> int:
        return len(self.names)

    def normalize(self, theta) -> np.ndarray:
        return (np.asarray(theta, dtype=np.float64) - self.lower) / (self.upper - self.lower)

    def denormalize(self, unit) -> np.ndarray:
        return self.lower + np.asarray(unit, dtype=np.float64) * (self.upper - self.lower)

    def contains(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        return np.all((theta >= self.lower) & (theta <= self.upper), axis=-1)


@dataclass
class DesignTable:
    theta: np.ndarray  # (n, d)
    names: list[str]
    seed: int
    kind: str = "LHD"
    ids: list[int] | None = None

    def __post_init__(self):
        if self.ids is None:
            self.ids = list(range(len(self.theta)))

    def __len__(self) -> int:
        return len(self.theta)

    def write_csv(self, path) -> None:
        header = ["sample_id"] + list(self.names)
        write_table(path, header, [(i, *row) for i, row in zip(self.ids, self.theta)])

    @classmethod
    def read_csv(cls, path, seed: int = 0, kind: str = "LHD") -> "DesignTable":
        header, rows = read_table(path)
        names = header[1:]
        theta = np.array([[float(v) for v in r[1:]] for r in rows]).reshape(-1, len(names))
        return cls(theta, names, seed, kind, [int(r[0]) for r in rows])

    def merged(self, other: "DesignTable") -> "DesignTable":
        start = max(self.ids, default=-1) + 1
        ids = list(self.ids) + [start + i for i in range(len(other))]
        return DesignTable(np.concatenate([self.theta, other.theta]), self.names, self.seed, "LHD+augment", ids)


def lhd_unit(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """One point per stratum ``[k/n, (k+1)/n)`` in every column, uniformly placed inside it."""
    if n < 1:
        raise ValueError("n must be at least 1")
    strata = np.stack([rng.permutation(n) for _ in range(d)], axis=1)
    return (strata + rng.random((n, d))) / n


def lhd_sample(n: int, space: ParameterSpace, seed: int) -> DesignTable:
    rng = np.random.default_rng(seed)
    unit = lhd_unit(n, space.dim, rng)
    theta = space.denormalize(unit)
    # keep the top edge inside the closed box despite rounding
    theta = np.clip(theta, space.lower, space.upper)
    return DesignTable(theta, list(space.names), seed)


def stratum_occupancy(theta, space: ParameterSpace) -> np.ndarray:
    """Stratum index of every sample in every dimension, ``(n, d)``."""
    theta = np.atleast_2d(theta)
    n = theta.shape[0]
    idx = np.floor(space.normalize(theta) * n).astype(int)
    return np.clip(idx, 0, n - 1)
