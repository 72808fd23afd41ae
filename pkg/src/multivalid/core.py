"""Shared domain types: examples, group systems, bucket grids, transcripts."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator, Sequence

import numpy as np


class ConfigError(ValueError):
    """Raised when a hyperparameter combination is not admissible."""


@dataclass(frozen=True)
class GroupSystem:
    group_count: int
    max_membership: int | None = None

    def __post_init__(self):
        if self.group_count < 1:
            raise ConfigError("group_count must be at least 1")
        if self.max_membership is not None and self.max_membership < 1:
            raise ConfigError("max_membership must be positive when set")

    def validate(self, groups: Sequence[int]) -> None:
        for g in groups:
            if not 0 <= g < self.group_count:
                raise ValueError(f"group id {g} outside [0, {self.group_count})")
        if self.max_membership is not None and len(groups) > self.max_membership:
            raise ValueError(
                f"example belongs to {len(groups)} groups, limit is {self.max_membership}"
            )


@dataclass(frozen=True)
class Example:
    """One round's context, described only by its group memberships."""

    group_ids: tuple[int, ...]
    label: float | None = None

    def __post_init__(self):
        ids = tuple(sorted(int(g) for g in self.group_ids))
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate group ids in {self.group_ids}")
        object.__setattr__(self, "group_ids", ids)
        if self.label is not None:
            check_label(self.label)

    @classmethod
    def of(cls, *groups: int, label: float | None = None) -> "Example":
        return cls(tuple(groups), label)


def check_label(y: float) -> float:
    y = float(y)
    if not 0.0 <= y <= 1.0:
        raise ValueError(f"label {y} outside [0, 1]")
    return y


def bucket_index(v: float, n: int) -> int:
    """1-based index of the bucket [(i-1)/n, i/n) containing v; 1.0 maps to n."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"value {v} outside [0, 1]")
    scaled = v * n
    nearest = round(scaled)
    if abs(scaled - nearest) < 1e-6:
        # near a boundary: decide with exact rational arithmetic
        scaled = Fraction(v) * n
    return min(math.floor(scaled) + 1, n)


def numerator_bucket(k: int, r: int, n: int) -> int:
    """Bucket of the grid point k/(rn); exact integer arithmetic."""
    return min(k // r + 1, n)


def grid_points(r: int, n: int) -> list[float]:
    if r < 1 or n < 1:
        raise ValueError("r and n must be at least 1")
    m = r * n
    return [k / m for k in range(m + 1)]


def grid_numerator(v: float, denominator: int) -> int:
    """Recover k with v == k/denominator, rejecting off-grid values."""
    scaled = v * denominator
    k = int(round(scaled))
    if abs(scaled - k) > 1e-7 or not 0 <= k <= denominator:
        raise ValueError(f"{v} is not a point of the grid with denominator {denominator}")
    return k


def cover(interval: tuple[float, float], y: float) -> int:
    """1 if y lies in [lo, hi), or in [lo, 1] when hi == 1."""
    lo, hi = interval
    if hi >= 1.0:
        return int(lo <= y <= hi)
    return int(lo <= y < hi)


@dataclass(frozen=True)
class BucketGrid:
    n: int
    r: int
    n_prime: int | None = None

    def __post_init__(self):
        if self.n < 1 or self.r < 1:
            raise ConfigError("n and r must be at least 1")
        if self.n_prime is not None and self.n_prime < 1:
            raise ConfigError("n_prime must be at least 1")

    @property
    def denominator(self) -> int:
        return self.r * self.n

    @property
    def moment_denominator(self) -> int:
        if self.n_prime is None:
            raise ConfigError("grid has no moment buckets")
        return self.r * self.n_prime

    def points(self) -> list[float]:
        return grid_points(self.r, self.n)

    def bucket(self, v: float) -> int:
        return bucket_index(v, self.n)


class CellTable:
    """Sparse per-group error table; a group's array is created on first touch."""

    def __init__(self, shape: tuple[int, ...]):
        self.shape = tuple(shape)
        self.cells_per_group = int(np.prod(self.shape))
        self._data: dict[int, np.ndarray] = {}

    def add(self, group: int, key, value: float) -> None:
        arr = self._data.get(group)
        if arr is None:
            arr = self._data[group] = np.zeros(self.shape)
        arr[key] += value

    def get(self, group: int) -> np.ndarray:
        arr = self._data.get(group)
        return np.zeros(self.shape) if arr is None else arr

    def stack(self, groups: Sequence[int]) -> np.ndarray:
        out = np.zeros((len(groups),) + self.shape)
        for row, g in enumerate(groups):
            arr = self._data.get(g)
            if arr is not None:
                out[row] = arr
        return out

    def items(self) -> Iterator[tuple[int, np.ndarray]]:
        return iter(sorted(self._data.items()))

    def touched_groups(self) -> int:
        return len(self._data)

    def copy(self) -> "CellTable":
        other = CellTable(self.shape)
        other._data = {g: a.copy() for g, a in self._data.items()}
        return other


@dataclass(frozen=True)
class Delta:
    """One table increment: table name, group, cell key, amount."""

    table: str
    group: int
    key: tuple[int, ...]
    amount: float


@dataclass(frozen=True)
class Round:
    groups: tuple[int, ...]
    prediction: object
    label: float

    def to_json(self, index: int) -> str:
        pred = list(self.prediction) if isinstance(self.prediction, tuple) else self.prediction
        return json.dumps(
            {"round": index, "groups": list(self.groups), "prediction": pred, "label": self.label}
        )

    @classmethod
    def from_json(cls, line: str) -> "Round":
        rec = json.loads(line)
        pred = rec["prediction"]
        if isinstance(pred, list):
            pred = tuple(pred)
        return cls(tuple(rec["groups"]), pred, rec["label"])


@dataclass
class Transcript:
    """Append-only record of rounds and the table deltas each one produced."""

    rounds: list[Round] = field(default_factory=list)
    deltas: list[tuple[Delta, ...]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rounds)

    def append(self, example: Example, prediction, label: float, deltas: Iterable[Delta]) -> None:
        self.rounds.append(Round(example.group_ids, prediction, float(label)))
        self.deltas.append(tuple(deltas))

    def replay(self, shapes: dict[str, tuple[int, ...]], upto: int | None = None) -> dict[str, CellTable]:
        """Fold deltas of the first ``upto`` rounds into fresh tables."""
        tables = {name: CellTable(shape) for name, shape in shapes.items()}
        stop = len(self.deltas) if upto is None else upto
        for round_deltas in self.deltas[:stop]:
            for d in round_deltas:
                tables[d.table].add(d.group, d.key, d.amount)
        return tables

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for t, rnd in enumerate(self.rounds, start=1):
                fh.write(rnd.to_json(t) + "\n")

    @staticmethod
    def read_rounds(path) -> list[Round]:
        with open(path) as fh:
            return [Round.from_json(line) for line in fh if line.strip()]


@dataclass
class PredictionDistribution:
    """Finite-support mixed strategy for a single round."""

    support: list
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if len(self.support) != len(self.probs):
            raise ValueError("support and probabilities differ in length")

    def sample(self, rng: np.random.Generator):
        if len(self.support) == 1:
            return self.support[0]
        u = rng.random()
        cdf = np.cumsum(self.probs)
        idx = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
        return self.support[min(idx, len(self.support) - 1)]

    def items(self):
        return zip(self.support, self.probs)
