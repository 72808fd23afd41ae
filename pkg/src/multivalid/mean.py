"""Online mean multicalibration with the closed-form per-round equilibrium."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import logspace
from .core import (
    BucketGrid,
    CellTable,
    ConfigError,
    Delta,
    Example,
    GroupSystem,
    PredictionDistribution,
    Transcript,
    check_label,
    grid_numerator,
    numerator_bucket,
)

FINITE_GROUPS = "finite-groups"
BOUNDED_MEMBERSHIP = "bounded-membership"


def eta_from_log_cells(T: int, log_cells: float, lp_epsilon: float = 0.0) -> float:
    """sqrt((log_cells + eps*T) / 2T), checked to lie in (0, 1/2)."""
    if T < 1:
        raise ConfigError("horizon T must be at least 1")
    eta = math.sqrt((log_cells + lp_epsilon * T) / (2 * T))
    if not 0 < eta < 0.5:
        # smallest T with (log_cells + eps T)/(2T) < 1/4
        denom = 0.5 - lp_epsilon
        t_min = math.floor(log_cells / denom) + 1 if denom > 0 else None
        hint = f"need T >= {t_min}" if t_min else "lower the LP tolerance"
        raise ConfigError(f"learning rate {eta:.4g} outside (0, 1/2); {hint}")
    return eta


def default_eta(
    T: int,
    groups: GroupSystem,
    n: int,
    mode: str = FINITE_GROUPS,
) -> float:
    if mode == FINITE_GROUPS:
        return eta_from_log_cells(T, math.log(2 * groups.group_count * n))
    if mode == BOUNDED_MEMBERSHIP:
        if groups.max_membership is None:
            raise ConfigError("bounded-membership mode needs max_membership")
        return eta_from_log_cells(T, math.log1p(2 * groups.max_membership * T))
    raise ConfigError(f"unknown eta mode {mode!r}")


def default_r(T: int, groups: GroupSystem, n: int, eps_prime: float = 0.1) -> int:
    """Discretization making 1/(rn) a small fraction of the statistical term."""
    r = math.sqrt(T) / (eps_prime * n * math.sqrt(2 * math.log(2 * groups.group_count * n)))
    return max(1, math.ceil(r))


def hp_bound(T: int, groups: GroupSystem, grid: BucketGrid, lam: float) -> float:
    """High-probability bound on the headline error at confidence 1 - lam."""
    return 1 / grid.denominator + 4 * math.sqrt(2 * math.log(2 * groups.group_count * grid.n / lam) / T)


@dataclass
class MeanDecision:
    distribution: PredictionDistribution
    i_star: int | None  # set only when the randomized branch is taken
    q: float | None
    coeffs: np.ndarray  # C^i rescaled by a common positive constant
    log_scale: float


class MeanCalibrator:
    """Randomized mean predictor whose errors stay small on every (group, bucket) cell."""

    kind = "mean"

    def __init__(self, groups: GroupSystem, grid: BucketGrid, eta: float, transcript: Transcript | None = None):
        if not 0 < eta < 0.5:
            raise ConfigError("eta must lie in (0, 1/2)")
        self.groups = groups
        self.grid = grid
        self.eta = eta
        self.V = CellTable((grid.n,))
        self.transcript = transcript if transcript is not None else Transcript()

    @classmethod
    def for_horizon(cls, T: int, groups: GroupSystem, n: int, r: int | None = None, mode: str = FINITE_GROUPS):
        r = r if r is not None else default_r(T, groups, n)
        return cls(groups, BucketGrid(n=n, r=r), default_eta(T, groups, n, mode))

    @property
    def tables(self) -> dict[str, CellTable]:
        return {"V": self.V}

    @property
    def table_shapes(self) -> dict[str, tuple[int, ...]]:
        return {"V": (self.grid.n,)}

    # -- potentials -----------------------------------------------------
    def coefficients(self, x: Example) -> tuple[np.ndarray, np.ndarray]:
        """Signed-log C^i for every bucket i (index 0 is bucket 1)."""
        return logspace.coefficients(self.V.stack(x.group_ids), self.eta)

    def bucket_coefficient(self, x: Example, i: int) -> tuple[float, float]:
        sign, logmag = self.coefficients(x)
        return float(sign[i - 1]), float(logmag[i - 1])

    def log_surrogate_loss(self) -> float:
        untouched = (self.groups.group_count - self.V.touched_groups()) * self.V.cells_per_group
        return logspace.log_surrogate([a for _, a in self.V.items()], self.eta, untouched)

    def surrogate_loss(self) -> float:
        return math.exp(self.log_surrogate_loss())

    # -- play -----------------------------------------------------------
    def decide(self, x: Example) -> MeanDecision:
        n, rn = self.grid.n, self.grid.denominator
        sign, logmag = self.coefficients(x)
        c, shift = logspace.rescale(sign, logmag)
        if np.all(sign > 0):
            return MeanDecision(PredictionDistribution([1.0], [1.0]), None, None, c, shift)
        if np.all(sign < 0):
            return MeanDecision(PredictionDistribution([0.0], [1.0]), None, None, c, shift)
        prod = sign[:-1] * sign[1:]
        hits = np.flatnonzero(prod <= 0)
        if hits.size == 0:
            # only possible with a single bucket whose coefficient is zero
            return MeanDecision(PredictionDistribution([1.0], [1.0]), None, None, c, shift)
        i_star = int(hits[0]) + 1
        lo_mag, hi_mag = logmag[i_star - 1], logmag[i_star]
        if np.isneginf(hi_mag):
            q = 1.0 if np.isneginf(lo_mag) else 0.0
        else:
            # q = |C_{i*+1}| / (|C_{i*+1}| + |C_{i*}|)
            q = float(1.0 / (1.0 + math.exp(min(lo_mag - hi_mag, 700.0))))
        support = [(i_star * self.grid.r - 1) / rn, i_star / n]
        return MeanDecision(PredictionDistribution(support, [q, 1.0 - q]), i_star, q, c, shift)

    def distribution(self, x: Example) -> PredictionDistribution:
        return self.decide(x).distribution

    def predict(self, x: Example, rng: np.random.Generator) -> float:
        return self.distribution(x).sample(rng)

    def update(self, x: Example, prediction: float, y: float) -> None:
        y = check_label(y)
        k = grid_numerator(prediction, self.grid.denominator)
        i = numerator_bucket(k, self.grid.r, self.grid.n)
        inc = y - prediction
        deltas = [Delta("V", g, (i - 1,), inc) for g in x.group_ids]
        for d in deltas:
            self.V.add(d.group, d.key, d.amount)
        self.transcript.append(x, prediction, y, deltas)

    def surrogate_increase(self, x: Example, dist: PredictionDistribution, y: float) -> float:
        """Expected change of the potential if label y is revealed, up to a positive factor
        that depends only on the current state (so it can compare candidate labels)."""
        vals = self.eta * self.V.stack(x.group_ids)
        shift = float(np.abs(vals).max()) if vals.size else 0.0
        total = 0.0
        for p, w in dist.items():
            i = numerator_bucket(grid_numerator(p, self.grid.denominator), self.grid.r, self.grid.n)
            v = vals[:, i - 1]
            step = self.eta * (y - p)
            total += w * float(np.sum(np.exp(v - shift) * np.expm1(step) + np.exp(-v - shift) * np.expm1(-step)))
        return total
