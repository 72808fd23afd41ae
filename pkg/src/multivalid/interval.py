"""Multivalid prediction intervals at a target coverage level 1 - delta.

The adversary plays (rho, rn)-smooth label distributions on the grid atoms
{0, 1/rn, ..., 1}; its best response to a mixed interval strategy is a
fractional knapsack, solved greedily.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction

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
    cover,
    grid_numerator,
    numerator_bucket,
)
from .lp_engine import MinimaxProblem, SolveResult, solve
from .mean import eta_from_log_cells

log = logging.getLogger(__name__)

FEASIBLE = None


def coverage_deviation(interval: tuple[float, float], y: float, delta: float) -> float:
    return cover(interval, y) - (1.0 - delta)


def default_eta(T: int, groups: GroupSystem, n: int, lp_epsilon: float = 0.0) -> float:
    return eta_from_log_cells(T, math.log(2 * groups.group_count * n * n), lp_epsilon)


def hp_bound(T: int, groups: GroupSystem, n: int, rho: float, lam: float, lp_epsilon: float = 0.0) -> float:
    cells = 2 * groups.group_count * n * n
    return rho + 4 * math.sqrt(2 / T * math.log(cells / lam) + 2 * lp_epsilon)


@dataclass(frozen=True)
class PerturbationConfig:
    """Uniform label noise of half-width epsilon, rescaled back into [0, 1].

    With grid denominator rn the perturbed label has density at most
    (1 + 2 eps) / (2 eps), so every grid cell carries mass at most ``rho``.
    """

    epsilon: float
    T: int
    n: int

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("perturbation epsilon must be positive")

    @property
    def r(self) -> int:
        return max(1, math.ceil(math.sqrt(self.T) / (2 * self.n * self.epsilon)))

    @property
    def rho(self) -> float:
        return (1 + 2 * self.epsilon) / (2 * self.epsilon * self.r * self.n)

    @property
    def nominal_rho(self) -> float:
        return 1 / math.sqrt(self.T)


def perturb_label(y: float, config: PerturbationConfig | float, rng: np.random.Generator) -> float:
    eps = config if isinstance(config, (int, float)) else config.epsilon
    return (check_label(y) + eps + rng.uniform(-eps, eps)) / (1 + 2 * eps)


def widen_interval(interval: tuple[float, float], config: PerturbationConfig | float) -> tuple[float, float]:
    """Map an interval for perturbed labels back to the original scale, widened by eps each side."""
    eps = config if isinstance(config, (int, float)) else config.epsilon
    lo, hi = interval
    lo = lo * (1 + 2 * eps) - eps - eps
    hi = hi * (1 + 2 * eps) - eps + eps
    return max(0.0, lo), min(1.0, hi)


def empirical_window_mass(labels, width: float) -> float:
    """Largest fraction of labels inside any half-open window of the given width."""
    y = np.sort(np.asarray(labels, dtype=float))
    if y.size == 0:
        return 0.0
    ends = np.searchsorted(y, y + width, side="left")
    return float((ends - np.arange(y.size)).max() / y.size)


def greedy_smooth(w: np.ndarray, rho: float) -> np.ndarray:
    """Fill atoms in decreasing w order (smaller index first on ties), rho each, until mass 1."""
    m = len(w)
    if rho * m < 1 - 1e-12:
        raise ConfigError(f"no ({rho}, {m - 1})-smooth distribution exists on {m} atoms")
    order = np.argsort(-np.asarray(w, dtype=float), kind="stable")
    p = np.zeros(m)
    full = min(int(math.floor(1 / rho + 1e-12)), m)
    p[order[:full]] = rho
    rest = 1.0 - full * rho
    if rest > 1e-15 and full < m:
        p[order[full]] = rest
    return p


def greedy_smooth_exact(w, rho: Fraction) -> list[Fraction]:
    """Rational version of greedy_smooth, used for exact comparisons."""
    order = sorted(range(len(w)), key=lambda i: (-w[i], i))
    p = [Fraction(0)] * len(w)
    left = Fraction(1)
    for i in order:
        if left <= 0:
            break
        p[i] = min(rho, left)
        left -= p[i]
    return p


@dataclass
class IntervalDecision:
    distribution: PredictionDistribution
    actions: list[tuple[int, int]]  # numerators of the LP's interval strategies
    weights: np.ndarray
    result: SolveResult
    coeffs: np.ndarray  # rescaled C per bucket pair (n, n)
    log_scale: float
    worst_case: float


class IntervalCalibrator:
    kind = "interval"

    def __init__(
        self,
        groups: GroupSystem,
        grid: BucketGrid,
        eta: float,
        delta: float,
        rho: float,
        lp_epsilon: float = 1e-4,
        prune: bool = True,
        warm_start: int = 24,
        transcript: Transcript | None = None,
    ):
        if not 0 <= delta <= 1:
            raise ConfigError("delta must lie in [0, 1]")
        if delta in (0, 1):
            log.warning("delta=%s makes the coverage target degenerate", delta)
        if not 0 < rho <= 1:
            raise ConfigError("rho must lie in (0, 1]")
        if rho * (grid.denominator + 1) < 1:
            raise ConfigError("rho too small for the grid: no smooth distribution exists")
        if not 0 < eta < 0.5:
            raise ConfigError("eta must lie in (0, 1/2)")
        self.groups, self.grid, self.eta = groups, grid, eta
        self.delta, self.rho, self.lp_epsilon = delta, rho, lp_epsilon
        self.prune = prune
        self.warm_start = warm_start
        self.V = CellTable((grid.n, grid.n))
        self.transcript = transcript if transcript is not None else Transcript()
        self._pool: list[np.ndarray] = []
        self._full_actions = None

    @property
    def tables(self):
        return {"V": self.V}

    @property
    def table_shapes(self):
        return {"V": (self.grid.n, self.grid.n)}

    # -- potentials -----------------------------------------------------
    def signed_coefficients(self, x: Example):
        return logspace.coefficients(self.V.stack(x.group_ids), self.eta)

    def bucket_coefficient(self, x: Example, pair: tuple[int, int]) -> tuple[float, float]:
        i, j = pair
        if i > j:
            raise ValueError("bucket pair needs i <= j")
        s, l = self.signed_coefficients(x)
        return float(s[i - 1, j - 1]), float(l[i - 1, j - 1])

    def coefficients(self, x: Example) -> tuple[np.ndarray, float]:
        s, l = self.signed_coefficients(x)
        return logspace.rescale(s, l)

    def log_surrogate_loss(self) -> float:
        untouched = (self.groups.group_count - self.V.touched_groups()) * self.V.cells_per_group
        return logspace.log_surrogate([a for _, a in self.V.items()], self.eta, untouched)

    def surrogate_loss(self) -> float:
        return math.exp(self.log_surrogate_loss())

    # -- strategy sets ----------------------------------------------------
    def pair_of(self, lo: int, hi: int) -> tuple[int, int]:
        g = self.grid
        return numerator_bucket(lo, g.r, g.n), numerator_bucket(hi, g.r, g.n)

    def all_actions(self) -> list[tuple[int, int]]:
        if self._full_actions is None:
            m = self.grid.denominator
            self._full_actions = [(a, b) for a in range(m + 1) for b in range(a, m + 1)]
        return self._full_actions

    def dominant_actions(self, c: np.ndarray) -> list[tuple[int, int]]:
        """One interval per bucket pair: the shortest when C > 0, the longest otherwise.

        Coverage of the shortest interval in a pair is pointwise below that of
        every other interval in the pair (and the longest pointwise above), so
        no mixed strategy loses value by moving mass onto these.
        """
        r, n = self.grid.r, self.grid.n
        out = []
        for i in range(1, n + 1):
            for j in range(i, n + 1):
                if c[i - 1, j - 1] >= 0:
                    lo = (i - 1) * r if i == j else i * r - 1
                    hi = (i - 1) * r if i == j else (j - 1) * r
                else:
                    lo = (i - 1) * r
                    hi = n * r if j == n else j * r - 1
                out.append((lo, hi))
        return out

    # -- adversary ------------------------------------------------------
    def _action_arrays(self, actions, c):
        lo = np.array([a for a, _ in actions])
        hi = np.array([b for _, b in actions])
        m = self.grid.denominator
        end = np.where(hi >= m, m + 1, hi)  # covered atoms are lo <= k < end
        pairs = [self.pair_of(a, b) for a, b in actions]
        ca = np.array([c[i - 1, j - 1] for i, j in pairs])
        return lo, end, ca

    def atom_weights(self, q: np.ndarray, lo, end, ca) -> np.ndarray:
        m = self.grid.denominator
        diff = np.zeros(m + 2)
        np.add.at(diff, lo, q * ca)
        np.add.at(diff, end, -q * ca)
        return np.cumsum(diff)[: m + 1]

    def separation_oracle(self, x: Example, actions, q: np.ndarray, gamma: float, rho: float | None = None):
        """Return a smooth adversary distribution whose payoff against q exceeds gamma, else FEASIBLE."""
        rho = self.rho if rho is None else rho
        c, _ = self.coefficients(x)
        lo, end, ca = self._action_arrays(actions, c)
        q = np.asarray(q, dtype=float)
        p = greedy_smooth(self.atom_weights(q, lo, end, ca), rho)
        value = self.adversary_payoff(q, p, lo, end, ca)
        if np.any(q < 0) or not math.isclose(q.sum(), 1.0, abs_tol=1e-9) or value > gamma:
            return p
        return FEASIBLE

    def adversary_payoff(self, q, p, lo, end, ca) -> float:
        return float(q @ self.column(p, lo, end, ca))

    def column(self, p: np.ndarray, lo, end, ca) -> np.ndarray:
        cum = np.r_[0.0, np.cumsum(p)]
        return ca * (cum[end] - cum[lo] - (1.0 - self.delta))

    # -- play -----------------------------------------------------------
    def decide(self, x: Example) -> IntervalDecision:
        c, shift = self.coefficients(x)
        actions = self.dominant_actions(c) if self.prune else self.all_actions()
        lo, end, ca = self._action_arrays(actions, c)
        rho = self.rho

        def oracle(q):
            return greedy_smooth(self.atom_weights(q, lo, end, ca), rho)

        problem = MinimaxProblem(len(actions), lambda p: self.column(p, lo, end, ca), oracle, tuple(self._pool))
        res = solve(problem, self.lp_epsilon)
        if not res.converged:
            log.warning("interval LP did not converge; sampling the best distribution found")
        if self.warm_start:
            self._pool = res.adversaries[-self.warm_start :]
        w = res.distribution
        keep = np.flatnonzero(w > 0)
        m = self.grid.denominator
        support = [(actions[a][0] / m, actions[a][1] / m) for a in keep]
        dist = PredictionDistribution(support, w[keep] / w[keep].sum())
        return IntervalDecision(dist, actions, w, res, c, shift, res.value_upper)

    def distribution(self, x: Example) -> PredictionDistribution:
        return self.decide(x).distribution

    def predict(self, x: Example, rng: np.random.Generator) -> tuple[float, float]:
        return self.distribution(x).sample(rng)

    def cell_of(self, interval: tuple[float, float]) -> tuple[int, int]:
        m = self.grid.denominator
        lo, hi = grid_numerator(interval[0], m), grid_numerator(interval[1], m)
        if lo > hi:
            raise ValueError("interval endpoints out of order")
        return self.pair_of(lo, hi)

    def update(self, x: Example, interval: tuple[float, float], y: float) -> None:
        y = check_label(y)
        interval = (float(interval[0]), float(interval[1]))
        i, j = self.cell_of(interval)
        inc = coverage_deviation(interval, y, self.delta)
        deltas = [Delta("V", g, (i - 1, j - 1), inc) for g in x.group_ids]
        for d in deltas:
            self.V.add(d.group, d.key, d.amount)
        self.transcript.append(x, interval, y, deltas)

    def surrogate_increase(self, x: Example, dist: PredictionDistribution, y: float) -> float:
        v = self.eta * self.V.stack(x.group_ids)
        shift = float(np.abs(v).max()) if v.size else 0.0
        total = 0.0
        for interval, w in dist.items():
            i, j = self.cell_of(interval)
            arr = v[:, i - 1, j - 1]
            step = self.eta * coverage_deviation(interval, y, self.delta)
            total += w * float(np.sum(np.exp(arr - shift) * np.expm1(step) + np.exp(-arr - shift) * np.expm1(-step)))
        return total


def for_horizon(
    T: int,
    groups: GroupSystem,
    n: int,
    delta: float,
    *,
    rho: float | None = None,
    r: int | None = None,
    perturbation: PerturbationConfig | None = None,
    lp_epsilon: float = 1e-4,
    **kwargs,
) -> IntervalCalibrator:
    """Build a calibrator either assuming smooth labels (rho, r given) or perturbing them."""
    if perturbation is not None:
        r, rho = perturbation.r, perturbation.rho
    if rho is None or r is None:
        raise ConfigError("give both rho and r, or a perturbation config")
    eta = default_eta(T, groups, n, lp_epsilon)
    return IntervalCalibrator(groups, BucketGrid(n=n, r=r), eta, delta, rho, lp_epsilon, **kwargs)
