"""Mean-conditioned k-th moment multicalibration.

Each round the learner plays a pair (mean, moment) from a reduced grid with two
points per bucket, mixing over the pairs by solving a small minimax LP whose
adversary chooses a vertex psi of the unit cube (a relaxed label moment vector).
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import comb

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
from .lp_engine import MinimaxProblem, SolveResult, solve, solve_matrix, truncate_coefficients
from .mean import eta_from_log_cells

log = logging.getLogger(__name__)

DENSE_LIMIT = 4096


def bucket_midpoint(i: int, n: int) -> float:
    return (2 * i - 1) / (2 * n)


def reduced_numerators(r: int, n: int) -> list[int]:
    """Numerators over rn of the two-per-bucket grid: both ends of every bucket."""
    if r < 2:
        raise ConfigError("the reduced grid needs r >= 2")
    pts = []
    for i in range(1, n):
        pts += [(i - 1) * r, i * r - 1]
    pts += [(n - 1) * r, n * r]
    return pts


def reduced_grid(r: int, n: int, n_prime: int) -> list[tuple[float, float]]:
    mus = [k / (r * n) for k in reduced_numerators(r, n)]
    ms = [k / (r * n_prime) for k in reduced_numerators(r, n_prime)]
    return [(a, b) for a in mus for b in ms]


def default_r(T: int, groups: GroupSystem, n: int, n_prime: int, eps_prime: float = 0.1) -> int:
    cells = 4 * groups.group_count * n * n_prime
    r = math.sqrt(T) * (n + n_prime) / (eps_prime * n * n_prime * math.sqrt(2 * math.log(cells)))
    return max(2, math.ceil(r))


def default_eta(T: int, groups: GroupSystem, n: int, n_prime: int, lp_epsilon: float = 0.0) -> float:
    return eta_from_log_cells(T, math.log(4 * groups.group_count * n * n_prime), lp_epsilon)


def hp_bound(T: int, groups: GroupSystem, grid: BucketGrid, lam: float, lp_epsilon: float = 0.0) -> float:
    cells = 4 * groups.group_count * grid.n * grid.n_prime
    return (
        1 / grid.denominator
        + 1 / grid.moment_denominator
        + 4 * math.sqrt(2 / T * math.log(cells / lam) + 2 * lp_epsilon)
    )


def beta_from_alpha(alpha: float, k: int, n: int) -> float:
    return (k + 1) * alpha + k / (2 * n)


@dataclass
class MomentCoefficients:
    """Per bucket-pair coefficients, all rescaled by the common factor exp(-log_scale)."""

    c: np.ndarray  # (n, n')
    d: np.ndarray  # (n, n')
    f: np.ndarray  # (k, n, n'); f[l-1] multiplies psi_l
    log_scale: float

    @property
    def k(self) -> int:
        return self.f.shape[0]


def moment_f(c: np.ndarray, d: np.ndarray, k: int, n: int) -> np.ndarray:
    """Coefficients of psi in the expanded payoff.

    psi_1 collects the mean term c and the linear part of the binomial
    expansion of (psi - mu_hat)^k; higher psi_l only come from d.
    """
    mu_hat = np.array([bucket_midpoint(i, n) for i in range(1, n + 1)])[:, None]
    f = np.empty((k,) + c.shape)
    for ell in range(1, k + 1):
        f[ell - 1] = comb(k, ell, exact=True) * (-mu_hat) ** (k - ell) * d
    f[0] += c
    return f


def adversary_best_response(coeffs: MomentCoefficients, pair_mass: np.ndarray) -> np.ndarray:
    """psi_l = 1 exactly when the mass-weighted F_l sum is nonnegative."""
    s = np.tensordot(coeffs.f, pair_mass, axes=([1, 2], [0, 1]))
    return (s >= 0).astype(float)


@dataclass
class MomentDecision:
    distribution: PredictionDistribution
    weights: np.ndarray  # over all reduced-grid actions
    result: SolveResult
    coeffs: MomentCoefficients
    worst_case: float  # exact (untruncated) best-response payoff, rescaled units


class MomentCalibrator:
    kind = "moment"

    def __init__(
        self,
        groups: GroupSystem,
        grid: BucketGrid,
        eta: float,
        k: int = 2,
        lp_epsilon: float = 1e-6,
        method: str = "auto",
        prune: bool = True,
        transcript: Transcript | None = None,
    ):
        if k < 2 or k % 2:
            raise ConfigError("moment order k must be even and at least 2")
        if grid.n_prime is None:
            raise ConfigError("moment calibration needs n_prime")
        if not 0 < eta < 0.5:
            raise ConfigError("eta must lie in (0, 1/2)")
        if method not in ("auto", "dense", "oracle"):
            raise ConfigError(f"unknown LP method {method!r}")
        self.groups, self.grid, self.eta, self.k = groups, grid, eta, k
        self.lp_epsilon = lp_epsilon
        self.method = method
        self.prune = prune
        n, npr, r = grid.n, grid.n_prime, grid.r
        self.V = CellTable((n, npr))
        self.M = CellTable((n, npr))
        self.transcript = transcript if transcript is not None else Transcript()

        mu_num = reduced_numerators(r, n)
        m_num = reduced_numerators(r, npr)
        self.actions = [(a / (r * n), b / (r * npr)) for a in mu_num for b in m_num]
        self._mu = np.array([a for a, _ in self.actions])
        self._m = np.array([b for _, b in self.actions])
        self._bi = np.array([numerator_bucket(a, r, n) - 1 for a in mu_num for _ in m_num])
        self._bj = np.array([numerator_bucket(b, r, npr) - 1 for _ in mu_num for b in m_num])
        self._mu_hat = (2 * self._bi + 1) / (2 * n)
        self._vertices = None

    @classmethod
    def for_horizon(cls, T, groups, n, n_prime, k=2, r=None, lp_epsilon=1e-6, method="auto"):
        r = r if r is not None else default_r(T, groups, n, n_prime)
        grid = BucketGrid(n=n, r=r, n_prime=n_prime)
        return cls(groups, grid, default_eta(T, groups, n, n_prime, lp_epsilon), k, lp_epsilon, method)

    @property
    def tables(self) -> dict[str, CellTable]:
        return {"V": self.V, "M": self.M}

    @property
    def table_shapes(self):
        shape = (self.grid.n, self.grid.n_prime)
        return {"V": shape, "M": shape}

    # -- potentials -----------------------------------------------------
    def signed_coefficients(self, x: Example):
        """Signed-log C and D over all bucket pairs."""
        cs, cl = logspace.coefficients(self.V.stack(x.group_ids), self.eta)
        ds, dl = logspace.coefficients(self.M.stack(x.group_ids), self.eta)
        return (cs, cl), (ds, dl)

    def coefficients(self, x: Example) -> MomentCoefficients:
        (cs, cl), (ds, dl) = self.signed_coefficients(x)
        both = np.concatenate([cl[cs != 0], dl[ds != 0]])
        shift = float(both.max()) if both.size else 0.0
        c, _ = logspace.rescale(cs, cl, shift)
        d, _ = logspace.rescale(ds, dl, shift)
        return MomentCoefficients(c, d, moment_f(c, d, self.k, self.grid.n), shift)

    def log_surrogate_loss(self) -> float:
        untouched = 2 * (self.groups.group_count - self.V.touched_groups()) * self.V.cells_per_group
        arrays = [a for _, a in self.V.items()] + [a for _, a in self.M.items()]
        return logspace.log_surrogate(arrays, self.eta, untouched)

    def surrogate_loss(self) -> float:
        return math.exp(self.log_surrogate_loss())

    # -- game -----------------------------------------------------------
    def constant_terms(self, coeffs: MomentCoefficients) -> np.ndarray:
        bi, bj = self._bi, self._bj
        c, d = coeffs.c[bi, bj], coeffs.d[bi, bj]
        return -self._mu * c + self._mu_hat**self.k * d - self._m * d

    def action_f(self, coeffs: MomentCoefficients) -> np.ndarray:
        """(n_actions, k) matrix of psi-coefficients per action."""
        return coeffs.f[:, self._bi, self._bj].T

    def pair_mass(self, weights: np.ndarray) -> np.ndarray:
        mass = np.zeros((self.grid.n, self.grid.n_prime))
        np.add.at(mass, (self._bi, self._bj), weights)
        return mass

    def payoff_matrix(self, coeffs: MomentCoefficients, vertices: np.ndarray) -> np.ndarray:
        return self.constant_terms(coeffs)[:, None] + self.action_f(coeffs) @ vertices.T

    def vertices(self) -> np.ndarray:
        if self._vertices is None:
            self._vertices = np.array(list(itertools.product((0.0, 1.0), repeat=self.k)))
        return self._vertices

    def worst_case(self, coeffs: MomentCoefficients, weights: np.ndarray) -> float:
        psi = adversary_best_response(coeffs, self.pair_mass(weights))
        return float(weights @ (self.constant_terms(coeffs) + self.action_f(coeffs) @ psi))

    def dominant_actions(self, const: np.ndarray) -> np.ndarray:
        """Per bucket pair, the action with the smallest constant term.

        Actions in one pair share their psi-coefficients, so this action is
        pointwise no worse for the learner than its three siblings.
        """
        pair = self._bi * self.grid.n_prime + self._bj
        order = np.lexsort((np.arange(len(const)), const, pair))
        first = np.r_[True, pair[order][1:] != pair[order][:-1]]
        return np.sort(order[first])

    def solve_game(self, coeffs: MomentCoefficients, method: str | None = None) -> SolveResult:
        """Solve the round's game; the returned distribution covers every grid action."""
        method = method or self.method
        eps = self.lp_epsilon
        if method == "auto":
            method = "dense" if 2**self.k <= DENSE_LIMIT else "oracle"
        const = self.constant_terms(coeffs)
        fa = self.action_f(coeffs)
        rows = self.dominant_actions(const) if self.prune else np.arange(len(const))
        if method == "dense":
            matrix = truncate_coefficients(const[rows, None] + fa[rows] @ self.vertices().T, eps)
            res = solve_matrix(matrix)
        else:
            # per-component truncation keeps the payoff linear in psi; errors add to <= eps/2
            part = eps / (self.k + 1)
            const_t = truncate_coefficients(const[rows], part)
            fa_t = truncate_coefficients(fa[rows], part)

            def oracle(q):
                return tuple((q @ fa_t >= 0).astype(float))

            problem = MinimaxProblem(
                len(rows),
                lambda psi: const_t + fa_t @ np.asarray(psi),
                oracle,
                initial=(tuple([1.0] * self.k), tuple([0.0] * self.k)),
            )
            res = solve(problem, eps / 2)
        full = np.zeros(len(const))
        full[rows] = res.distribution
        res.distribution = full
        return res

    def decide(self, x: Example, method: str | None = None) -> MomentDecision:
        coeffs = self.coefficients(x)
        res = self.solve_game(coeffs, method)
        if not res.converged:
            log.warning("moment LP did not converge; sampling the best distribution found")
        w = res.distribution
        keep = np.flatnonzero(w > 0)
        dist = PredictionDistribution([self.actions[a] for a in keep], w[keep] / w[keep].sum())
        return MomentDecision(dist, w, res, coeffs, self.worst_case(coeffs, w))

    def distribution(self, x: Example) -> PredictionDistribution:
        return self.decide(x).distribution

    def predict(self, x: Example, rng: np.random.Generator) -> tuple[float, float]:
        return self.distribution(x).sample(rng)

    def cell_of(self, prediction: tuple[float, float]) -> tuple[int, int]:
        g = self.grid
        a = grid_numerator(prediction[0], g.denominator)
        b = grid_numerator(prediction[1], g.moment_denominator)
        return numerator_bucket(a, g.r, g.n), numerator_bucket(b, g.r, g.n_prime)

    def increments(self, prediction, y: float) -> tuple[int, int, float, float]:
        i, j = self.cell_of(prediction)
        mu_hat = bucket_midpoint(i, self.grid.n)
        return i, j, y - prediction[0], (y - mu_hat) ** self.k - prediction[1]

    def update(self, x: Example, prediction: tuple[float, float], y: float) -> None:
        y = check_label(y)
        prediction = (float(prediction[0]), float(prediction[1]))
        i, j, dv, dm = self.increments(prediction, y)
        deltas = []
        for g in x.group_ids:
            deltas.append(Delta("V", g, (i - 1, j - 1), dv))
            deltas.append(Delta("M", g, (i - 1, j - 1), dm))
        for d in deltas:
            self.tables[d.table].add(d.group, d.key, d.amount)
        self.transcript.append(x, prediction, y, deltas)

    def surrogate_increase(self, x: Example, dist: PredictionDistribution, y: float) -> float:
        v = self.eta * self.V.stack(x.group_ids)
        m = self.eta * self.M.stack(x.group_ids)
        shift = float(max(np.abs(v).max(), np.abs(m).max())) if v.size else 0.0
        total = 0.0
        for p, w in dist.items():
            i, j, dv, dm = self.increments(p, y)
            for arr, step in ((v[:, i - 1, j - 1], self.eta * dv), (m[:, i - 1, j - 1], self.eta * dm)):
                total += w * float(np.sum(np.exp(arr - shift) * np.expm1(step) + np.exp(-arr - shift) * np.expm1(-step)))
        return total
