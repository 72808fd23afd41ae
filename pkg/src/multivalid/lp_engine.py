"""Per-round minimax solver: restricted-game cutting planes with a gap certificate.

The learner minimizes, over distributions Q on a finite action list, the
maximum expected payoff an adversary can extract. The adversary is accessed
only through a best-response oracle, so its strategy set may be huge (or
continuous) as long as the oracle is exact.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy.optimize import linprog

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MinimaxProblem:
    """A finite-action minimax game.

    Attributes:
        n_actions: number of learner pure strategies.
        column: maps an adversary pure strategy to the payoff vector over all
            learner actions (payoff is paid by the learner, who minimizes).
        oracle: maps a distribution over learner actions to an adversary pure
            strategy maximizing the expected payoff against it.
        initial: adversary strategies seeding the restricted game.
    """

    n_actions: int
    column: Callable[[Any], np.ndarray]
    oracle: Callable[[np.ndarray], Any]
    initial: Sequence[Any] = ()

    @classmethod
    def from_payoff(
        cls,
        actions: Sequence[Any],
        payoff: Callable[[Any, Any], float],
        oracle: Callable[[np.ndarray], Any],
        initial: Sequence[Any] = (),
    ) -> "MinimaxProblem":
        def column(b):
            return np.array([payoff(a, b) for a in actions], dtype=float)

        return cls(len(actions), column, oracle, tuple(initial))


@dataclass
class SolveResult:
    distribution: np.ndarray
    value_upper: float
    value_lower: float
    converged: bool
    iterations: int
    adversaries: list = field(default_factory=list)

    @property
    def gap(self) -> float:
        return self.value_upper - self.value_lower


def solve_restricted(matrix: np.ndarray) -> tuple[np.ndarray, float]:
    """Exact min over the simplex of the max over columns of Q @ matrix.

    ``matrix`` has one row per learner action and one column per adversary
    strategy. Solved with the HiGHS dual simplex, which is deterministic.
    """
    m, k = matrix.shape
    if m == 1:
        return np.ones(1), float(matrix[0].max())
    c = np.zeros(m + 1)
    c[-1] = 1.0
    a_ub = np.hstack([matrix.T, -np.ones((k, 1))])
    a_eq = np.ones((1, m + 1))
    a_eq[0, -1] = 0.0
    bounds = [(0.0, None)] * m + [(None, None)]
    res = linprog(c, A_ub=a_ub, b_ub=np.zeros(k), A_eq=a_eq, b_eq=[1.0], bounds=bounds, method="highs-ds")
    if res.status != 0:
        raise RuntimeError(f"restricted LP failed: {res.message}")
    q = np.clip(res.x[:m], 0.0, None)
    q /= q.sum()
    return q, float(res.x[-1])


def solve_matrix(matrix: np.ndarray) -> SolveResult:
    """Solve a game whose adversary strategies are all listed as columns."""
    matrix = np.asarray(matrix, dtype=float)
    scale = _scale_of(matrix)
    q, value = solve_restricted(matrix / scale)
    upper = float((q @ matrix).max())
    return SolveResult(q, upper, min(value * scale, upper), True, 1)


def _scale_of(a: np.ndarray) -> float:
    top = float(np.abs(a).max()) if a.size else 0.0
    if top == 0.0 or not np.isfinite(top):
        return 1.0
    # power of two so that rescaling is exact
    return 2.0 ** math.ceil(math.log2(top))


def solve(problem: MinimaxProblem, epsilon: float, max_iter: int | None = None) -> SolveResult:
    """Double-oracle loop: stop once the oracle's payoff is within epsilon of the restricted value."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    n = problem.n_actions
    if max_iter is None:
        max_iter = 10 * n + 1000

    strategies = list(problem.initial)
    if not strategies:
        strategies.append(problem.oracle(np.full(n, 1.0 / n)))
    cols = [np.asarray(problem.column(b), dtype=float) for b in strategies]
    scale = _scale_of(np.column_stack(cols))

    best_q, best_upper = None, math.inf
    lower = -math.inf
    it = 0
    for it in range(1, max_iter + 1):
        q, restricted = solve_restricted(np.column_stack(cols) / scale)
        lower = max(lower, restricted * scale)
        b = problem.oracle(q)
        col = np.asarray(problem.column(b), dtype=float)
        upper = float(q @ col)
        if upper < best_upper:
            best_q, best_upper = q, upper
        if best_upper - lower <= epsilon:
            return SolveResult(best_q, best_upper, lower, True, it, strategies)
        if any(np.array_equal(col, c) for c in cols):
            # the oracle returned a known column yet the gap is open: LP round-off
            break
        strategies.append(b)
        cols.append(col)
    log.warning("minimax solve stopped after %d iterations, gap %.3g", it, best_upper - lower)
    return SolveResult(best_q, best_upper, min(lower, best_upper), False, it, strategies)


def truncation_bits(epsilon: float) -> int:
    """Smallest b >= 0 with 2**-b <= epsilon / 2."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    b = max(0, math.ceil(math.log2(2.0 / epsilon)))
    while 2.0**-b > epsilon / 2:
        b += 1
    while b > 0 and 2.0 ** -(b - 1) <= epsilon / 2:
        b -= 1
    return b


def truncate_coefficients(values, epsilon: float) -> np.ndarray:
    """Round each value down to a multiple of 2**-b, where 2**-b <= epsilon/2."""
    b = truncation_bits(epsilon)
    return np.floor(np.asarray(values, dtype=float) * 2.0**b) / 2.0**b
