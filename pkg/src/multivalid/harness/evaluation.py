"""Holdout evaluation of batch (mixture) predictors."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from ..core import Example, cover, grid_numerator, numerator_bucket
from ..wrappers import BatchModel, batch_bound, batch_predict, mean_round_tables


@dataclass
class HoldoutCell:
    group_id: int
    bucket: tuple[int, ...]
    estimate: float  # signed calibration error (or coverage deviation), unconditional on G
    stderr: float
    count: int  # holdout points in the group


def _mean_terms(model: BatchModel, holdout: list[Example], draws: int, rng: np.random.Generator, terms) -> None:
    """Fill per-point terms for the mean kind, vectorized over points sharing a membership pattern."""
    hp = model.hyperparams
    n, r = hp["n"], hp["r"]
    patterns = defaultdict(list)
    for idx, ex in enumerate(holdout):
        patterns[ex.group_ids].append(idx)
    for key, idxs in patterns.items():
        if not key:
            continue
        idxs = np.asarray(idxs)
        support, probs = mean_round_tables(model, key)
        t = rng.integers(0, model.T, size=(len(idxs), draws))
        second = rng.random((len(idxs), draws)) >= probs[t, 0]
        preds = np.where(second, support[t, 1], support[t, 0])
        buckets = np.minimum(np.rint(preds * r * n).astype(np.int64) // r + 1, n)
        labels = np.array([holdout[i].label for i in idxs])
        resid = labels[:, None] - preds
        for i in np.unique(buckets):
            per_point = np.where(buckets == i, resid, 0.0).mean(axis=1)
            for g in key:
                terms[(g, (int(i),))][idxs] += per_point


def holdout_errors(
    model: BatchModel, holdout: list[Example], draws: int, rng: np.random.Generator
) -> list[HoldoutCell]:
    """Estimate every (group, bucket) error of the mixture predictor on a labelled holdout.

    Each point contributes the average over ``draws`` fresh predictions, so the
    per-point terms are i.i.d. and the standard error follows from their spread.
    """
    hp = model.hyperparams
    n, r = hp["n"], hp["r"]
    N = len(holdout)
    if N == 0:
        return []
    terms = defaultdict(lambda: np.zeros(N))
    if model.kind == "mean":
        _mean_terms(model, holdout, draws, rng, terms)
    else:
        delta = hp.get("delta")
        for idx, ex in enumerate(holdout):
            for _ in range(draws):
                p = batch_predict(model, ex, rng)
                if model.kind == "moment":
                    a = grid_numerator(p[0], r * n)
                    b = grid_numerator(p[1], r * hp["n_prime"])
                    key = (numerator_bucket(a, r, n), numerator_bucket(b, r, hp["n_prime"]))
                    val = ex.label - p[0]
                else:
                    a, b = grid_numerator(p[0], r * n), grid_numerator(p[1], r * n)
                    key = (numerator_bucket(a, r, n), numerator_bucket(b, r, n))
                    val = cover(p, ex.label) - (1 - delta)
                for g in ex.group_ids:
                    terms[(g, key)][idx] += val / draws
    counts = defaultdict(int)
    for ex in holdout:
        for g in ex.group_ids:
            counts[g] += 1
    cells = []
    for (g, key), v in sorted(terms.items()):
        cells.append(HoldoutCell(g, key, float(v.mean()), float(v.std(ddof=1) / math.sqrt(N)) if N > 1 else 0.0, counts[g]))
    return cells


def holdout_summary(model: BatchModel, cells: list[HoldoutCell], lam: float, slack_sigmas: float = 3.0) -> dict:
    hp = model.hyperparams
    bound = batch_bound(model.T, hp["group_count"], hp["n"], lam) if model.kind == "mean" else None
    worst = max(cells, key=lambda c: abs(c.estimate), default=None)
    if bound is None or worst is None:
        passed = None
    else:
        passed = all(abs(c.estimate) <= bound + slack_sigmas * c.stderr for c in cells)
    return {
        "kind": model.kind,
        "T": model.T,
        "alpha": abs(worst.estimate) if worst else 0.0,
        "bound": bound,
        "lambda": lam,
        "passed": passed,
    }
