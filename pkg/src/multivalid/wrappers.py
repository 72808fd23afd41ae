"""Residual wrapper for black-box point predictors and online-to-batch conversion."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import logspace
from .core import (
    BucketGrid,
    ConfigError,
    Example,
    GroupSystem,
    PredictionDistribution,
    Transcript,
    check_label,
)
from .interval import IntervalCalibrator, perturb_label, widen_interval
from .mean import MeanCalibrator
from .moment import MomentCalibrator

MODEL_FORMAT = "multivalid-batch-model"
MODEL_VERSION = 1


def _check_unit(name: str, v: float) -> float:
    v = float(v)
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"{name}={v} outside [0, 1]")
    return v


def center_residual(y: float, fx: float) -> float:
    return 0.5 + 0.5 * (_check_unit("y", y) - _check_unit("fx", fx))


def decenter_interval(interval: tuple[float, float], fx: float, epsilon: float = 0.0) -> tuple[float, float]:
    lo, hi = interval
    fx = _check_unit("fx", fx)
    return fx + 2 * lo - 1 - epsilon, fx + 2 * hi - 1 + epsilon


@dataclass
class WrappedPrediction:
    inner: tuple[float, float]  # interval for the (perturbed) centered residual
    interval: tuple[float, float]  # interval on the label scale


class ResidualWrapper:
    """Turns point predictions f(x) into intervals with multivalid coverage.

    With ``epsilon > 0`` the centered residuals are perturbed before being fed
    to the inner predictor, and emitted intervals are widened to compensate.
    """

    def __init__(self, inner: IntervalCalibrator, epsilon: float = 0.0):
        if epsilon < 0:
            raise ConfigError("epsilon must be nonnegative")
        self.inner = inner
        self.epsilon = epsilon

    def predict(self, x: Example, fx: float, rng: np.random.Generator) -> WrappedPrediction:
        fx = _check_unit("fx", fx)
        inner = self.inner.predict(x, rng)
        residual = widen_interval(inner, self.epsilon) if self.epsilon > 0 else inner
        return WrappedPrediction(inner, decenter_interval(residual, fx))

    def update(self, x: Example, fx: float, pred: WrappedPrediction, y: float, rng: np.random.Generator) -> float:
        """Feed the (perturbed) centered residual to the inner predictor; returns it."""
        target = center_residual(y, fx)
        if self.epsilon > 0:
            target = perturb_label(target, self.epsilon, rng)
        self.inner.update(x, pred.inner, target)
        return target


# -- online-to-batch ------------------------------------------------------

KINDS = ("mean", "moment", "interval")


def build_predictor(kind: str, hp: dict):
    groups = GroupSystem(hp["group_count"], hp.get("max_membership"))
    if kind == "mean":
        return MeanCalibrator(groups, BucketGrid(n=hp["n"], r=hp["r"]), hp["eta"])
    if kind == "moment":
        grid = BucketGrid(n=hp["n"], r=hp["r"], n_prime=hp["n_prime"])
        return MomentCalibrator(groups, grid, hp["eta"], hp["k"], hp.get("lp_epsilon", 1e-6))
    if kind == "interval":
        grid = BucketGrid(n=hp["n"], r=hp["r"])
        # warm starts change which optimal LP vertex is returned, so batch replay disables them
        return IntervalCalibrator(
            groups, grid, hp["eta"], hp["delta"], hp["rho"], hp.get("lp_epsilon", 1e-4), warm_start=0
        )
    raise ConfigError(f"unknown predictor kind {kind!r}")


@dataclass
class BatchModel:
    kind: str
    hyperparams: dict
    seed: int
    transcript: Transcript = field(repr=False)

    @property
    def T(self) -> int:
        return len(self.transcript)

    def save(self, path) -> None:
        rounds = [
            {"groups": list(r.groups), "prediction": r.prediction, "label": r.label}
            for r in self.transcript.rounds
        ]
        doc = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "kind": self.kind,
            "hyperparams": self.hyperparams,
            "seed": self.seed,
            "rounds": rounds,
        }
        with open(path, "w") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path) -> "BatchModel":
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("format") != MODEL_FORMAT:
            raise ValueError(f"{path} is not a batch model file")
        if doc.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {doc.get('version')}")
        # deltas are a deterministic function of the rounds: recompute them
        pred = build_predictor(doc["kind"], doc["hyperparams"])
        for rec in doc["rounds"]:
            p = rec["prediction"]
            pred.update(Example(tuple(rec["groups"])), tuple(p) if isinstance(p, list) else p, rec["label"])
        return cls(doc["kind"], doc["hyperparams"], doc["seed"], pred.transcript)

    def state_at(self, t: int, groups: Sequence[int]):
        """Predictor holding the state after t - 1 rounds, restricted to ``groups``."""
        pred = build_predictor(self.kind, self.hyperparams)
        wanted = set(groups)
        for round_deltas in self.transcript.deltas[: t - 1]:
            for d in round_deltas:
                if d.group in wanted:
                    pred.tables[d.table].add(d.group, d.key, d.amount)
        return pred

    def round_distribution(self, t: int, x: Example) -> PredictionDistribution:
        return self.state_at(t, x.group_ids).distribution(x)


def batch_train(
    dataset: Sequence[Example],
    kind: str,
    hyperparams: dict,
    seed: int,
) -> BatchModel:
    """Run the online predictor once over the dataset, keeping every round's deltas."""
    if not dataset:
        raise ValueError("dataset is empty")
    for idx, ex in enumerate(dataset):
        if ex.label is None or not 0.0 <= ex.label <= 1.0:
            raise ValueError(f"row {idx}: label {ex.label} missing or outside [0, 1]")
    pred = build_predictor(kind, hyperparams)
    rng = np.random.default_rng(seed)
    for ex in dataset:
        p = pred.predict(ex, rng)
        pred.update(ex, p, ex.label)
    return BatchModel(kind, dict(hyperparams), seed, pred.transcript)


def batch_predict(model: BatchModel, x: Example, rng: np.random.Generator):
    t = int(rng.integers(1, model.T + 1))
    return model.round_distribution(t, x).sample(rng)


def mean_round_tables(model: BatchModel, groups: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Support points (T, 2) and probabilities (T, 2) of h_1..h_T for one membership pattern.

    Vectorized over rounds; agrees with ``round_distribution`` up to float
    rounding in the log-sum-exp.
    """
    if model.kind != "mean":
        raise ConfigError("round tables are only available for the mean kind")
    hp = model.hyperparams
    n, r, eta, T = hp["n"], hp["r"], hp["eta"], model.T
    col = {g: c for c, g in enumerate(groups)}
    inc = np.zeros((T, len(groups), n))
    for t, round_deltas in enumerate(model.transcript.deltas):
        for d in round_deltas:
            c = col.get(d.group)
            if c is not None:
                inc[t, c, d.key[0]] += d.amount
    states = np.zeros_like(inc)
    np.cumsum(inc[:-1], axis=0, out=states[1:])
    s, l = logspace.log_two_sinh(eta * states)
    sign, logmag = logspace.signed_sum(s, l, axis=1)  # (T, n)

    support = np.zeros((T, 2))
    probs = np.zeros((T, 2))
    all_pos = np.all(sign > 0, axis=1)
    all_neg = np.all(sign < 0, axis=1)
    prod = sign[:, :-1] * sign[:, 1:]
    has = np.any(prod <= 0, axis=1) if n > 1 else np.zeros(T, bool)
    first = np.argmax(prod <= 0, axis=1) if n > 1 else np.zeros(T, int)
    rows = np.arange(T)
    i_star = first + 1
    lo_mag = logmag[rows, np.minimum(first, n - 1)]
    hi_mag = logmag[rows, np.minimum(first + 1, n - 1)]
    with np.errstate(invalid="ignore"):
        q = expit(hi_mag - lo_mag)
    q = np.where(np.isneginf(hi_mag), np.where(np.isneginf(lo_mag), 1.0, 0.0), q)
    rand = has & ~all_pos & ~all_neg
    support[:, 0] = np.where(rand, (i_star * r - 1) / (r * n), np.where(all_neg, 0.0, 1.0))
    support[:, 1] = np.where(rand, i_star / n, support[:, 0])
    probs[:, 0] = np.where(rand, q, 1.0)
    probs[:, 1] = 1.0 - probs[:, 0]
    return support, probs


def batch_bound(T: int, group_count: int, n: int, lam: float, eps: float = 0.1) -> float:
    """Calibration error bound for the mixture predictor trained on T i.i.d. samples."""
    return (6 + eps) * math.sqrt(2 / T * math.log(4 * group_count * n / lam))
