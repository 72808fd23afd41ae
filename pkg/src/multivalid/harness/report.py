"""Multivalidity reports recomputed from raw transcripts."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field

from ..core import BucketGrid, GroupSystem, Round, cover, grid_numerator, numerator_bucket
from ..moment import beta_from_alpha, bucket_midpoint

SCHEMA_VERSION = 1
BASE_COLUMNS = ["group_id", "bucket_i", "bucket_j", "count", "stat_true", "stat_pred", "abs_error_over_T"]
MOMENT_COLUMNS = ["moment_true", "moment_pred", "mean_error_over_T", "moment_error_over_T", "centered_moment_gap"]


@dataclass
class MultivalidityReport:
    kind: str
    T: int
    rows: list[dict] = field(default_factory=list)
    alpha: float = 0.0
    bound: float | None = None
    lam: float | None = None
    beta: float | None = None
    coverage: float | None = None
    extras: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool | None:
        if self.bound is None:
            return None
        return self.alpha <= self.bound

    def summary(self) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "kind": self.kind,
            "T": self.T,
            "cells": len(self.rows),
            "alpha": self.alpha,
            "bound": self.bound,
            "lambda": self.lam,
            "passed": self.passed,
        }
        if self.beta is not None:
            out["beta"] = self.beta
        if self.coverage is not None:
            out["coverage"] = self.coverage
        out.update(self.extras)
        return out

    def write_csv(self, path) -> None:
        cols = BASE_COLUMNS + (MOMENT_COLUMNS if self.kind == "moment" else [])
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({c: "" if row.get(c) is None else row[c] for c in cols})

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _mean_cells(rounds, grid):
    cells = defaultdict(lambda: [0, 0.0, 0.0])
    for rnd in rounds:
        i = numerator_bucket(grid_numerator(rnd.prediction, grid.denominator), grid.r, grid.n)
        for g in rnd.groups:
            c = cells[(g, i, None)]
            c[0] += 1
            c[1] += rnd.label
            c[2] += rnd.prediction
    return cells


def _pair(rnd, grid, kind):
    p = rnd.prediction
    if kind == "moment":
        a = grid_numerator(p[0], grid.denominator)
        b = grid_numerator(p[1], grid.moment_denominator)
        return numerator_bucket(a, grid.r, grid.n), numerator_bucket(b, grid.r, grid.n_prime)
    a, b = grid_numerator(p[0], grid.denominator), grid_numerator(p[1], grid.denominator)
    return numerator_bucket(a, grid.r, grid.n), numerator_bucket(b, grid.r, grid.n)


def multivalidity_report(
    rounds: list[Round],
    groups: GroupSystem,
    grid: BucketGrid,
    kind: str,
    *,
    delta: float | None = None,
    k: int = 2,
    bound: float | None = None,
    lam: float | None = None,
) -> MultivalidityReport:
    """Per-cell statistics straight from the rounds; ``rounds`` may be a Transcript."""
    rounds = list(getattr(rounds, "rounds", rounds))
    T = len(rounds)
    for rnd in rounds:
        groups.validate(rnd.groups)
    report = MultivalidityReport(kind, T, bound=bound, lam=lam)
    if T == 0:
        return report

    if kind == "mean":
        for (g, i, _), (cnt, ys, ps) in sorted(_mean_cells(rounds, grid).items()):
            report.rows.append(
                dict(group_id=g, bucket_i=i, bucket_j=None, count=cnt, stat_true=ys / cnt,
                     stat_pred=ps / cnt, abs_error_over_T=abs(ys - ps) / T)
            )
    elif kind == "moment":
        members = defaultdict(list)
        for rnd in rounds:
            cell = _pair(rnd, grid, kind)
            for g in rnd.groups:
                members[(g, *cell)].append(rnd)
        for (g, i, j), rs in sorted(members.items()):
            cnt = len(rs)
            mu_hat = bucket_midpoint(i, grid.n)
            ys = sum(r.label for r in rs)
            mus = sum(r.prediction[0] for r in rs)
            ms = sum(r.prediction[1] for r in rs)
            mk = sum((r.label - mu_hat) ** k for r in rs)
            y_bar = ys / cnt
            centered = sum((r.label - y_bar) ** k for r in rs)
            v_err, m_err = abs(ys - mus) / T, abs(mk - ms) / T
            report.rows.append(
                dict(group_id=g, bucket_i=i, bucket_j=j, count=cnt, stat_true=y_bar, stat_pred=mus / cnt,
                     abs_error_over_T=max(v_err, m_err), moment_true=mk / cnt, moment_pred=ms / cnt,
                     mean_error_over_T=v_err, moment_error_over_T=m_err,
                     centered_moment_gap=abs(centered - ms) / T)
            )
    elif kind == "interval":
        if delta is None:
            raise ValueError("interval reports need delta")
        cells = defaultdict(lambda: [0, 0])
        hits = 0
        for rnd in rounds:
            cov = cover(rnd.prediction, rnd.label)
            hits += cov
            cell = _pair(rnd, grid, kind)
            for g in rnd.groups:
                c = cells[(g, *cell)]
                c[0] += 1
                c[1] += cov
        for (g, i, j), (cnt, h) in sorted(cells.items()):
            report.rows.append(
                dict(group_id=g, bucket_i=i, bucket_j=j, count=cnt, stat_true=h / cnt, stat_pred=1 - delta,
                     abs_error_over_T=abs(h - (1 - delta) * cnt) / T)
            )
        report.coverage = hits / T
    else:
        raise ValueError(f"unknown report kind {kind!r}")

    report.alpha = max((row["abs_error_over_T"] for row in report.rows), default=0.0)
    if kind == "moment":
        report.beta = beta_from_alpha(report.alpha, k, grid.n)
        gap = max(row["centered_moment_gap"] for row in report.rows)
        report.extras["centered_moment_gap"] = gap
        report.extras["centered_moment_within_beta"] = gap <= report.beta
    return report
