"""Seeded simulation of the online protocol for each predictor kind."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .. import interval as interval_mod
from .. import mean as mean_mod
from .. import moment as moment_mod
from ..core import BucketGrid, ConfigError, GroupSystem, Transcript, cover
from ..interval import IntervalCalibrator, PerturbationConfig, empirical_window_mass, perturb_label, widen_interval
from ..mean import MeanCalibrator
from ..moment import MomentCalibrator
from .adversaries import Adversary, AdversaryConfig
from .report import MultivalidityReport, multivalidity_report

log = logging.getLogger(__name__)


@dataclass
class SimulationConfig:
    kind: str
    T: int
    group_count: int
    n: int
    seed: int = 0
    adversary: AdversaryConfig | None = None  # defaults to i.i.d. labels seeded from seed + 1
    r: int | None = None
    eta: float | None = None
    eta_mode: str = mean_mod.FINITE_GROUPS
    max_membership: int | None = None
    lam: float = 0.05
    # moment
    n_prime: int | None = None
    k: int = 2
    # moment and interval
    lp_epsilon: float | None = None
    # interval
    delta: float | None = None
    rho: float | None = None
    epsilon: float | None = None  # label perturbation; replaces rho and r

    def __post_init__(self):
        if self.adversary is None:
            labels = "bernoulli" if self.kind == "mean" else "beta"
            self.adversary = AdversaryConfig(group_count=self.group_count, seed=self.seed + 1, labels=labels)

    def validate(self) -> None:
        if self.kind not in ("mean", "moment", "interval"):
            raise ConfigError(f"kind: unknown predictor kind {self.kind!r}")
        if self.T < 0:
            raise ConfigError("T: must be nonnegative")
        if self.group_count < 1:
            raise ConfigError("group_count: must be positive")
        if self.n < 1:
            raise ConfigError("n: must be positive")
        if self.r is not None and self.r < 1:
            raise ConfigError("r: must be positive")
        if not 0 < self.lam < 1:
            raise ConfigError("lam: must lie in (0, 1)")
        if self.adversary.group_count != self.group_count:
            raise ConfigError("adversary.group_count: must equal group_count")
        if self.kind == "moment" and (self.n_prime is None or self.n_prime < 1):
            raise ConfigError("n_prime: required and positive for moment runs")
        if self.kind == "interval":
            if self.delta is None or not 0 <= self.delta <= 1:
                raise ConfigError("delta: required in [0, 1] for interval runs")
            if self.epsilon is None and (self.rho is None or self.r is None):
                raise ConfigError("rho: interval runs need rho and r, or a perturbation epsilon")
            if self.epsilon is not None and self.epsilon <= 0:
                raise ConfigError("epsilon: must be positive")

    @property
    def groups(self) -> GroupSystem:
        return GroupSystem(self.group_count, self.max_membership)


def build_learner(cfg: SimulationConfig):
    groups, T = cfg.groups, cfg.T
    if cfg.kind == "mean":
        r = cfg.r or mean_mod.default_r(T, groups, cfg.n)
        eta = cfg.eta or mean_mod.default_eta(T, groups, cfg.n, cfg.eta_mode)
        return MeanCalibrator(groups, BucketGrid(n=cfg.n, r=r), eta)
    if cfg.kind == "moment":
        eps = 1e-6 if cfg.lp_epsilon is None else cfg.lp_epsilon
        r = cfg.r or moment_mod.default_r(T, groups, cfg.n, cfg.n_prime)
        eta = cfg.eta or moment_mod.default_eta(T, groups, cfg.n, cfg.n_prime, eps)
        return MomentCalibrator(groups, BucketGrid(n=cfg.n, r=r, n_prime=cfg.n_prime), eta, cfg.k, eps)
    eps = 1e-4 if cfg.lp_epsilon is None else cfg.lp_epsilon
    if cfg.epsilon is not None:
        pert = PerturbationConfig(cfg.epsilon, T, cfg.n)
        r, rho = pert.r, pert.rho
    else:
        r, rho = cfg.r, cfg.rho
    eta = cfg.eta or interval_mod.default_eta(T, groups, cfg.n, eps)
    return IntervalCalibrator(groups, BucketGrid(n=cfg.n, r=r), eta, cfg.delta, rho, eps)


def theorem_bound(cfg: SimulationConfig, learner) -> float:
    groups, T = cfg.groups, cfg.T
    if cfg.kind == "mean":
        return mean_mod.hp_bound(T, groups, learner.grid, cfg.lam)
    if cfg.kind == "moment":
        return moment_mod.hp_bound(T, groups, learner.grid, cfg.lam, learner.lp_epsilon)
    return interval_mod.hp_bound(T, groups, cfg.n, learner.rho, cfg.lam, learner.lp_epsilon)


def run_simulation(cfg: SimulationConfig) -> tuple[Transcript, MultivalidityReport]:
    """Play T rounds: example, published strategy, committed label, sampled prediction, update.

    For perturbed interval runs the transcript holds the perturbed labels the
    learner trained on; label-scale coverage of the widened intervals goes into
    the report extras.
    """
    cfg.validate()
    if cfg.T == 0:
        return Transcript(), MultivalidityReport(cfg.kind, 0, lam=cfg.lam)
    learner = build_learner(cfg)
    adversary = Adversary(cfg.adversary, cfg.T)
    rng = np.random.default_rng(cfg.seed)
    wide_hits = 0
    for t in range(1, cfg.T + 1):
        x = adversary.example(t)
        published = learner.distribution(x)
        y = adversary.label(t, x, learner, published)
        p = published.sample(rng)
        target = y
        if cfg.kind == "interval" and cfg.epsilon is not None:
            target = perturb_label(y, cfg.epsilon, rng)
            wide_hits += cover(widen_interval(p, cfg.epsilon), y)
        learner.update(x, p, target)

    grid = learner.grid
    report = multivalidity_report(
        learner.transcript,
        cfg.groups,
        grid,
        cfg.kind,
        delta=cfg.delta,
        k=cfg.k,
        bound=theorem_bound(cfg, learner),
        lam=cfg.lam,
    )
    report.extras.update({"n": grid.n, "r": grid.r, "eta": learner.eta, "seed": cfg.seed})
    if cfg.kind == "interval":
        report.extras["rho"] = learner.rho
        # smoothness is assumed, not checked; the marginal window mass is only a diagnostic
        mass = empirical_window_mass([r.label for r in learner.transcript.rounds], 1 / grid.denominator)
        report.extras["empirical_window_mass"] = mass
        log.info("largest label mass in a width-1/%d window: %.4g (rho %.4g)", grid.denominator, mass, learner.rho)
        if cfg.epsilon is not None:
            report.extras["label_scale_coverage"] = wide_hits / cfg.T
    if cfg.kind == "moment":
        report.extras["n_prime"] = grid.n_prime
    if report.passed is False:
        log.info("seed %d: alpha %.4g exceeds bound %.4g", cfg.seed, report.alpha, report.bound)
    return learner.transcript, report
