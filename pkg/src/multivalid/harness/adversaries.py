"""Label-generating adversaries for simulations.

An adversary sees the public history and the current example, commits to a
label distribution, and only then is the label drawn. Its randomness comes
from its own generator, never from the learner's.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import ConfigError, Example, PredictionDistribution

IID, SHIFT, ADAPTIVE = "iid", "shift", "adaptive"
KINDS = (IID, SHIFT, ADAPTIVE)
BERNOULLI, BETA = "bernoulli", "beta"


@dataclass
class AdversaryConfig:
    kind: str = IID
    group_count: int = 1
    seed: int = 0
    membership: float = 0.3  # chance of joining each group, independently
    labels: str = BERNOULLI
    base_rates: tuple[float, ...] | None = None  # per-group label mean
    concentrations: tuple[float, ...] | None = None  # per-group Beta concentration
    shift_at: float = 0.5  # fraction of the horizon after which rates flip

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"adversary.kind: expected one of {KINDS}, got {self.kind!r}")
        if self.group_count < 1:
            raise ConfigError("adversary.group_count: must be positive")
        if not 0 <= self.membership <= 1:
            raise ConfigError("adversary.membership: must lie in [0, 1]")
        if self.labels not in (BERNOULLI, BETA):
            raise ConfigError(f"adversary.labels: unknown label model {self.labels!r}")
        if self.base_rates is not None:
            if len(self.base_rates) != self.group_count:
                raise ConfigError("adversary.base_rates: need one rate per group")
            if not all(0 <= b <= 1 for b in self.base_rates):
                raise ConfigError("adversary.base_rates: rates must lie in [0, 1]")
        if self.concentrations is not None:
            if len(self.concentrations) != self.group_count or min(self.concentrations) <= 0:
                raise ConfigError("adversary.concentrations: need one positive value per group")
        if not 0 <= self.shift_at <= 1:
            raise ConfigError("adversary.shift_at: must lie in [0, 1]")


class Adversary:
    """Draws examples and labels for one run."""

    def __init__(self, config: AdversaryConfig, T: int):
        config.validate()
        self.config = config
        self.T = T
        self.rng = np.random.default_rng(config.seed)
        G = config.group_count
        self.rates = np.asarray(
            config.base_rates if config.base_rates is not None else np.linspace(0.2, 0.8, G), dtype=float
        )
        self.conc = np.asarray(
            config.concentrations if config.concentrations is not None else np.linspace(2.0, 20.0, G), dtype=float
        )

    def example(self, t: int) -> Example:
        mask = self.rng.random(self.config.group_count) < self.config.membership
        return Example(tuple(int(g) for g in np.flatnonzero(mask)))

    def label_mean(self, t: int, x: Example) -> float:
        """Mean of the committed label law for round t (1-based)."""
        if not x.group_ids:
            return 0.5
        mean = float(self.rates[list(x.group_ids)].mean())
        if self.config.kind == SHIFT and t > self.config.shift_at * self.T:
            mean = 1.0 - mean
        return mean

    def label(self, t: int, x: Example, learner=None, published: PredictionDistribution | None = None) -> float:
        if self.config.kind == ADAPTIVE:
            if learner is None or published is None:
                raise ValueError("the adaptive adversary needs the learner's published strategy")
            # the learner's state is a function of the public transcript; Q is announced before y
            up = learner.surrogate_increase(x, published, 1.0)
            down = learner.surrogate_increase(x, published, 0.0)
            return 1.0 if up >= down else 0.0
        mean = self.label_mean(t, x)
        if self.config.labels == BERNOULLI:
            return float(self.rng.random() < mean)
        conc = float(self.conc[list(x.group_ids)].min()) if x.group_ids else 5.0
        a = max(mean * conc, 1e-3)
        b = max((1 - mean) * conc, 1e-3)
        return float(self.rng.beta(a, b))
