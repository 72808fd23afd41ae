"""Acceptance criteria 1-10, each at its stated tolerance.

Every test prints one PASS/FAIL line; the assertion then enforces the same
condition. The statistical runs are slow, so the module is marked ``slow``.
"""

import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from oracles import dense_value

from multivalid.core import BucketGrid, Example, GroupSystem, cover
from multivalid.harness import AdversaryConfig, SimulationConfig, run_simulation
from multivalid.harness.evaluation import holdout_errors
from multivalid.interval import (
    IntervalCalibrator,
    greedy_smooth,
    greedy_smooth_exact,
    perturb_label,
    widen_interval,
)
from multivalid.lp_engine import solve_matrix, truncate_coefficients
from multivalid.mean import MeanCalibrator, default_eta, default_r
from multivalid.moment import MomentCalibrator, adversary_best_response, beta_from_alpha
from multivalid.wrappers import batch_bound, batch_train, center_residual, decenter_interval

pytestmark = pytest.mark.slow

LAM = 0.05


@pytest.fixture
def verdict(capsys):
    def emit(number: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nACCEPTANCE {number:2d} {'PASS' if ok else 'FAIL'}: {detail}")

    return emit


def random_membership(rng, G, p=0.5):
    return Example(tuple(int(g) for g in np.flatnonzero(rng.random(G) < p)))


# 1 -----------------------------------------------------------------------
def test_1_mean_high_probability_bound(verdict):
    T, G, n, seeds = 20_000, 10, 10, 20
    passes, worst = {}, 0.0
    for kind in ("iid", "shift"):
        passes[kind] = 0
        for seed in range(seeds):
            adv = AdversaryConfig(kind, G, seed=1000 + seed, membership=0.3)
            cfg = SimulationConfig("mean", T, G, n, seed=seed, adversary=adv, lam=LAM)
            _, rep = run_simulation(cfg)
            # report bound: 1/(rn) + 4 sqrt(2 ln(2|G|n/lam)/T) with r from the horizon formula
            want = 1 / (rep.extras["r"] * n) + 4 * math.sqrt(2 * math.log(2 * G * n / LAM) / T)
            assert math.isclose(rep.bound, want, rel_tol=1e-12)
            passes[kind] += rep.alpha <= want
            worst = max(worst, rep.alpha / want)
    ok = all(v >= 19 for v in passes.values())
    verdict(1, ok, f"iid {passes['iid']}/20, shift {passes['shift']}/20 seeds within bound; worst alpha/bound {worst:.3f}")
    assert ok


# 2 -----------------------------------------------------------------------
def test_2_mean_equilibrium_identities(verdict):
    T, G, n, r = 5000, 6, 10, 5
    groups = GroupSystem(G)
    cal = MeanCalibrator(groups, BucketGrid(n=n, r=r), default_eta(T, groups, n))
    rng = np.random.default_rng(2)
    rn = r * n
    failures = 0
    for _ in range(T):
        x = random_membership(rng, G)
        d = cal.decide(x)
        c = d.coeffs
        if d.i_star is not None:
            a, b = c[d.i_star - 1], c[d.i_star]
            failures += not abs(d.q * a + (1 - d.q) * b) <= 1e-9 * max(abs(a), abs(b), 1e-300)
        l_scaled = math.exp(cal.log_surrogate_loss() - d.log_scale)
        for y in (0.0, 1.0):
            val = sum(
                w * (y - p) * c[min(int(round(p * rn)) // r + 1, n) - 1] for p, w in d.distribution.items()
            )
            failures += not val <= l_scaled / rn * (1 + 1e-12)
        p = d.distribution.sample(rng)
        y = float(rng.random() < 0.2 + 0.6 * (0 in x.group_ids))
        cal.update(x, p, y)
    verdict(2, failures == 0, f"{T} rounds, {failures} identity or value-bound failures")
    assert failures == 0


# 3 -----------------------------------------------------------------------
def test_3_moment_best_response_vs_brute_force(verdict):
    rng = np.random.default_rng(3)
    failures = 0
    count = 0
    for k in (2, 4, 6, 8, 10):
        for _ in range(100):
            cal = MomentCalibrator(GroupSystem(3), BucketGrid(n=3, r=2, n_prime=3), 0.1, k)
            for g in range(3):
                cal.V.add(g, (slice(None), slice(None)), rng.normal(scale=3, size=(3, 3)) / cal.eta)
                cal.M.add(g, (slice(None), slice(None)), rng.normal(scale=3, size=(3, 3)) / cal.eta)
            co = cal.coefficients(random_membership(rng, 3, 0.7))
            mass = rng.dirichlet(np.ones(9)).reshape(3, 3)
            s = np.tensordot(co.f, mass, axes=([1, 2], [0, 1]))
            best = max(float(np.dot(v, s)) for v in itertools.product((0, 1), repeat=k))
            psi = adversary_best_response(co, mass)
            failures += float(psi @ s) != best
            failures += bool(np.any(psi[s == 0] != 1))
            count += 1
    verdict(3, failures == 0, f"{count} states over k in 2..10, {failures} mismatches")
    assert failures == 0


# 4 -----------------------------------------------------------------------
def test_4_moment_lp_value(verdict):
    eps = 1e-6
    rng = np.random.default_rng(4)
    failures, worst_gap = 0, 0.0
    for inst in range(200):
        cal = MomentCalibrator(GroupSystem(3), BucketGrid(n=5, r=3, n_prime=5), 0.05, 2, eps, prune=False)
        for g in range(3):
            steps = int(rng.integers(0, 60))
            cal.V.add(g, (slice(None), slice(None)), rng.normal(scale=math.sqrt(steps + 1), size=(5, 5)))
            cal.M.add(g, (slice(None), slice(None)), rng.normal(scale=math.sqrt(steps + 1), size=(5, 5)))
        x = random_membership(rng, 3, 0.7)
        co = cal.coefficients(x)
        ref = dense_value(cal.payoff_matrix(co, cal.vertices()))
        l_scaled = math.exp(cal.log_surrogate_loss() - co.log_scale)
        cap = l_scaled * (1 / cal.grid.denominator + 1 / cal.grid.moment_denominator) + eps
        method = "dense" if inst % 2 == 0 else "oracle"
        got = cal.worst_case(co, cal.solve_game(co, method).distribution)
        worst_gap = max(worst_gap, got - ref)
        failures += not (abs(got - ref) <= eps and got <= cap)
    verdict(4, failures == 0, f"200 states (dense and oracle paths), max value - exact {worst_gap:.2e}, {failures} failures")
    assert failures == 0


# 5 -----------------------------------------------------------------------
def test_5_moment_statistical_bound(verdict):
    T, G, n, n_prime, k = 20_000, 5, 10, 5, 2
    passes, worst = 0, 0.0
    for seed in range(10):
        adv = AdversaryConfig("iid", G, seed=500 + seed, labels="beta", membership=0.3)
        cfg = SimulationConfig("moment", T, G, n, seed=seed, adversary=adv, n_prime=n_prime, k=k, lp_epsilon=1e-6, lam=LAM)
        _, rep = run_simulation(cfg)
        consistent = rep.beta == beta_from_alpha(rep.alpha, k, n) and rep.extras["centered_moment_within_beta"]
        passes += rep.alpha <= rep.bound and consistent
        worst = max(worst, rep.alpha / rep.bound)
    verdict(5, passes >= 9, f"{passes}/10 seeds within bound with consistent beta; worst alpha/bound {worst:.3f}")
    assert passes >= 9


# 6 -----------------------------------------------------------------------
def greed_induced(m, rho):
    full = int(1 / rho)
    rest = 1 - full * rho
    for s in itertools.combinations(range(m), full):
        others = [k for k in range(m) if k not in s] if rest > 0 else [None]
        for extra in others:
            p = [Fraction(0)] * m
            for k in s:
                p[k] = rho
            if extra is not None:
                p[extra] = rest
            yield p


def test_6_interval_oracle_vs_enumeration(verdict):
    rng = np.random.default_rng(6)
    failures = 0
    rhos = [Fraction(1, 2), Fraction(1, 3), Fraction(1, 4)]
    for inst in range(500):
        rho = rhos[inst % 3]
        cal = IntervalCalibrator(GroupSystem(3), BucketGrid(n=2, r=4), 0.1, 0.1, float(rho), prune=False)
        for g in range(3):
            cal.V.add(g, (slice(None), slice(None)), np.triu(rng.normal(scale=2, size=(2, 2))) / cal.eta)
        c, _ = cal.coefficients(random_membership(rng, 3, 0.7))
        actions = cal.all_actions()
        q = rng.dirichlet(np.ones(len(actions)))
        lo, end, ca = cal._action_arrays(actions, c)
        w = [Fraction(float(v)) for v in cal.atom_weights(q, lo, end, ca)]
        best = max(sum(pk * wk for pk, wk in zip(p, w)) for p in greed_induced(9, rho))
        exact = greedy_smooth_exact(w, rho)
        failures += sum(pk * wk for pk, wk in zip(exact, w)) != best
        failures += not np.array_equal(greedy_smooth(np.array([float(v) for v in w]), float(rho)), [float(v) for v in exact])
    verdict(6, failures == 0, f"500 instances at rn = 8, {failures} mismatches")
    assert failures == 0


# 7 -----------------------------------------------------------------------
def test_7_interval_coverage_bound(verdict):
    T, G, n, delta, eps, lp_eps = 10_000, 5, 5, 0.1, 0.05, 1e-4
    rho = 1 / math.sqrt(T)
    bound = rho + 4 * math.sqrt(2 * math.log(2 * G * n * n / LAM) / T + 2 * lp_eps)
    passes, worst = 0, 0.0
    for seed in range(10):
        adv = AdversaryConfig("iid", G, seed=700 + seed, labels="beta", membership=0.3)
        cfg = SimulationConfig(
            "interval", T, G, n, seed=seed, adversary=adv, delta=delta, epsilon=eps, lp_epsilon=lp_eps, lam=LAM
        )
        _, rep = run_simulation(cfg)
        assert rep.extras["r"] == math.ceil(math.sqrt(T) / (2 * n * eps))
        passes += rep.alpha <= bound
        worst = max(worst, rep.alpha / bound)
    verdict(7, passes >= 9, f"{passes}/10 seeds with max coverage deviation <= {bound:.4f}; worst ratio {worst:.3f}")
    assert passes >= 9


# 8 -----------------------------------------------------------------------
def test_8_wrapper_equivalence(verdict):
    rng = np.random.default_rng(8)
    N = 10**5
    mismatches = broken = 0
    for y, fx, a, b in rng.random((N, 4)):
        iv = (min(a, b), max(a, b))
        mismatches += cover(decenter_interval(iv, fx), y) != cover(iv, center_residual(y, fx))
        eps = 0.05
        target = perturb_label(center_residual(y, fx), eps, rng)
        if cover(iv, target):
            broken += not cover(decenter_interval(widen_interval(iv, eps), fx), y)
    ok = mismatches == 0 and broken == 0
    verdict(8, ok, f"{N} triples: {mismatches} equivalence mismatches, {broken} widening failures")
    assert ok


# 9 -----------------------------------------------------------------------
def test_9_batch_conversion(verdict):
    T, G, n, holdout_size, draws = 10_000, 4, 10, 10**5, 100
    groups = GroupSystem(G)
    rates = np.array([0.15, 0.4, 0.6, 0.85])
    hp = {"group_count": G, "n": n, "r": default_r(T, groups, n), "eta": default_eta(T, groups, n)}
    bound = batch_bound(T, G, n, LAM)
    passes, worst = 0, 0.0

    def sample(rng, size):
        member = rng.random((size, G)) < 0.5
        out = []
        for row, u in zip(member, rng.random(size)):
            g = tuple(int(v) for v in np.flatnonzero(row))
            mu = float(rates[list(g)].mean()) if g else 0.5
            out.append(Example(g, label=float(u < mu)))
        return out

    for seed in range(10):
        rng = np.random.default_rng(900 + seed)
        model = batch_train(sample(rng, T), "mean", hp, seed=seed)
        cells = holdout_errors(model, sample(rng, holdout_size), draws, rng)
        ok = all(abs(c.estimate) <= bound + 3 * c.stderr for c in cells)
        passes += ok
        worst = max(worst, max(abs(c.estimate) for c in cells) / bound)
    verdict(9, passes >= 9, f"{passes}/10 seeds with every holdout cell <= {bound:.4f} + 3 sigma; worst ratio {worst:.3f}")
    assert passes >= 9


# 10 ----------------------------------------------------------------------
def test_10_truncation_lemma(verdict):
    rng = np.random.default_rng(10)
    failures, worst = 0, 0.0
    for inst in range(200):
        eps = 1e-2 if inst % 2 == 0 else 1e-4
        m, k = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        a = rng.uniform(-1, 1, size=(m, k))
        exact = dense_value(a)
        q = solve_matrix(truncate_coefficients(a, eps)).distribution
        # value of the truncated LP's optimum, and that strategy's value in the exact game
        trunc_value = dense_value(truncate_coefficients(a, eps))
        achieved = float((q @ a).max())
        gap = max(abs(trunc_value - exact), achieved - exact)
        worst = max(worst, gap / eps)
        failures += gap > eps
    verdict(10, failures == 0, f"200 LPs at eps in {{1e-2, 1e-4}}, worst gap/eps {worst:.3f}, {failures} failures")
    assert failures == 0
