import math

import numpy as np
import pytest

from multivalid import core
from multivalid.core import BucketGrid, ConfigError, Example, GroupSystem, cover, numerator_bucket
from multivalid.interval import IntervalCalibrator
from multivalid.mean import MeanCalibrator
from multivalid.wrappers import (
    BatchModel,
    ResidualWrapper,
    batch_bound,
    batch_predict,
    batch_train,
    center_residual,
    decenter_interval,
    mean_round_tables,
)

MEAN_HP = {"group_count": 3, "n": 4, "r": 3, "eta": 0.2}


def stream(T, seed, groups=3):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(T):
        g = tuple(int(v) for v in np.flatnonzero(rng.random(groups) < 0.5))
        base = 0.2 + 0.2 * len(g)
        out.append(Example(g, label=float(rng.random() < base)))
    return out


def test_center_residual_examples():
    assert center_residual(0.4, 0.4) == 0.5
    assert center_residual(1.0, 0.0) == 1.0
    assert math.isclose(center_residual(0.8, 0.3), 0.75)
    with pytest.raises(ValueError):
        center_residual(0.5, 1.2)


def test_decenter_examples():
    assert decenter_interval((0.5, 0.5), 0.5) == (0.5, 0.5)
    lo, hi = decenter_interval((0.4, 0.8), 0.3)
    assert math.isclose(lo, 0.1) and math.isclose(hi, 0.9)
    lo, hi = decenter_interval((0.4, 0.8), 0.3, 0.05)
    assert math.isclose(lo, 0.05) and math.isclose(hi, 0.95)
    with pytest.raises(ValueError):
        decenter_interval((0.4, 0.8), -0.1)


def test_decenter_equivalence_monte_carlo():
    rng = np.random.default_rng(0)
    for y, fx, a, b in rng.random((10**5, 4)):
        lo, hi = min(a, b), max(a, b)
        assert cover(decenter_interval((lo, hi), fx), y) == cover((lo, hi), center_residual(y, fx))


def test_wrapper_widening_implication():
    rng = np.random.default_rng(1)
    inner = IntervalCalibrator(GroupSystem(2), BucketGrid(n=2, r=4), 0.1, 0.1, 0.3)
    wrapper = ResidualWrapper(inner, epsilon=0.05)
    for _ in range(300):
        x = Example((int(rng.integers(0, 2)),))
        fx, y = float(rng.random()), float(rng.random())
        pred = wrapper.predict(x, fx, rng)
        target = wrapper.update(x, fx, pred, y, rng)
        if cover(pred.inner, target):
            assert cover(pred.interval, y)


def test_wrapper_validity_transfer():
    rng = np.random.default_rng(2)
    groups = GroupSystem(3)
    inner = IntervalCalibrator(groups, BucketGrid(n=2, r=3), 0.1, 0.2, 0.3)
    wrapper = ResidualWrapper(inner)
    table = np.zeros((3, 2, 2))
    for _ in range(200):
        x = Example(tuple(int(g) for g in np.flatnonzero(rng.random(3) < 0.5)))
        fx = float(rng.random())
        y = float(np.clip(fx + rng.normal(scale=0.2), 0, 1))
        pred = wrapper.predict(x, fx, rng)
        wrapper.update(x, fx, pred, y, rng)
        i, j = inner.cell_of(pred.inner)
        for g in x.group_ids:
            # computed on the label scale from the decentered interval
            table[g, i - 1, j - 1] += cover(pred.interval, y) - 0.8
    for g in range(3):
        assert np.allclose(table[g], inner.V.get(g), atol=1e-9)


def test_wrapper_rejects_bad_fx():
    inner = IntervalCalibrator(GroupSystem(1), BucketGrid(n=2, r=2), 0.1, 0.1, 0.5)
    with pytest.raises(ValueError):
        ResidualWrapper(inner).predict(Example((0,)), 1.5, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        ResidualWrapper(inner, -0.1)


def test_batch_train_single_round():
    model = batch_train([Example((0,), label=0.3)], "mean", MEAN_HP, seed=0)
    assert model.T == 1 and len(model.transcript.deltas) == 1
    rng = np.random.default_rng(0)
    fresh = MeanCalibrator(GroupSystem(3), BucketGrid(n=4, r=3), 0.2).distribution(Example((0, 2)))
    assert fresh.support == [2 / 12, 0.25] and fresh.probs.tolist() == [1.0, 0.0]
    assert all(batch_predict(model, Example((0, 2)), rng) == 2 / 12 for _ in range(20))


def test_batch_train_deterministic_and_matches_live():
    data = stream(400, 3)
    a = batch_train(data, "mean", MEAN_HP, seed=7)
    b = batch_train(data, "mean", MEAN_HP, seed=7)
    assert a.transcript.rounds == b.transcript.rounds
    assert a.transcript.deltas == b.transcript.deltas
    live = MeanCalibrator(GroupSystem(3), BucketGrid(n=4, r=3), 0.2)
    rng = np.random.default_rng(7)
    for ex in data:
        live.update(ex, live.predict(ex, rng), ex.label)
    final = a.state_at(a.T + 1, range(3))
    for g in range(3):
        assert np.array_equal(final.V.get(g), live.V.get(g))


def test_batch_train_rejects_bad_label():
    data = [Example((0,), label=0.2), Example((1,), label=0.4)]
    data[1] = Example((1,), label=0.4)
    object.__setattr__(data[1], "label", 1.4)
    with pytest.raises(ValueError, match="row 1"):
        batch_train(data, "mean", MEAN_HP, seed=0)
    with pytest.raises(ValueError):
        batch_train([], "mean", MEAN_HP, seed=0)


def test_round_distribution_matches_live_round():
    data = stream(150, 4)
    model = batch_train(data, "mean", MEAN_HP, seed=1)
    live = MeanCalibrator(GroupSystem(3), BucketGrid(n=4, r=3), 0.2)
    rng = np.random.default_rng(1)
    x = Example((0, 2))
    support, probs = mean_round_tables(model, x.group_ids)
    for t, ex in enumerate(data, start=1):
        want = live.distribution(x)
        got = model.round_distribution(t, x)
        assert got.support == want.support and np.array_equal(got.probs, want.probs)
        pad = dict(zip(want.support, want.probs))
        for s, p in zip(support[t - 1], probs[t - 1]):
            if p > 0:
                assert math.isclose(pad[s], p, rel_tol=1e-12, abs_tol=1e-15)
        live.update(ex, live.predict(ex, rng), ex.label)


def test_forced_round_through_batch_predict():
    data = stream(60, 5)
    model = batch_train(data, "mean", MEAN_HP, seed=2)
    x = Example((1,))

    class Forced:
        """Pins t, then defers to a real generator for the within-round draw."""

        def __init__(self, t, seed):
            self.t, self.rng = t, np.random.default_rng(seed)

        def integers(self, lo, hi):
            return self.t

        def random(self):
            return self.rng.random()

    t = 37
    dist = model.round_distribution(t, x)
    draws = [batch_predict(model, x, Forced(t, s)) for s in range(4000)]
    for point, p in dist.items():
        freq = np.mean([d == point for d in draws])
        assert abs(freq - p) <= 4 * math.sqrt(p * (1 - p) / 4000) + 1e-12
    assert set(draws) <= set(dist.support)


def test_mixture_law():
    data = stream(30, 6)
    model = batch_train(data, "mean", MEAN_HP, seed=3)
    x = Example((0, 1))
    support, probs = mean_round_tables(model, x.group_ids)
    n, r = MEAN_HP["n"], MEAN_HP["r"]
    buckets = np.minimum(np.rint(support * n * r).astype(int) // r + 1, n)
    want = np.array([(probs * (buckets == i)).sum() / model.T for i in range(1, n + 1)])
    rng = np.random.default_rng(9)
    N = 10**5
    got = np.zeros(n)
    for _ in range(N):
        p = batch_predict(model, x, rng)
        got[numerator_bucket(round(p * n * r), r, n) - 1] += 1
    got /= N
    sigma = np.sqrt(want * (1 - want) / N)
    assert np.all(np.abs(got - want) <= 3 * sigma + 1e-12)


def test_save_load_round_trip(tmp_path):
    for kind, hp, data in [
        ("mean", MEAN_HP, stream(120, 7)),
        ("interval", {"group_count": 3, "n": 2, "r": 3, "eta": 0.1, "delta": 0.1, "rho": 0.3}, stream(40, 8)),
    ]:
        model = batch_train(data, kind, hp, seed=4)
        path = tmp_path / f"{kind}.json"
        model.save(path)
        back = BatchModel.load(path)
        assert back.kind == kind and back.seed == 4 and back.hyperparams == model.hyperparams
        assert back.transcript.rounds == model.transcript.rounds
        assert back.transcript.deltas == model.transcript.deltas


def test_load_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.json"
    path.write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        BatchModel.load(path)


def test_interval_batch_reconstruction_is_exact():
    hp = {"group_count": 3, "n": 2, "r": 3, "eta": 0.1, "delta": 0.1, "rho": 0.3}
    data = stream(40, 10)
    model = batch_train(data, "interval", hp, seed=5)
    pred = IntervalCalibrator(GroupSystem(3), BucketGrid(n=2, r=3), 0.1, 0.1, 0.3, warm_start=0)
    rng = np.random.default_rng(5)
    x = Example((0, 1, 2))
    for t, ex in enumerate(data, start=1):
        want = pred.distribution(x)
        got = model.round_distribution(t, x)
        assert got.support == want.support and np.array_equal(got.probs, want.probs)
        pred.update(ex, pred.predict(ex, rng), ex.label)


def test_prefix_reconstruction_touches_only_member_groups(monkeypatch):
    data = stream(80, 11)
    model = batch_train(data, "mean", MEAN_HP, seed=6)
    touched = []
    original = core.CellTable.add

    def spy(self, group, key, value):
        touched.append(group)
        return original(self, group, key, value)

    monkeypatch.setattr(core.CellTable, "add", spy)
    t = 50
    model.state_at(t, (1,))
    expected = sum(1 for rd in model.transcript.deltas[: t - 1] for d in rd if d.group == 1)
    assert set(touched) <= {1} and len(touched) == expected


def test_batch_bound_formula():
    assert math.isclose(batch_bound(10000, 4, 10, 0.05), 6.1 * math.sqrt(2 / 10000 * math.log(4 * 4 * 10 / 0.05)))
