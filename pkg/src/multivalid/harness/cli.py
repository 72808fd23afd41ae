"""Command-line entry point: ``multivalid <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import interval as interval_mod
from .. import mean as mean_mod
from .. import moment as moment_mod
from ..core import BucketGrid, ConfigError, GroupSystem, Transcript, cover
from ..wrappers import BatchModel, ResidualWrapper, batch_train
from .adversaries import AdversaryConfig
from .evaluation import holdout_errors, holdout_summary
from .report import multivalidity_report
from .simulation import SimulationConfig, build_learner, run_simulation
from .stream import read_rows

log = logging.getLogger("multivalid")

EXIT_BOUND = 2


def _grid_args(p: argparse.ArgumentParser, kind: str) -> None:
    p.add_argument("--n", type=int, default=10, help="mean (or interval endpoint) bucket count")
    p.add_argument("--r", type=int, help="grid refinement; defaults to the horizon-based choice")
    p.add_argument("--eta", type=float, help="learning rate; defaults to the horizon-based choice")
    if kind == "mean":
        p.add_argument("--eta-mode", choices=[mean_mod.FINITE_GROUPS, mean_mod.BOUNDED_MEMBERSHIP],
                       default=mean_mod.FINITE_GROUPS)
        p.add_argument("--max-membership", type=int)
    if kind == "moment":
        p.add_argument("--n-prime", type=int, default=5)
        p.add_argument("--k", type=int, default=2)
    if kind in ("moment", "interval"):
        p.add_argument("--lp-epsilon", type=float)
    if kind == "interval":
        p.add_argument("--delta", type=float, default=0.1)
        p.add_argument("--rho", type=float, help="smoothness of the label law (with --r)")
        p.add_argument("--epsilon", type=float, help="perturb labels instead of assuming smoothness")


def _sim_parser(sub, kind: str):
    p = sub.add_parser(f"simulate-{kind}", help=f"run the online {kind} predictor against a simulated adversary")
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--groups", type=int, default=10)
    _grid_args(p, kind)
    p.add_argument("--lambda", dest="lam", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--adversary", choices=["iid", "shift", "adaptive"], default="iid")
    p.add_argument("--adversary-seed", type=int, help="defaults to seed + 1")
    p.add_argument("--membership", type=float, default=0.3)
    p.add_argument("--labels", choices=["bernoulli", "beta"])
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--enforce-bound", action="store_true")
    p.set_defaults(func=cmd_simulate, kind=kind)


def _config_from_args(a, T: int, group_count: int) -> SimulationConfig:
    labels = getattr(a, "labels", None) or ("bernoulli" if a.kind == "mean" else "beta")
    adv = AdversaryConfig(
        kind=getattr(a, "adversary", "iid"),
        group_count=group_count,
        seed=a.adversary_seed if getattr(a, "adversary_seed", None) is not None else a.seed + 1,
        membership=getattr(a, "membership", 0.3),
        labels=labels,
    )
    return SimulationConfig(
        kind=a.kind, T=T, group_count=group_count, n=a.n, seed=a.seed, adversary=adv, r=a.r, eta=a.eta,
        eta_mode=getattr(a, "eta_mode", mean_mod.FINITE_GROUPS),
        max_membership=getattr(a, "max_membership", None), lam=getattr(a, "lam", 0.05),
        n_prime=getattr(a, "n_prime", None), k=getattr(a, "k", 2), lp_epsilon=getattr(a, "lp_epsilon", None),
        delta=getattr(a, "delta", None), rho=getattr(a, "rho", None), epsilon=getattr(a, "epsilon", None),
    )


def _emit(report, out_dir: Path, enforce: bool) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_csv(out_dir / "report.csv")
    report.write_json(out_dir / "summary.json")
    print(json.dumps(report.summary(), sort_keys=True))
    if enforce and report.passed is False:
        log.error("alpha %.6g exceeds the bound %.6g", report.alpha, report.bound)
        return EXIT_BOUND
    return 0


def cmd_simulate(a) -> int:
    cfg = _config_from_args(a, a.T, a.groups)
    transcript, report = run_simulation(cfg)
    a.out_dir.mkdir(parents=True, exist_ok=True)
    transcript.write_jsonl(a.out_dir / "transcript.jsonl")
    return _emit(report, a.out_dir, a.enforce_bound)


def _read_examples(path):
    rows = list(read_rows(path))
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    group_count = 1 + max((g for r in rows for g in r.example.group_ids), default=0)
    return rows, group_count


def cmd_wrap(a) -> int:
    rows, inferred = _read_examples(a.input)
    for idx, row in enumerate(rows):
        if row.point_prediction is None:
            raise ConfigError(f"row {idx}: wrap-residuals needs a point_prediction value")
    a.kind = "interval"
    cfg = _config_from_args(a, len(rows), a.groups or inferred)
    cfg.validate()
    inner = build_learner(cfg)
    wrapper = ResidualWrapper(inner, a.epsilon or 0.0)
    rng = np.random.default_rng(a.seed)
    out_rows = []
    hits = 0
    for row in rows:
        x, fx = row.example, row.point_prediction
        pred = wrapper.predict(x, fx, rng)
        wrapper.update(x, fx, pred, x.label, rng)
        hit = cover(pred.interval, x.label)
        hits += hit
        out_rows.append([";".join(map(str, x.group_ids)), x.label, fx, pred.interval[0], pred.interval[1], hit])
    a.out_dir.mkdir(parents=True, exist_ok=True)
    with open(a.out_dir / "intervals.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["groups", "label", "point_prediction", "lower", "upper", "covered"])
        w.writerows(out_rows)
    report = multivalidity_report(
        inner.transcript, cfg.groups, inner.grid, "interval", delta=cfg.delta, lam=cfg.lam,
        bound=interval_mod.hp_bound(cfg.T, cfg.groups, cfg.n, inner.rho, cfg.lam, inner.lp_epsilon),
    )
    report.extras["label_scale_coverage"] = hits / len(rows)
    return _emit(report, a.out_dir, a.enforce_bound)


def _hyperparams(learner, kind: str) -> dict:
    hp = {"group_count": learner.groups.group_count, "max_membership": learner.groups.max_membership,
          "n": learner.grid.n, "r": learner.grid.r, "eta": learner.eta}
    if kind == "moment":
        hp.update(n_prime=learner.grid.n_prime, k=learner.k, lp_epsilon=learner.lp_epsilon)
    if kind == "interval":
        hp.update(delta=learner.delta, rho=learner.rho, lp_epsilon=learner.lp_epsilon)
    return hp


def cmd_batch_train(a) -> int:
    rows, inferred = _read_examples(a.input)
    cfg = _config_from_args(a, len(rows), a.groups or inferred)
    cfg.validate()
    hp = _hyperparams(build_learner(cfg), a.kind)
    model = batch_train([r.example for r in rows], a.kind, hp, a.seed)
    model.save(a.model)
    print(json.dumps({"model": str(a.model), "kind": a.kind, "T": model.T, "hyperparams": hp}, sort_keys=True))
    return 0


def cmd_batch_eval(a) -> int:
    model = BatchModel.load(a.model)
    holdout = [r.example for r in read_rows(a.input)]
    cells = holdout_errors(model, holdout, a.draws, np.random.default_rng(a.seed))
    summary = holdout_summary(model, cells, a.lam)
    a.out_dir.mkdir(parents=True, exist_ok=True)
    with open(a.out_dir / "holdout.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group_id", "bucket_i", "bucket_j", "count", "estimate", "stderr"])
        for c in cells:
            j = c.bucket[1] if len(c.bucket) > 1 else ""
            w.writerow([c.group_id, c.bucket[0], j, c.count, c.estimate, c.stderr])
    with open(a.out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(json.dumps(summary, sort_keys=True))
    if a.enforce_bound and summary["passed"] is False:
        return EXIT_BOUND
    return 0


def cmd_report(a) -> int:
    rounds = Transcript.read_rounds(a.transcript)
    group_count = a.groups or 1 + max((g for r in rounds for g in r.groups), default=0)
    groups = GroupSystem(group_count)
    T = len(rounds)
    grid = BucketGrid(n=a.n, r=a.r, n_prime=a.n_prime if a.kind == "moment" else None)
    bound = None
    if T:
        if a.kind == "mean":
            bound = mean_mod.hp_bound(T, groups, grid, a.lam)
        elif a.kind == "moment":
            bound = moment_mod.hp_bound(T, groups, grid, a.lam, a.lp_epsilon or 0.0)
        elif a.rho is not None:
            bound = interval_mod.hp_bound(T, groups, a.n, a.rho, a.lam, a.lp_epsilon or 0.0)
    report = multivalidity_report(rounds, groups, grid, a.kind, delta=a.delta, k=a.k, bound=bound, lam=a.lam)
    return _emit(report, a.out_dir, a.enforce_bound)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multivalid", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in ("mean", "moment", "interval"):
        _sim_parser(sub, kind)

    p = sub.add_parser("wrap-residuals", help="intervals around a point predictor's outputs from a CSV stream")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--groups", type=int)
    _grid_args(p, "interval")
    p.add_argument("--lambda", dest="lam", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--enforce-bound", action="store_true")
    p.set_defaults(func=cmd_wrap)

    p = sub.add_parser("batch-train", help="single pass over a labelled CSV; saves a mixture model")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--kind", choices=["mean", "moment", "interval"], default="mean")
    p.add_argument("--groups", type=int)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--r", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--n-prime", type=int, default=5)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--lp-epsilon", type=float)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--rho", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_batch_train)

    p = sub.add_parser("batch-eval", help="holdout calibration error of a saved mixture model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--draws", type=int, default=100)
    p.add_argument("--lambda", dest="lam", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--enforce-bound", action="store_true")
    p.set_defaults(func=cmd_batch_eval)

    p = sub.add_parser("report", help="recompute a multivalidity report from a transcript JSONL file")
    p.add_argument("--transcript", type=Path, required=True)
    p.add_argument("--kind", choices=["mean", "moment", "interval"], required=True)
    p.add_argument("--groups", type=int)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--n-prime", type=int)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--delta", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--lp-epsilon", type=float)
    p.add_argument("--lambda", dest="lam", type=float, default=0.05)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--enforce-bound", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if a.command == "batch-train":
        a.adversary_seed = None
    try:
        return a.func(a)
    except (ConfigError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
