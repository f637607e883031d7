"""Command line: train, select, eval, experiment, sample.

Exit codes: 0 success / converged, 1 usage or parse error, 2 numerical non-convergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import experiment as exp
from .estimation import EmisConfig, GradientConfig, em_is, gradient_em, load_config
from .io import FormatError, model_from_dict, read_dataset, read_model, write_dataset, write_model
from .model import (
    MachineSpec,
    ShapeError,
    enumerate_distribution,
    entropy,
    log_likelihood,
    sample_observed,
)
from .selection import (
    RestartPlan,
    SelectionError,
    initial_weights,
    run_restarts,
    select_lme,
    select_mle,
    write_candidates,
)

EXIT_OK, EXIT_USAGE, EXIT_NONCONVERGED = 0, 1, 2


class UsageError(Exception):
    pass


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("LME_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"LME_SEED must be an integer, got {env!r}") from None
    return 0


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    return out


def _existing(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {p}")
    return p


def _emis_config(args, base: EmisConfig | None = None) -> EmisConfig:
    overrides = list(args.set or [])
    if getattr(args, "inner_steps", None) is not None:
        overrides.append(f"inner_steps={args.inner_steps}")
    cfg = load_config(args.config and _existing(args.config), EmisConfig, overrides)
    if base is not None and not args.config and not overrides:
        return base
    return cfg


def _jobs(args) -> int:
    return args.jobs if args.jobs else (os.cpu_count() or 1)


def cmd_train(args) -> int:
    data = read_dataset(_existing(args.data))
    if args.init:
        spec, init = read_model(_existing(args.init))
        if spec.visible_count != data.width:
            raise UsageError(
                f"model has {spec.visible_count} visible nodes, dataset has width {data.width}"
            )
    else:
        spec = MachineSpec(data.width, args.hidden)
        init = initial_weights(spec, args.init_width, _seed(args))
    out = _outdir(args.out)
    if args.optimizer == "em-is":
        weights, trace = em_is(spec, init, data, _emis_config(args), verbose=args.verbose)
    else:
        gcfg = load_config(None, GradientConfig, list(args.set or []))
        weights, trace = gradient_em(spec, init, data, gcfg, verbose=args.verbose)
    write_model(out / "model.json", spec, weights)
    trace.to_csv(out / "trace.csv")
    last = trace.records[-1]
    print(f"termination {trace.termination}")
    print(f"outer_iters {trace.iterations}")
    print(f"log_likelihood {last.log_likelihood:.12f}")
    print(f"entropy {last.entropy:.12f}")
    print(f"max_residual {last.max_residual:.6e}")
    return EXIT_OK if trace.converged else EXIT_NONCONVERGED


def cmd_select(args) -> int:
    data = read_dataset(_existing(args.data))
    spec = MachineSpec(data.width, args.hidden)
    plan = RestartPlan(args.restarts, args.init_width, _seed(args))
    config = _emis_config(args, base=exp.EXPERIMENT_EMIS)
    cands = run_restarts(spec, data, plan, config, jobs=_jobs(args))
    out = _outdir(args.out)
    write_candidates(out / "candidates.csv", cands)
    print(f"converged {sum(c.converged for c in cands)}/{len(cands)}")
    try:
        lme, mle = select_lme(cands), select_mle(cands)
    except SelectionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    write_model(out / "lme.json", spec, lme.weights, selection="lme")
    write_model(out / "mle.json", spec, mle.weights, selection="mle")
    for name, c in (("lme", lme), ("mle", mle)):
        print(f"{name}_seed {c.seed}")
        print(f"{name}_log_likelihood {c.log_likelihood:.12f}")
        print(f"{name}_entropy {c.entropy:.12f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    tspec, tw = read_model(_existing(args.truth))
    espec, ew = read_model(_existing(args.estimate))
    if tspec.visible_count != espec.visible_count:
        raise UsageError(
            f"visible counts differ: {tspec.visible_count} vs {espec.visible_count}"
        )
    truth, est = enumerate_distribution(tspec, tw), enumerate_distribution(espec, ew)
    print(f"cross_entropy {exp.cross_entropy_observed(truth, est):.12f}")
    print(f"entropy_truth {entropy(truth):.12f}")
    print(f"entropy_estimate {entropy(est):.12f}")
    if args.data:
        data = read_dataset(_existing(args.data), width=tspec.visible_count)
        print(f"log_likelihood_truth {log_likelihood(truth, data):.12f}")
        print(f"log_likelihood_estimate {log_likelihood(est, data):.12f}")
    return EXIT_OK


def _experiment_from_file(path, seed, overrides) -> exp.ExperimentConfig:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        tspec, tw = model_from_dict(doc["truth"], path)
    except KeyError:
        raise UsageError(f"{path}: missing 'truth' model") from None
    est = MachineSpec(tspec.visible_count, int(doc.get("estimator_hidden", 3)))
    emis = exp.EXPERIMENT_EMIS
    if "emis" in doc:
        emis = load_config(None, EmisConfig, [f"{k}={v}" for k, v in doc["emis"].items()])
    cfg = exp.ExperimentConfig(
        name=str(doc.get("name", Path(path).stem)),
        truth_spec=tspec,
        truth_weights=tw,
        estimator_spec=est,
        sizes=tuple(doc.get("sizes", exp.DEFAULT_SIZES)),
        trials=int(doc.get("trials", 5)),
        plan=RestartPlan(int(doc.get("restarts", 100)), float(doc.get("init_width", 1.0))),
        emis=emis,
        master_seed=int(doc.get("seed", seed)),
    )
    return replace(cfg, **overrides)


def cmd_experiment(args) -> int:
    seed = _seed(args)
    overrides = {}
    if args.sizes:
        overrides["sizes"] = tuple(int(s) for s in args.sizes.split(","))
    if args.trials is not None:
        overrides["trials"] = args.trials
    if args.set or args.config:
        overrides["emis"] = _emis_config(args)
    names = args.scenario
    configs = []
    for name in names:
        if name in exp.SCENARIO_HIDDEN:
            cfg = exp.scenario(name, seed)
            cfg = replace(cfg, **overrides)
        elif Path(name).is_file():
            cfg = _experiment_from_file(name, seed, overrides)
        else:
            raise UsageError(
                f"unknown scenario {name!r}; valid names: {', '.join(exp.SCENARIO_HIDDEN)} "
                "or a path to an experiment JSON file"
            )
        if args.restarts is not None:
            cfg = replace(cfg, plan=replace(cfg.plan, restarts=args.restarts))
        configs.append(cfg)
    out = _outdir(args.out)
    results = []
    for cfg in configs:
        results.extend(exp.run_experiment(cfg, jobs=_jobs(args)))
    summary = exp.aggregate(results)
    exp.write_results(out / "results.csv", results)
    exp.write_aggregate(out / "aggregate.csv", summary)
    for line in exp.verdicts(summary):
        print(line)
    failed = sum(r.failed for r in results)
    if failed:
        print(f"{failed} trial(s) had no converged candidate", file=sys.stderr)
    return EXIT_OK


def cmd_sample(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    spec, w = read_model(_existing(args.model))
    data = sample_observed(enumerate_distribution(spec, w), args.count, _seed(args))
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True)
    write_dataset(out, data)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lmebm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--seed", type=int, default=None, help="master seed (fallback: $LME_SEED, then 0)")
        sp.add_argument("--verbose", action="store_true", help="per-iteration trace on stderr")
        if config:
            sp.add_argument("--config", help="key = value file of EM-IS settings")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")

    t = sub.add_parser("train", help="fit one machine with EM-IS or gradient EM")
    t.add_argument("--data", required=True)
    t.add_argument("--init", help="initial model file (otherwise random from --seed)")
    t.add_argument("--hidden", type=int, default=3)
    t.add_argument("--init-width", type=float, default=1.0)
    t.add_argument("--optimizer", choices=("em-is", "gradient-em"), default="em-is")
    t.add_argument("--inner-steps", type=int, default=None, help="scaling rounds per M step")
    t.add_argument("--out", default=".")
    common(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("select", help="multi-restart EM-IS with LME and MLE picks")
    s.add_argument("--data", required=True)
    s.add_argument("--hidden", type=int, default=3)
    s.add_argument("--restarts", type=int, default=100)
    s.add_argument("--init-width", type=float, default=1.0)
    s.add_argument("--jobs", type=int, default=None)
    s.add_argument("--out", default=".")
    common(s)
    s.set_defaults(func=cmd_select)

    e = sub.add_parser("eval", help="cross entropy and entropies of two models")
    e.add_argument("truth")
    e.add_argument("estimate")
    e.add_argument("--data")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("experiment", help="LME vs MLE cross-entropy experiment")
    x.add_argument("scenario", nargs="+", help="exp1, exp2, exp3 or experiment JSON path")
    x.add_argument("--restarts", type=int, default=None)
    x.add_argument("--trials", type=int, default=None)
    x.add_argument("--sizes", help="comma separated sample sizes")
    x.add_argument("--jobs", type=int, default=None)
    x.add_argument("--out", default=".")
    common(x)
    x.set_defaults(func=cmd_experiment)

    m = sub.add_parser("sample", help="draw a dataset from a model")
    m.add_argument("model")
    m.add_argument("--count", type=int, required=True)
    m.add_argument("--out", required=True)
    common(m, config=False)
    m.set_defaults(func=cmd_sample)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if getattr(args, "verbose", False):
        logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, FormatError, ShapeError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
