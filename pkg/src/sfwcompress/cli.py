"""Command-line entry point: ``sfwcompress <subcommand> [options]``.

Exit codes: 0 success / PASS, 1 verification failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

from . import config as cfgmod
from . import experiments, harness, verify
from .errors import ConfigError, InvalidBeta
from .models import Dataset
from .numerics import RngStream
from .regions import Kind

log = logging.getLogger("sfwcompress")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _common(p):
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--seed", type=int, help="run only this seed (unsigned 64-bit)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, default=1, help="parallel jobs; each job stays single-threaded")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    # argparse exits with 2 on usage errors, matching the config-error code
    parser = argparse.ArgumentParser(prog="sfwcompress", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train every seed of a config, then run its compression sweep")
    _common(p)

    p = sub.add_parser("sweep", help="expand a grid file and train every (config, seed) cell")
    _common(p)
    p.add_argument("--grid", help="grid file: {\"base\": config, \"grid\": {\"dotted.key\": [values]}}")

    p = sub.add_parser("select", help="pick the on-average-best config per method from run directories")
    _common(p)
    p.add_argument("--runs", help="directory holding job outputs (default: --out)")
    p.add_argument("--reference", type=float, help="dense reference accuracy")
    p.add_argument("--reference-config", help="config id whose dense accuracy is the reference")
    p.add_argument("--threshold", type=float, default=0.05)
    p.add_argument("--filter-metric", choices=["train_acc", "test_acc"], default="train_acc")

    p = sub.add_parser("verify-lmo", help="compare closed-form LMOs with brute force")
    _common(p)
    p.add_argument("--kind", choices=[k.value for k in Kind] + ["all"], default="all")
    p.add_argument("--dim", type=int, default=6)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--shape", default="4x5", help="matrix shape for SpectralKSupport, e.g. 4x5")
    p.add_argument("--trials", type=int, default=1000)

    p = sub.add_parser("check-convergence", help="empirical check of the gradient-rescaling convergence bound")
    _common(p)
    p.add_argument("--T", type=int, default=100)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--factor", type=int, default=4, help="compare T against factor*T")
    p.add_argument("--beta", type=float, help="override beta (default: its lower bound)")

    p = sub.add_parser("gradcheck", help="finite-difference check of hand-written gradients")
    _common(p)
    p.add_argument("--model", choices=["quadratic", "mlp", "cnn", "all"], default="all")
    p.add_argument("--batchnorm", action="store_true")

    p = sub.add_parser("study", help="pruning-robustness study: sweep, select, compare per seed")
    _common(p)
    p.add_argument("--name", choices=sorted(experiments.STUDIES), default="mlp-magnitude")
    p.add_argument("--threshold", type=float, default=0.05)
    return parser


def _emit(obj, out_dir, name):
    text = json.dumps(obj, indent=2, sort_keys=True, default=str)
    print(text)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


def _seed(args, default=0):
    return default if args.seed is None else args.seed


def cmd_train(args):
    if not args.config:
        raise ConfigError("train needs --config")
    cfg = cfgmod.load_config(args.config)
    seeds = [args.seed] if args.seed is not None else None
    results = harness.run_experiment(cfg, seeds, args.out, args.threads)
    failed = [r for r in results if r.error or not r.feasible]
    for r in results:
        print(f"{r.config_id} seed={r.seed} dense_train={r.dense_train_acc:.4f} dense_test={r.dense_test_acc:.4f}"
              f" feasible={r.feasible}" + (f" error={r.error}" if r.error else ""))
    return EXIT_FAIL if failed else EXIT_OK


def cmd_sweep(args):
    path = args.grid or args.config
    if not path:
        raise ConfigError("sweep needs --grid (or --config pointing at a grid file)")
    try:
        with open(path, encoding="utf-8") as fh:
            spec = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read grid {path}: {exc}") from None
    if "base" not in spec:
        raise ConfigError("grid file needs a 'base' config")
    configs = cfgmod.expand_grid(spec["base"], spec.get("grid", {}))
    out = args.out or configs[0]["run"]["out_dir"]
    jobs = [(c, s) for c in configs for s in ([args.seed] if args.seed is not None else c["run"]["seeds"])]
    results = harness.run_jobs(jobs, out, args.threads)
    print(f"{len(results)} jobs written to {out}")
    return EXIT_FAIL if any(r.error for r in results) else EXIT_OK


def cmd_select(args):
    runs = args.runs or args.out
    if not runs:
        raise ConfigError("select needs --runs or --out")
    result = harness.select_from_runs(runs, args.reference, args.reference_config, args.threshold, args.filter_metric)
    _emit(result, args.out, "selection.json")
    return EXIT_OK


def cmd_verify_lmo(args):
    if args.kind == "all":
        reports = verify.lmo_suite(args.trials, _seed(args))
    else:
        shape = tuple(int(s) for s in args.shape.lower().split("x"))
        reports = [verify.verify_lmo(args.kind, args.dim, args.k, args.trials, _seed(args), shape=shape)]
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.kind} shape={r.shape} k={r.k} trials={r.trials} max_gap={r.max_gap:.3e}")
    if args.out:
        _emit([asdict(r) for r in reports], args.out, "verify_lmo.json")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


def cmd_check_convergence(args):
    res = verify.convergence_ratio_check(args.T, args.seeds, args.factor, problem_seed=_seed(args), beta=args.beta)
    for key in ("short", "long"):
        r = res[key]
        print(f"T={r['T']}: measured={r['measured_mean']:.6f} averaged={r['averaged_mean']:.6f}"
              f" bound={r['bound']:.6f} max_sample_grad={r['max_sample_grad']:.4f} G={r['G']:.4f}"
              f" {'PASS' if r['passed'] else 'FAIL'}")
    print(f"ratio T/{args.factor}T = {res['ratio']:.4f} (bound ratio {res['bound_ratio']:.4f})"
          f" {'PASS' if res['passed'] else 'FAIL'}")
    if args.out:
        for key in ("short", "long"):
            res[key].pop("per_seed", None)
        _emit(res, args.out, "convergence.json")
    return EXIT_OK if res["passed"] else EXIT_FAIL


def cmd_gradcheck(args):
    kinds = ["quadratic", "mlp", "cnn"] if args.model == "all" else [args.model]
    reports = []
    if args.config:
        cfg = cfgmod.load_config(args.config)
        train, _ = harness.build_datasets(cfg)
        model = harness.build_model(cfg, train)
        model.init(RngStream(_seed(args), "init"))
        data = Dataset(harness._flatten_inputs(model, train.inputs), train.labels)
        reports.append(verify.gradcheck(cfg["model"]["kind"], _seed(args), model=model, data=data))
    else:
        for k in kinds:
            reports.append(verify.gradcheck(k, _seed(args), batchnorm=args.batchnorm))
    for r in reports:
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['kind']} max_rel_err={r['max_rel_err']:.3e} tol={r['tol']:.0e}")
    if args.out:
        _emit(reports, args.out, "gradcheck.json")
    return EXIT_OK if all(r["passed"] for r in reports) else EXIT_FAIL


def cmd_study(args):
    study = experiments.STUDIES[args.name]
    res = experiments.run_study(study, args.out, args.threads, args.threshold)
    if res.candidate is None or res.baseline is None:
        print("FAIL no config of one family survives the dense-accuracy filter")
        return EXIT_FAIL
    print(f"reference dense train acc {res.reference:.4f}")
    for tag, d in (("candidate", res.candidate), ("baseline", res.baseline)):
        print(f"{tag} {d['family']} {d['config_id']} mean_post={d['mean_post']:.4f} dense_train={d['dense_train_acc']:.4f}")
    for s, (a, b) in sorted(res.per_seed.items()):
        print(f"seed {s}: {a:.4f} vs {b:.4f} at target {res.target}")
    print(f"{'PASS' if res.passed else 'FAIL'} wins={res.wins}/{len(res.per_seed)} unfiltered_wins={res.unfiltered_wins}")
    if args.out:
        _emit({k: v for k, v in asdict(res).items()}, args.out, "study.json")
    return EXIT_OK if res.passed else EXIT_FAIL


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "select": cmd_select,
    "verify-lmo": cmd_verify_lmo,
    "check-convergence": cmd_check_convergence,
    "gradcheck": cmd_gradcheck,
    "study": cmd_study,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InvalidBeta) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
