"""Command-line entry point: ``domainshift <command> [options]``.

Exit status is 0 when every check passes, 1 when any check fails (or a
run diverges) and 2 for configuration errors.
"""
from __future__ import annotations

import argparse
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from domainshift import bench, checks, config, csd, synth
from domainshift.crossgrad import crossgrad_train
from domainshift.model import ConfigurationError, DivergenceError, NumericError
from domainshift.reweighting import train as train_reweighted

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _common(parser):
    parser.add_argument("--config", metavar="PATH", help="INI experiment config")
    parser.add_argument("--seeds", type=int, metavar="N", help="number of seeds (default: from config, or 6)")
    parser.add_argument("--out", metavar="DIR", help="output directory")
    parser.add_argument("--threads", type=int, default=1, metavar="N", help="worker threads for independent runs")
    parser.add_argument("--tolerance-scale", type=float, default=1.0, metavar="F",
                        help="multiply every reference tolerance band by F")


def build_parser():
    parser = argparse.ArgumentParser(prog="domainshift", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench", help="reproduce the reference tables and properties")
    _common(p)
    p.add_argument("names", nargs="*", default=["all"], help=f"benchmarks: {', '.join(bench.BENCHMARKS)} or all")

    p = sub.add_parser("train", help="train one configured algorithm over the configured seeds")
    _common(p)

    p = sub.add_parser("decompose", help="common/specific decomposition of a classifier matrix")
    _common(p)
    p.add_argument("matrix", help="text or CSV file, one row per feature, one column per domain")
    p.add_argument("-k", "--rank", type=int, default=1, help="specific rank k")

    p = sub.add_parser("check", help="run the invariant and property suite")
    _common(p)
    p.add_argument("names", nargs="*", help=f"subset of: {', '.join(checks.PROPERTY_CHECKS)}")

    p = sub.add_parser("gen", help="write a synthetic dataset as CSV (x1..xm, y, d)")
    _common(p)
    p.add_argument("--task", choices=synth.KINDS, help="task kind (overrides the config)")

    p = sub.add_parser("print-config", help="print every setting, defaults included")
    _common(p)
    return parser


def _load(args):
    cfg = config.load_config(args.config) if args.config else config.apply_seed_env(config.ExperimentConfig())
    if args.seeds is not None:
        if args.seeds < 1:
            raise ConfigurationError("--seeds must be >= 1")
        base = cfg.seeds[0]
        cfg.seeds = [base + i for i in range(args.seeds)]
    if args.threads < 1:
        raise ConfigurationError("--threads must be >= 1")
    if args.tolerance_scale <= 0:
        raise ConfigurationError("--tolerance-scale must be positive")
    return cfg


def _print_results(results):
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed} passed, {failed} failed")
    return EXIT_OK if failed == 0 else EXIT_FAIL


def cmd_bench(args):
    cfg = _load(args)
    names = list(bench.BENCHMARKS) if "all" in args.names else args.names
    unknown = set(names) - set(bench.BENCHMARKS)
    if unknown:
        raise ConfigurationError(f"unknown benchmark(s) {sorted(unknown)}; expected {bench.BENCHMARKS}")
    results = []
    for name in names:
        res = bench.run_benchmark(name, args.out, cfg.seeds, args.threads, args.tolerance_scale)
        print(f"== {name}" + (f" -> {res.csv_path}" if res.csv_path else ""))
        results.extend(res.checks)
    return _print_results(results)


def _train_one(cfg, seed):
    task = synth.SynthTask(**{**cfg.task.__dict__, "seed": seed})
    train, test = synth.generate(task)
    algo_cfg = cfg.algorithm_config(seed)
    if cfg.algorithm == "CSD":
        run = csd.csd_train(train, algo_cfg, test=test)
    elif cfg.algorithm == "CrossGrad":
        run = crossgrad_train(train, algo_cfg, test=test)
    else:
        run = train_reweighted(cfg.algorithm, train, algo_cfg, test=test)
    return run, bench.run_rows(run, task.kind, train, test)


def cmd_train(args):
    cfg = _load(args)
    with ThreadPoolExecutor(max_workers=args.threads) as pool:
        results = list(pool.map(lambda s: _train_one(cfg, s), cfg.seeds))
    rows = []
    for run, run_rows in results:
        rows.extend(run_rows)
        print(f"{cfg.task.kind} {run.algorithm} seed={run.seed}: worst test loss {run.test_losses.max():.4f}, "
              f"worst test acc {run.test_accs.min():.4f}, macro train loss {run.train_losses.mean():.4f}")
    out = args.out or cfg.out
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, f"train-{cfg.task.kind}-{cfg.algorithm}.csv")
    bench.write_csv(path, rows)
    print(f"wrote {path}")
    return EXIT_OK


def _read_matrix(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    delimiter = "," if "," in text else None
    try:
        return np.loadtxt(path, delimiter=delimiter, ndmin=2)
    except ValueError as exc:
        raise ConfigurationError(f"cannot parse matrix {path}: {exc}") from exc


def cmd_decompose(args):
    try:
        W = _read_matrix(args.matrix)
    except OSError as exc:
        raise ConfigurationError(f"cannot read {args.matrix}: {exc}") from exc
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", csd.NonUniqueDecompositionWarning)
        dec = csd.svd_decompose(W, args.rank)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    np.set_printoptions(precision=10, suppress=True)
    print(f"w_c = {dec.w_c}")
    print(f"W_s =\n{dec.W_s}")
    print(f"Gamma =\n{dec.Gamma}")
    print(f"objective = {csd.decomposition_objective(W, dec)!r}")
    print(f"non_unique = {dec.non_unique}")
    return EXIT_OK


def cmd_check(args):
    _load(args)
    unknown = set(args.names) - set(checks.PROPERTY_CHECKS)
    if unknown:
        raise ConfigurationError(f"unknown check(s) {sorted(unknown)}")
    return _print_results(checks.run_checks(args.names or None))


def cmd_gen(args):
    cfg = _load(args)
    kind = args.task or cfg.task.kind
    task = synth.SynthTask(**{**cfg.task.__dict__, "kind": kind, "seed": cfg.seeds[0]})
    train, test = synth.generate(task)
    out = args.out or cfg.out
    os.makedirs(out, exist_ok=True)
    for split, data in (("train", train), ("test", test)):
        path = os.path.join(out, f"{kind}-seed{task.seed}-{split}.csv")
        synth.write_csv(data, path)
        print(f"wrote {path} ({len(data.y)} rows)")
    return EXIT_OK


def cmd_print_config(args):
    cfg = _load(args)
    sys.stdout.write(config.dump_config(cfg))
    return EXIT_OK


COMMANDS = {"bench": cmd_bench, "train": cmd_train, "decompose": cmd_decompose, "check": cmd_check,
            "gen": cmd_gen, "print-config": cmd_print_config}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NumericError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
