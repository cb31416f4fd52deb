"""Reproduction benchmarks with CSV export.

``toy-table`` trains ERM, Group-DRO and CGD on the three simple toy tasks
and compares worst-domain test loss, macro train loss and solution
variance with published reference values. ``convergence`` and
``decomposition`` run the corresponding property checks and export their
numbers.

Data files hold one row per (run, domain, split, metric) with columns
:data:`CSV_COLUMNS`; values are written with ``repr`` so reruns are
byte-identical. The timestamp goes to the JSON summary only.
"""
from __future__ import annotations

import csv
import datetime
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from domainshift import checks, kernels, reweighting as rw, synth
from domainshift.checks import CheckResult
from domainshift.metrics import MetricsReport

CSV_COLUMNS = ("run_id", "seed", "task", "algorithm", "domain", "split", "metric", "value")
BENCHMARKS = ("toy-table", "convergence", "decomposition")
TOY_TASKS = ("noise_simple", "rotation_simple", "spurious_simple")
TOY_ALGORITHMS = ("ERM", "Group-DRO", "CGD")
TASK_LABELS = {"noise_simple": "Noise-Simple", "rotation_simple": "Rotation-Simple",
               "spurious_simple": "Spurious-Simple"}

WORST_TABLE = "worst-loss table (linear model, 6 seeds)"
TRAIN_TABLE = "macro train-loss table (linear model)"

# (mean, std) of worst-domain test BCE
WORST_LOSS_REF = {
    ("CGD", "noise_simple"): (0.25, 0.02),
    ("CGD", "rotation_simple"): (0.59, 0.05),
    ("CGD", "spurious_simple"): (0.43, 0.06),
    ("Group-DRO", "noise_simple"): (0.35, 0.03),
    ("Group-DRO", "rotation_simple"): (0.77, 0.14),
    ("Group-DRO", "spurious_simple"): (0.70, 0.16),
}
# (mean, std) of macro-averaged train loss
TRAIN_LOSS_REF = {
    ("CGD", "spurious_simple"): (0.43, 0.01),
    ("CGD", "rotation_simple"): (0.24, 0.04),
    ("CGD", "noise_simple"): (0.36, 0.01),
    ("Group-DRO", "spurious_simple"): (0.45, 0.01),
    ("Group-DRO", "rotation_simple"): (0.25, 0.04),
    ("Group-DRO", "noise_simple"): (0.41, 0.02),
    ("ERM", "spurious_simple"): (0.42, 0.01),
    ("ERM", "rotation_simple"): (0.23, 0.05),
    ("ERM", "noise_simple"): (0.34, 0.02),
}
TRAIN_LOSS_BAND = 0.10
# variance of the L-infinity normalised solution; only the ordering is compared
VARIANCE_REF = {
    ("CGD", "noise_simple"): 0.32, ("Group-DRO", "noise_simple"): 1.88,
    ("CGD", "rotation_simple"): 0.08, ("Group-DRO", "rotation_simple"): 0.41,
    ("CGD", "spurious_simple"): 0.04, ("Group-DRO", "spurious_simple"): 0.17,
}


@dataclass
class BenchResult:
    name: str
    checks: list
    rows: list = field(default_factory=list)
    csv_path: str | None = None
    summary_path: str | None = None

    @property
    def passed(self):
        return all(c.passed for c in self.checks)


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, rows):
    """RFC-4180 CSV (UTF-8, header, CRLF) of ``CSV_COLUMNS`` tuples."""
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\r\n")
            writer.writerow(CSV_COLUMNS)
            for row in rows:
                writer.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def run_rows(run: rw.RunResult, task, train, test):
    """Per-domain rows plus per-run aggregates for one trained model."""
    run_id = f"{task}/{run.algorithm}/seed{run.seed}"
    rows = []
    for split, data, losses, accs in (("train", train, run.train_losses, run.train_accs),
                                      ("test", test, run.test_losses, run.test_accs)):
        if losses is None:
            continue
        for i in range(len(losses)):
            name = data.name_of(i)
            rows.append((run_id, run.seed, task, run.algorithm, name, split, "loss", losses[i]))
            rows.append((run_id, run.seed, task, run.algorithm, name, split, "accuracy", accs[i]))
        rows.append((run_id, run.seed, task, run.algorithm, "all", split, "worst_loss", float(np.max(losses))))
        rows.append((run_id, run.seed, task, run.algorithm, "all", split, "macro_loss", float(np.mean(losses))))
        rows.append((run_id, run.seed, task, run.algorithm, "all", split, "worst_accuracy", float(np.min(accs))))
    return rows


def _toy_job(args):
    task, algorithm, seed, cfg = args
    train, test = synth.generate(synth.SynthTask(task, seed=seed))
    run = rw.train(algorithm, train, rw.CGDConfig(**{**cfg, "seed": seed}), test=test)
    return run, run_rows(run, task, train, test)


def toy_table(seeds=range(6), threads=1, cgd_overrides=None):
    """Train every (task, algorithm, seed); returns ``(reports, rows)``.

    Runs execute in a thread pool; results are collected in job order, so
    the output does not depend on scheduling.
    """
    seeds = list(seeds)
    cfg = dict(cgd_overrides or {})
    jobs = [(task, alg, seed, cfg) for task in TOY_TASKS for alg in TOY_ALGORITHMS for seed in seeds]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_toy_job, jobs))
    else:
        results = [_toy_job(j) for j in jobs]
    rows = []
    runs = {}
    for (task, alg, _, _), (run, run_rows_) in zip(jobs, results):
        rows.extend(run_rows_)
        runs.setdefault((alg, task), []).append(run)
    reports = {key: MetricsReport.from_runs(key[1], value) for key, value in runs.items()}
    for (alg, task), rep in reports.items():
        run_id = f"{task}/{alg}/aggregate"
        for metric, (mean, std) in rep.summary().items():
            rows.append((run_id, "all", task, alg, "all", "train" if metric.startswith("train") else "test",
                         f"{metric}_mean", mean))
            rows.append((run_id, "all", task, alg, "all", "train" if metric.startswith("train") else "test",
                         f"{metric}_std", std))
    return reports, rows


def toy_table_checks(reports, tolerance_scale=1.0):
    """Band checks (worst loss within mean +- 2 std, train loss within +-0.10) and orderings."""
    out = []
    for (alg, task), (mean, std) in WORST_LOSS_REF.items():
        value = float(np.mean(reports[(alg, task)].worst_losses))
        half = 2.0 * std * tolerance_scale
        lo, hi = mean - half, mean + half
        out.append(CheckResult(f"worst test loss {alg} / {TASK_LABELS[task]}", lo <= value <= hi, value,
                               f"[{lo:.3f}, {hi:.3f}]", f"ref {mean} ({std}), {WORST_TABLE}"))
    for (alg, task), (mean, std) in TRAIN_LOSS_REF.items():
        value = float(np.mean(reports[(alg, task)].train_macro))
        half = TRAIN_LOSS_BAND * tolerance_scale
        lo, hi = mean - half, mean + half
        out.append(CheckResult(f"macro train loss {alg} / {TASK_LABELS[task]}", lo <= value <= hi, value,
                               f"[{lo:.3f}, {hi:.3f}]", f"ref {mean} ({std}), {TRAIN_TABLE}"))
    for task in TOY_TASKS:
        cgd = float(np.mean(reports[("CGD", task)].worst_losses))
        dro = float(np.mean(reports[("Group-DRO", task)].worst_losses))
        out.append(CheckResult(f"worst loss CGD < Group-DRO on {TASK_LABELS[task]}", cgd < dro, cgd,
                               f"< {dro:.4f}", WORST_TABLE))
    for task in TOY_TASKS:
        cgd = reports[("CGD", task)].variance
        dro = reports[("Group-DRO", task)].variance
        out.append(CheckResult(f"solution variance CGD < Group-DRO on {TASK_LABELS[task]}", cgd < dro, cgd,
                               f"< {dro:.4f}",
                               f"ref {VARIANCE_REF[('CGD', task)]} vs {VARIANCE_REF[('Group-DRO', task)]}, "
                               f"{WORST_TABLE}; magnitudes depend on the aggregation convention"))
    return out


def _check_rows(bench, checks_):
    return [(bench, "", bench, "", "all", "", c.name, c.value) for c in checks_]


def run_benchmark(name, out=None, seeds=range(6), threads=1, tolerance_scale=1.0):
    """Run one benchmark; write ``<out>/<name>.csv`` and ``<name>.summary.json`` when ``out`` is set."""
    if name == "toy-table":
        reports, rows = toy_table(seeds, threads)
        results = toy_table_checks(reports, tolerance_scale)
    elif name == "convergence":
        stats = checks.convergence_run()
        results = checks.check_convergence(stats=stats)
        rows = [("convergence", 11, "convex_logistic", "CGD", "all", "train", key, value)
                for key, value in stats.items()]
    elif name == "decomposition":
        results = checks.check_closed_forms() + checks.check_worked_decompositions()
        rows = _check_rows(name, results)
    else:
        raise ValueError(f"unknown benchmark {name!r}; expected one of {BENCHMARKS}")
    bench = BenchResult(name, results, rows)
    if out is not None:
        os.makedirs(out, exist_ok=True)
        bench.csv_path = os.path.join(out, f"{name}.csv")
        write_csv(bench.csv_path, rows)
        bench.summary_path = os.path.join(out, f"{name}.summary.json")
        summary = {
            "benchmark": name,
            "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "kernel_backend": kernels.BACKEND,
            "tolerance_scale": tolerance_scale,
            "passed": bench.passed,
            "checks": [{"name": c.name, "passed": c.passed, "value": c.value, "limit": c.limit,
                        "reference": c.detail} for c in results],
        }
        try:
            with open(bench.summary_path, "w", encoding="utf-8") as fh:
                json.dump(summary, fh, indent=2)
        except OSError as exc:
            raise OSError(f"cannot write {bench.summary_path}: {exc}") from exc
    return bench
