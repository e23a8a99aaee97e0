"""Command-line entry point: ``contune optimize|sensitivity|report|replay``.

Exit codes: 0 success, 1 usage/configuration error, 2 evaluation failures
(or replay mismatches) in a completed run, 3 aborted run.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from pathlib import Path

from . import __version__
from ._validation import DocumentError, check_seed
from .archive import ManifestError, ReplayError, load_manifest, replay
from .runner import (
    RunAborted,
    evaluate_batch,
    load_run_document,
    run_cycle,
    scenario_path,
)
from .sensitivity import OatPlan, PlanError, analyze, expand

EXIT_OK, EXIT_CONFIG, EXIT_FAILURES, EXIT_ABORTED = 0, 1, 2, 3
DEFAULT_ROOT = "runs"


class UsageError(Exception):
    pass


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a value >= 1, got {value}")
    return value


def _positive_float(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not value > 0 or not math.isfinite(value):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}")
    return value


def _seed(text):
    try:
        return check_seed(int(text))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser():
    p = argparse.ArgumentParser(prog="contune", description="Parallel black-box tuning of application configurations.")
    p.add_argument("--version", action="version", version=f"contune {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp):
        sp.add_argument("--repeat", type=_positive_int, help="runs per evaluation (total)")
        sp.add_argument("--duration", type=_positive_float, help="seconds per run")
        sp.add_argument("--parallelism", type=_positive_int, help="concurrent evaluation slots")
        sp.add_argument("--seed", type=_seed, help="run seed (unsigned 64-bit)")
        sp.add_argument("--clients", type=_positive_int, help="simulated concurrent clients")
        sp.add_argument("--out", help="output root (default $CONTUNE_RUN_DIR or ./runs)")

    opt = sub.add_parser("optimize", help="run the optimization cycle")
    opt.add_argument("target", nargs="+", metavar="DOCUMENT | scenario NAME")
    run_flags(opt)
    opt.add_argument("--thin-checkpoints", action="store_true",
                     help="keep only the final model checkpoint")

    sen = sub.add_parser("sensitivity", help="one-at-a-time analysis around a base configuration")
    sen.add_argument("target", nargs="+", metavar="DOCUMENT | scenario NAME")
    run_flags(sen)
    sen.add_argument("--base-run", help="take the base configuration from this run's best")
    sen.add_argument("--rerun-base", action="store_true",
                     help="evaluate the base again instead of reusing archived metrics")

    rep = sub.add_parser("report", help="summarize one or more runs")
    rep.add_argument("run_dirs", nargs="+")
    rep.add_argument("--out", help="directory for CSV output (default: <first run>-report)")

    rpl = sub.add_parser("replay", help="re-execute an archived run and compare")
    rpl.add_argument("run_dir")
    rpl.add_argument("--parallelism", type=_positive_int)
    rpl.add_argument("--out", help="directory for the verification output")
    return p


def _document_source(target):
    if target[0] == "scenario":
        if len(target) != 2:
            raise UsageError("expected: scenario NAME")
        return scenario_path(target[1]), target[1]
    if len(target) != 1:
        raise UsageError(f"expected one document path, got {target}")
    path = Path(target[0])
    if not path.is_file():
        raise UsageError(f"document {path} does not exist")
    return path, path.stem


def _fresh_dir(root, label):
    root = Path(root or os.environ.get("CONTUNE_RUN_DIR") or DEFAULT_ROOT)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = root / f"{stamp}-{label}"
    path, k = base, 1
    while path.exists():
        path = Path(f"{base}-{k}")
        k += 1
    return path


# -- optimize -----------------------------------------------------------------

def cmd_optimize(args, out=None):
    out = out or sys.stdout
    source, label = _document_source(args.target)
    doc = load_run_document(source)  # fails before anything is created
    run_dir = _fresh_dir(args.out, f"{label}-optimize")
    try:
        manifest = run_cycle(doc, run_dir, parallelism=args.parallelism, repeats=args.repeat,
                             duration=args.duration, clients=args.clients, seed=args.seed,
                             keep_checkpoints=not args.thin_checkpoints)
    except RunAborted as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        print(f"manifest: {run_dir / 'manifest'}", file=out)
        return EXIT_ABORTED
    print(f"run directory: {run_dir}", file=out)
    print(f"manifest: {run_dir / 'manifest'}", file=out)
    print(f"status: {manifest['status']} ({manifest['convergence']}), "
          f"{manifest['counts']['told']} evaluations", file=out)
    best = manifest["best"]
    if best is not None:
        cfg = ", ".join(f"{k}={v}" for k, v in best["configuration"].items())
        print(f"best: {cfg} -> {manifest['problem']['objective']['metric']} = {best['value']!r}",
              file=out)
    ref = manifest.get("reference")
    if ref and best is not None:
        _print_comparison(manifest, out)
    return EXIT_FAILURES if manifest["counts"]["failed"] else EXIT_OK


# -- sensitivity --------------------------------------------------------------

def cmd_sensitivity(args, out=None):
    out = out or sys.stdout
    source, label = _document_source(args.target)
    doc = load_run_document(source)
    space = doc.problem.space
    plan = doc.plan or OatPlan()
    reused = None
    if args.base_run:
        manifest = load_manifest(args.base_run)
        if manifest["best"] is None:
            raise UsageError(f"run {args.base_run} has no best configuration")
        best = manifest["best"]
        plan = plan.with_base(tuple(best["configuration"][n] for n in space.names))
        trial = next(t for t in manifest["trials"] if t["id"] == best["trial"])
        reused = trial["metrics"]
    if plan.base is None:
        raise UsageError("no base configuration: give sensitivity.base or --base-run")
    configs = expand(plan, space)  # out-of-bounds offsets are reported here
    spec = doc.executor.with_overrides(parallelism=args.parallelism, repeats=args.repeat,
                                       duration=args.duration, clients=args.clients)
    if args.repeat is None and plan.repeats > 1:
        spec = spec.with_overrides(repeats=plan.repeats)
    executor = spec.build()
    seed = doc.search.seed if args.seed is None else args.seed
    todo = configs if (args.rerun_base or reused is None) else configs[1:]
    out_dir = _fresh_dir(args.out, f"{label}-sensitivity")
    out_dir.mkdir(parents=True)
    trials = evaluate_batch([c for _, c in todo], space.names, executor, out_dir, seed,
                            spec.parallelism, doc.problem)
    results = []
    if len(todo) < len(configs):
        results.append((None, configs[0][1], reused))
    failed = 0
    for (var, cfg), t in zip(todo, trials):
        if t.status != "done":
            failed += 1
            print(f"evaluation {t.id} ({var}) failed: {(t.diagnostics or '').splitlines()[:1]}",
                  file=sys.stderr)
            continue
        results.append((var, cfg, t.metrics))
    table = analyze(results, space, doc.problem.objective)
    (out_dir / "effects.csv").write_text(table.to_csv())
    (out_dir / "report.txt").write_text(table.to_text())
    print(table.to_text(), end="", file=out)
    print(f"evaluated {len(trials)} configurations"
          f"{' (base reused from archive)' if len(todo) < len(configs) else ''}; "
          f"output in {out_dir}", file=out)
    return EXIT_FAILURES if failed else EXIT_OK


# -- report -------------------------------------------------------------------

def _relative(best, base):
    return (best - base) / base if base else math.nan


def _print_comparison(manifest, out):
    metric = manifest["problem"]["objective"]["metric"]
    ref = manifest["reference"]
    best = manifest["best"]
    trial = next(t for t in manifest["trials"] if t["id"] == best["trial"])
    names = list(best["configuration"])
    print(f"  {'':<22}{'baseline':>20}{'best found':>20}", file=out)
    for n in names:
        print(f"  {n:<22}{ref['configuration'][n]!s:>20}{best['configuration'][n]!s:>20}", file=out)
    b = ref["metrics"].get(metric)
    v = trial["metrics"].get(metric)
    if b is not None and v is not None:
        bs = ref["metrics"].get(metric.replace("_mean", "_std"))
        vs = trial["metrics"].get(metric.replace("_mean", "_std"))
        fmt = lambda x, s: f"{x:.4g}" + (f" (±{s:.3g})" if s is not None else "")  # noqa: E731
        print(f"  {metric:<22}{fmt(b, bs):>20}{fmt(v, vs):>20}", file=out)
        print(f"  relative change: {100 * _relative(v, b):+.2f}%", file=out)


def _copy_timeseries(src_dir, dest):
    src = Path(src_dir) / "timeseries.csv"
    if src.is_file():
        dest.write_text(src.read_text())
        return True
    return False


def cmd_report(args, out=None):
    out = out or sys.stdout
    manifests = []
    for rd in args.run_dirs:
        if not Path(rd).is_dir():
            raise ManifestError(f"run directory {rd} does not exist")
        manifests.append((Path(rd), load_manifest(rd)))
    out_dir = Path(args.out) if args.out else Path(f"{Path(args.run_dirs[0]).resolve()}-report")
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = []
    for run_dir, m in manifests:
        metric = m["problem"]["objective"]["metric"]
        print(f"== {run_dir}", file=out)
        status = m["status"].upper() if m["status"] != "completed" else m["status"]
        print(f"status: {status}" + (f" ({m['abort_reason']})" if m["abort_reason"] else "")
              + (f", converged by {m['convergence']}" if m["convergence"] else ""), file=out)
        print("problem: " + ", ".join(
            f"{v['name']} in [{v['lower']}, {v['upper']}]" for v in m["problem"]["variables"])
            + f"; {m['problem']['objective']['direction']} {metric}", file=out)
        hp = ", ".join(f"{k}={v}" for k, v in m["algorithm"]["hyperparameters"].items())
        print(f"algorithm: {m['algorithm']['name']} ({hp})", file=out)
        print(f"sampler: {m['sampler']['method']}, n_initial={m['sampler']['n_initial']}", file=out)
        ex = m["executor"]
        clients = (ex.get("params") or {}).get("clients", ex.get("clients"))
        print(f"executor: {ex['kind']}, repeats={ex['repeats']}, parallelism={ex['parallelism']}"
              + (f", clients={clients}" if clients is not None else ""), file=out)
        names = [v["name"] for v in m["problem"]["variables"]]
        print(f"  {'id':>3} {'order':>5} {'status':<7}" + "".join(f"{n:>11}" for n in names)
              + f" {metric:>20}", file=out)
        for t in m["trials"]:
            obj = t["objective"]
            print(f"  {t['id']:>3} {'' if t['order'] is None else t['order']:>5} {t['status']:<7}"
                  + "".join(f"{t['configuration'][n]!s:>11}" for n in names)
                  + f" {'' if obj is None else format(obj, '.6g'):>20}", file=out)
        tag = run_dir.name
        if m["best"] is not None:
            cfg = ", ".join(f"{k}={v}" for k, v in m["best"]["configuration"].items())
            print(f"best: {cfg} -> {metric} = {m['best']['value']!r}", file=out)
            _copy_timeseries(run_dir / "trials" / str(m["best"]["trial"]),
                             out_dir / f"{tag}-best-timeseries.csv")
        row = {"run": str(run_dir), "status": m["status"], "clients": clients,
               "best": None if m["best"] is None else m["best"]["value"],
               "baseline": None, "relative_change": None}
        if m.get("reference") and m["best"] is not None:
            _print_comparison(m, out)
            best_trial = next(t for t in m["trials"] if t["id"] == m["best"]["trial"])
            b = m["reference"]["metrics"].get(metric)
            v = best_trial["metrics"].get(metric)
            row["baseline"], row["best"] = b, v
            if b is not None and v is not None:
                row["relative_change"] = _relative(v, b)
            _copy_timeseries(run_dir / "reference", out_dir / f"{tag}-baseline-timeseries.csv")
        summary.append(row)
        print(file=out)
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(summary[0]), lineterminator="\n")
        w.writeheader()
        for row in summary:
            w.writerow({k: ("" if v is None else v) for k, v in row.items()})
    print(f"CSV output in {out_dir}", file=out)
    return EXIT_OK


# -- replay -------------------------------------------------------------------

def cmd_replay(args, out=None):
    out = out or sys.stdout
    report = replay(args.run_dir, parallelism=args.parallelism, out_dir=args.out)
    print(report.summary(), end="", file=out)
    if args.out:
        print(f"verification output: {Path(args.out) / 'replay.json'}", file=out)
    return EXIT_OK if report.ok else EXIT_FAILURES


COMMANDS = {"optimize": cmd_optimize, "sensitivity": cmd_sensitivity,
            "report": cmd_report, "replay": cmd_replay}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except (DocumentError, UsageError, ManifestError, ReplayError, PlanError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
