"""Run manifests and exact replay of archived runs.

The manifest is canonical JSON: fixed key order, shortest round-trip floats,
NaN/inf written as ``null``, no wall-clock data (that goes to
``timing.json``).  Two runs with equal state therefore produce byte-identical
manifests, and ``manifest.sha256`` records the digest.
"""
from __future__ import annotations

import hashlib
import json
import math
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from ._validation import derive_seed
from .plantnet_sim import SimParams
from .problem import parse_problem
from .search import SearchSpec, make_optimizer

__all__ = [
    "SCHEMA_VERSION",
    "ManifestError",
    "ReplayError",
    "Drift",
    "ReplayReport",
    "build_manifest",
    "canonical_bytes",
    "write_manifest",
    "load_manifest",
    "replay",
]

SCHEMA_VERSION = 1
MANIFEST = "manifest"
DIGEST = "manifest.sha256"


class ManifestError(ValueError):
    """Missing, corrupt, or incompatible manifest."""


class ReplayError(RuntimeError):
    """The archive cannot be replayed (missing trial directories, unknown executor)."""


def _clean(x):
    if isinstance(x, float):
        return x if math.isfinite(x) else None
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if hasattr(x, "item") and not isinstance(x, (str, bytes)):
        return _clean(x.item())
    return x


def build_manifest(cycle):
    """Manifest dict of a (completed or aborted) run cycle."""
    from .problem import problem_to_dict

    opt = cycle.optimizer
    opt._ensure_setup()
    spec = cycle.doc.search
    search = spec.to_dict()
    search["seed"] = cycle.seed
    told = {row["id"]: row for row in cycle.ledger}
    trials = []
    for t in cycle.trials:
        row = told.get(t.id)
        trials.append({
            "id": t.id,
            "order": None if row is None else row["order"],
            "status": t.status,
            "configuration": t.config,
            "objective": None if row is None else row["objective"],
            "loss": None if row is None else row["loss"],
            "seed": t.seed,
            "metrics": dict(sorted(t.metrics.items())),
        })
    best = None
    if opt.best is not None:
        point, value = opt.best
        bid = next(r["id"] for r in cycle.ledger
                   if tuple(r["configuration"].values()) == tuple(point)
                   and r["objective"] == value)
        best = {"trial": bid, "configuration": dict(zip(opt.problem.space.names, point)),
                "value": value}
    n_init = opt.sampler_spec_.n_initial
    executor = dict(cycle.executor.describe())
    executor["parallelism"] = cycle.spec.parallelism
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "tool": {"name": "contune", "version": __version__},
        "status": cycle.status,
        "abort_reason": cycle.reason,
        "convergence": cycle.convergence,
        "problem": problem_to_dict(cycle.doc.problem),
        "search": search,
        "sampler": {"method": opt.sampler_spec_.method, "n_initial": n_init,
                    "seed": opt.sampler_spec_.seed},
        "algorithm": {"name": opt.algorithm, "hyperparameters": opt.resolved_params()},
        "executor": executor,
        "seeds": {"run": cycle.seed,
                  "trials": [{"id": t.id, "seed": t.seed,
                              "repeat_seeds": [derive_seed(cycle.seed, t.id, r)
                                               for r in range(t.repeats)]}
                             for t in cycle.trials]},
        "counts": {"asked": len(cycle.trials), "told": len(cycle.ledger),
                   "initial": min(n_init, len(cycle.trials)),
                   "guided": max(0, len(cycle.trials) - n_init),
                   "failed": sum(r["status"] == "failed" for r in cycle.ledger)},
        "scenario": cycle.doc.scenario and {
            "name": cycle.doc.scenario.get("name"),
            "baseline": None if cycle.doc.scenario.get("baseline") is None else
            dict(zip(opt.problem.space.names, cycle.doc.scenario["baseline"])),
            "workloads": cycle.doc.scenario.get("workloads", []),
        },
        "reference": cycle.reference,
        "events": cycle.events,
        "completion_order": [r["id"] for r in cycle.ledger],
        "trials": trials,
        "ledger_csv": "ledger.csv",
        "best": best,
    }
    return _clean(manifest)


def canonical_bytes(manifest):
    return (json.dumps(_clean(manifest), indent=1, ensure_ascii=True, allow_nan=False)
            + "\n").encode("ascii")


def write_manifest(manifest, run_dir):
    """Write ``manifest`` and its sha256 digest; returns the digest."""
    data = canonical_bytes(manifest)
    run_dir = Path(run_dir)
    (run_dir / MANIFEST).write_bytes(data)
    digest = hashlib.sha256(data).hexdigest()
    (run_dir / DIGEST).write_text(f"{digest}  {MANIFEST}\n")
    return digest


def load_manifest(run_dir, verify_digest=True):
    run_dir = Path(run_dir)
    path = run_dir / MANIFEST
    if not path.is_file():
        raise ManifestError(f"no manifest in {run_dir}")
    data = path.read_bytes()
    if verify_digest and (run_dir / DIGEST).is_file():
        expected = (run_dir / DIGEST).read_text().split()[0]
        if hashlib.sha256(data).hexdigest() != expected:
            raise ManifestError(f"{path}: digest mismatch")
    try:
        manifest = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(manifest, dict) or next(iter(manifest), None) != "schema_version":
        raise ManifestError(f"{path}: schema_version must be the first field")
    if manifest["schema_version"] != SCHEMA_VERSION:
        raise ManifestError(
            f"{path}: schema version {manifest['schema_version']} is not supported "
            f"(expected {SCHEMA_VERSION})")
    return manifest


# -- replay -----------------------------------------------------------------

@dataclass(frozen=True)
class Drift:
    trial: int
    metric: str
    archived: float | None
    replayed: float | None

    def __str__(self):
        return f"trial {self.trial}: {self.metric} archived={self.archived!r} replayed={self.replayed!r}"


@dataclass
class ReplayReport:
    run_dir: str
    deterministic: bool
    sequence_ok: bool = True
    mismatched_points: list = field(default_factory=list)  # (trial, archived, replayed)
    drifts: list = field(default_factory=list)
    checked: int = 0

    @property
    def ok(self):
        if not self.sequence_ok:
            return False
        return not (self.deterministic and self.drifts)

    def to_dict(self):
        return _clean({
            "run_dir": self.run_dir,
            "deterministic": self.deterministic,
            "ok": self.ok,
            "trials_checked": self.checked,
            "sequence_ok": self.sequence_ok,
            "mismatched_points": [
                {"trial": t, "archived": list(a), "replayed": None if r is None else list(r)}
                for t, a, r in self.mismatched_points],
            "drifts": [{"trial": d.trial, "metric": d.metric, "archived": d.archived,
                        "replayed": d.replayed} for d in self.drifts],
        })

    def summary(self):
        lines = [f"replay of {self.run_dir}: {'OK' if self.ok else 'MISMATCH'} "
                 f"({self.checked} trials checked)"]
        if not self.sequence_ok:
            for t, a, r in self.mismatched_points:
                lines.append(f"  trial {t}: archived point {a} but replay suggested {r}")
        for d in self.drifts:
            lines.append(f"  drift {d}")
        if self.drifts and not self.deterministic:
            lines.append("  (external executor: drift reported, not treated as failure)")
        return "\n".join(lines) + "\n"


def _executor_from(desc):
    from .runner import CommandExecutor, SimulatorExecutor

    kind = desc.get("kind")
    if kind == "simulator":
        params = SimParams.from_dict(dict(desc["params"]))
        return SimulatorExecutor(params, desc["repeats"])
    if kind == "external_command":
        return CommandExecutor(desc["command"], desc.get("timeout"), desc.get("metrics_file", "metrics"),
                               desc["repeats"], desc.get("duration"), desc.get("clients"))
    raise ReplayError(f"executor kind {kind!r} cannot be replayed without an explicit executor")


def _archived_metrics(run_dir, trial_id):
    from .runner import parse_metrics

    path = Path(run_dir) / "trials" / str(trial_id) / "metrics"
    if not path.is_file():
        return None
    return parse_metrics(path.read_text())


def replay(run_dir, *, executor=None, parallelism=None, out_dir=None):
    """Re-run an archived run and compare it with the archive.

    The optimizer is rebuilt from the manifest and driven through the recorded
    ask/tell event order, telling the archived objective values, so the
    suggested-point sequence must match regardless of ``parallelism``.  Every
    told trial is re-evaluated; for the simulator each metric must match the
    archived ``metrics`` file bit for bit.  Nothing under ``run_dir`` is
    modified; scratch evaluations go to ``out_dir`` (default: a temporary
    directory).
    """
    from .runner import Trial, launch

    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ReplayError(f"run directory {run_dir} does not exist")
    manifest = load_manifest(run_dir)
    problem = parse_problem(manifest["problem"])
    search = SearchSpec.from_dict(manifest["search"])
    run_seed = manifest["seeds"]["run"]
    names = problem.space.names
    trials = {t["id"]: t for t in manifest["trials"]}
    told = [t for t in manifest["trials"] if t["order"] is not None]
    for t in told:
        if not (run_dir / "trials" / str(t["id"])).is_dir():
            raise ReplayError(f"trial directory trials/{t['id']} is missing")
    desc = manifest["executor"]
    executor = executor or _executor_from(desc)
    deterministic = desc.get("kind") == "simulator"
    n_slots = int(parallelism or desc.get("parallelism") or 1)
    report = ReplayReport(str(run_dir), deterministic)

    def evaluate(t, scratch):
        tr = Trial(t["id"], tuple(t["configuration"][n] for n in names), names, t["seed"],
                   repeats=executor.repeats)
        tr.artifact_dir = Path(scratch) / str(t["id"])
        tr.artifact_dir.mkdir(parents=True, exist_ok=True)
        metrics = launch(tr, executor, run_seed, problem)
        return t["id"], tr.status, metrics or {}

    with tempfile.TemporaryDirectory() as tmp:
        scratch = Path(out_dir) / "evaluations" if out_dir is not None else Path(tmp)
        with ThreadPoolExecutor(max_workers=n_slots) as pool:
            results = dict((tid, (st, m)) for tid, st, m in pool.map(
                lambda t: evaluate(t, scratch), told))

    for t in told:
        tid = t["id"]
        status, metrics = results[tid]
        report.checked += 1
        archived = _archived_metrics(run_dir, tid)
        if t["status"] != status:
            report.drifts.append(Drift(tid, "status", t["status"], status))
        if archived is None:
            if t["status"] == "done":
                report.drifts.append(Drift(tid, "metrics", None, None))
            continue
        for name in sorted(set(archived) | set(metrics)):
            a, r = archived.get(name), metrics.get(name)
            same = a == r or (a is not None and r is not None and math.isnan(a) and math.isnan(r))
            if not same:
                report.drifts.append(Drift(tid, name, a, r))

    opt = make_optimizer(problem, search, seed=run_seed)
    for kind, tid in manifest["events"]:
        if kind == "ask":
            point = opt.ask()
            expected = tuple(trials[tid]["configuration"][n] for n in names)
            if point is None or tuple(point) != expected:
                report.sequence_ok = False
                report.mismatched_points.append((tid, expected, point))
                break
        elif kind == "tell":
            t = trials[tid]
            value = t["objective"] if t["status"] == "done" else math.nan
            opt.tell(tuple(t["configuration"][n] for n in names),
                     math.nan if value is None else value)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "replay.json").write_text(json.dumps(report.to_dict(), indent=1) + "\n")
    return report
