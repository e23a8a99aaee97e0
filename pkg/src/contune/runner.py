"""Parallel evaluation cycle: prepare -> launch -> finalize for each trial.

One coordinator thread owns the optimizer and the archive; up to N worker
threads run ``launch`` concurrently and hand results back through a
completion queue, so the order in which results are told is exactly the order
in which evaluations finished.  That order is logged so that any run can be
replayed.

Run directory layout::

    <run_dir>/manifest, manifest.sha256, ledger.csv, timing.json
    <run_dir>/trials/<id>/config, metrics, checkpoint, log, ledger.csv
    <run_dir>/reference/...       (baseline of a scenario, when declared)
"""
from __future__ import annotations

import csv
import io
import json
import math
import queue
import subprocess
import threading
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ._validation import (
    DocumentError,
    check_choice,
    check_keys,
    check_number,
    derive_seed,
    line_of,
)
from .plantnet_sim import POOLS, PoolConfig, SimParams, simulate
from .problem import check_constraints, parse_problem, read_document
from .search import SearchSpec, make_optimizer
from .sensitivity import OatPlan

__all__ = [
    "Trial",
    "TrialFailure",
    "AbortRun",
    "RunAborted",
    "ArchiveCollisionError",
    "ExecutorSpec",
    "SimulatorExecutor",
    "CommandExecutor",
    "StubExecutor",
    "RunDocument",
    "load_run_document",
    "scenario_path",
    "prepare",
    "launch",
    "finalize",
    "run_cycle",
    "evaluate_batch",
    "format_metrics",
    "parse_metrics",
]

STATUSES = ("pending", "running", "done", "failed")
_TRANSITIONS = {"pending": {"running"}, "running": {"done", "failed"}}
REFERENCE_TAG = 2**32 - 1


class TrialFailure(RuntimeError):
    """An evaluation failed; ``diagnostics`` is kept in the trial directory."""

    def __init__(self, message, diagnostics=""):
        super().__init__(message)
        self.diagnostics = diagnostics


class AbortRun(RuntimeError):
    """Raised by an executor to stop the whole run (not just one trial)."""


class RunAborted(RuntimeError):
    def __init__(self, message, manifest=None, run_dir=None):
        super().__init__(message)
        self.manifest = manifest
        self.run_dir = run_dir


class ArchiveCollisionError(RuntimeError):
    """A trial directory already holds a different configuration."""


# -- trials -----------------------------------------------------------------

@dataclass
class Trial:
    id: int
    configuration: tuple
    names: tuple
    seed: int
    repeats: int = 1
    duration: float | None = None
    status: str = "pending"
    metrics: dict = field(default_factory=dict)
    artifact_dir: Path | None = None
    started: float | None = None
    ended: float | None = None
    diagnostics: str | None = None

    @property
    def config(self):
        return dict(zip(self.names, self.configuration))

    def advance(self, status):
        if status not in _TRANSITIONS.get(self.status, ()):
            raise ValueError(f"trial {self.id}: illegal transition {self.status} -> {status}")
        self.status = status


def format_metrics(metrics):
    """``name=value`` lines, sorted by name, shortest round-trip floats."""
    return "".join(f"{k}={float(metrics[k])!r}\n" for k in sorted(metrics))


def parse_metrics(text):
    """Inverse of :func:`format_metrics`; blank lines and ``#`` comments are skipped."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        name, sep, value = line.partition("=")
        name, value = name.strip(), value.strip()
        if not sep or not name.isidentifier():
            raise ValueError(f"metrics line {n}: expected name=value, got {raw!r}")
        if "," in value:
            raise ValueError(f"metrics line {n}: decimal point required, got {value!r}")
        try:
            out[name] = float(value)
        except ValueError:
            raise ValueError(f"metrics line {n}: {value!r} is not a number") from None
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, allow_nan=False) + "\n")


def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.generic):
        return _clean(x.item())
    return x


# -- executors --------------------------------------------------------------

def _repeat_seeds(run_seed, trial_id, repeats):
    return [derive_seed(run_seed, trial_id, r) for r in range(repeats)]


def _mean_timeseries(reports):
    acc = {}
    for rep in reports:
        for t, name, v in rep.timeseries_rows():
            acc.setdefault((t, name), []).append(v)
    rows = []
    for (t, name), vals in sorted(acc.items()):
        finite = [v for v in vals if math.isfinite(v)]
        rows.append((t, name, float(np.mean(finite)) if finite else math.nan))
    return rows


class SimulatorExecutor:
    """Runs the built-in Pl@ntNet simulator ``repeats`` times per trial."""

    kind = "simulator"

    def __init__(self, params=None, repeats=1, duration=None, clients=None):
        params = params or SimParams()
        if duration is not None:
            params = params.with_(duration=float(duration))
        if clients is not None:
            params = params.with_(clients=int(clients))
        self.params = params
        self.repeats = int(repeats)
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")

    @property
    def duration(self):
        return self.params.duration

    def describe(self):
        p = self.params.to_dict()
        p.pop("seed")
        return {"kind": self.kind, "repeats": self.repeats, "params": p}

    def run(self, configuration, seeds, trial_dir):
        missing = [p for p in POOLS if p not in configuration]
        extra = [k for k in configuration if k not in POOLS]
        if missing or extra:
            raise TrialFailure(f"simulator needs exactly the variables {POOLS}; "
                               f"missing {missing}, unexpected {extra}")
        pools = PoolConfig.from_mapping(configuration)
        reports = [simulate(pools, self.params.with_(seed=s)) for s in seeds]
        per_run = [r.metrics() for r in reports]
        metrics = {k: float(np.mean([m[k] for m in per_run])) for k in per_run[0]}
        pooled = [x for r in reports for x in r.samples["response_time"] if math.isfinite(x)]
        metrics["response_time_std"] = float(np.std(pooled, ddof=1)) if len(pooled) > 1 else 0.0
        metrics["n_samples"] = float(len(pooled))
        if trial_dir is not None:
            with open(Path(trial_dir) / "timeseries.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["timestamp", "metric", "value"])
                for t, name, v in _mean_timeseries(reports):
                    w.writerow([repr(float(t)), name, repr(v)])
        log = "".join(
            f"repeat {r} seed {s}: response_time_mean={m['response_time_mean']!r} "
            f"completed={int(m['completed'])}\n"
            for r, (s, m) in enumerate(zip(seeds, per_run))
        )
        return metrics, log


class CommandExecutor:
    """Spawns a shell command per repeat and reads ``name=value`` metrics back.

    ``{name}`` placeholders in the template are replaced by configuration
    values; ``{trial_dir}``, ``{seed}``, ``{repeat}``, ``{duration}`` and
    ``{clients}`` are also available.  The command runs inside the trial
    directory and must write ``metrics_file`` there.
    """

    kind = "external_command"

    def __init__(self, command, timeout=None, metrics_file="metrics", repeats=1,
                 duration=None, clients=None):
        self.command = command
        self.timeout = timeout
        self.metrics_file = metrics_file
        self.repeats = int(repeats)
        self.duration = duration
        self.clients = clients

    def describe(self):
        return {"kind": self.kind, "repeats": self.repeats, "command": self.command,
                "timeout": self.timeout, "metrics_file": self.metrics_file,
                "duration": self.duration, "clients": self.clients}

    def run(self, configuration, seeds, trial_dir):
        trial_dir = Path(trial_dir)
        runs, log = [], io.StringIO()
        for r, seed in enumerate(seeds):
            values = dict(configuration, trial_dir=str(trial_dir), seed=seed, repeat=r,
                          duration=self.duration, clients=self.clients)
            try:
                cmd = self.command.format(**values)
            except (KeyError, IndexError, ValueError) as exc:
                raise TrialFailure(f"bad command template: {exc!r}") from None
            out_path = trial_dir / self.metrics_file
            if out_path.exists():
                out_path.unlink()
            log.write(f"$ {cmd}\n")
            try:
                proc = subprocess.run(cmd, shell=True, cwd=trial_dir, capture_output=True,
                                      text=True, timeout=self.timeout)
            except subprocess.TimeoutExpired as exc:
                log.write(_text(exc.stdout) + _text(exc.stderr))
                raise TrialFailure(f"timeout after {self.timeout}s", log.getvalue()) from None
            log.write(proc.stdout + proc.stderr)
            if proc.returncode != 0:
                raise TrialFailure(f"command exited with status {proc.returncode}", log.getvalue())
            try:
                runs.append(parse_metrics(out_path.read_text()))
            except (OSError, ValueError) as exc:
                raise TrialFailure(f"unparseable metrics: {exc}", log.getvalue()) from None
            if self.repeats > 1:
                out_path.rename(trial_dir / f"{self.metrics_file}.r{r}")
        names = set(runs[0]).intersection(*runs[1:])
        metrics = {k: float(np.mean([m[k] for m in runs])) for k in sorted(names)}
        return metrics, log.getvalue()


def _text(x):
    if x is None:
        return ""
    return x.decode(errors="replace") if isinstance(x, bytes) else x


class StubExecutor:
    """Test double: ``metrics = function(configuration)`` after sleeping ``delay`` seconds."""

    kind = "stub"

    def __init__(self, function, delay=0.0, repeats=1):
        self.function = function
        self.delay = float(delay)
        self.repeats = int(repeats)
        self.duration = self.delay

    def describe(self):
        return {"kind": self.kind, "delay": self.delay, "repeats": self.repeats}

    def run(self, configuration, seeds, trial_dir):
        if self.delay:
            time.sleep(self.delay)
        out = self.function(configuration)
        if not isinstance(out, dict):
            out = {"objective": out}
        return {k: float(v) for k, v in out.items()}, ""


# -- documents --------------------------------------------------------------

EXECUTOR_KEYS = ("kind", "parallelism", "repeats", "duration", "clients", "calibration",
                 "params", "command", "timeout", "metrics_file")


@dataclass(frozen=True)
class ExecutorSpec:
    kind: str = "simulator"
    parallelism: int = 1
    repeats: int = 1
    duration: float | None = None
    clients: int | None = None
    params: tuple = ()  # SimParams fields, sorted items
    command: str | None = None
    timeout: float | None = None
    metrics_file: str = "metrics"

    def __post_init__(self):
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")

    @classmethod
    def from_dict(cls, node, base_dir=None):
        if node is None:
            return cls()
        check_keys(node, "executor", required=("kind",), optional=EXECUTOR_KEYS)
        kind = check_choice(node["kind"], "executor.kind", {"simulator", "external_command"},
                            line_of(node, "kind"))

        def num(key, **kw):
            if node.get(key) is None:
                return None
            return check_number(node[key], f"executor.{key}", line_of(node, key), **kw)

        parallelism = num("parallelism", integer=True, minimum=1) or 1
        repeats = num("repeats", integer=True, minimum=1) or 1
        duration = num("duration", exclusive_minimum=0)
        clients = num("clients", integer=True, minimum=1)
        timeout = num("timeout", exclusive_minimum=0)
        params = {}
        if kind == "simulator":
            if node.get("command") is not None:
                raise DocumentError("invalid_value", "executor.command needs kind external_command",
                                    line_of(node, "command"))
            if node.get("calibration") is not None:
                params.update(_load_calibration(node["calibration"], base_dir,
                                                line_of(node, "calibration")))
            if node.get("params") is not None:
                check_keys(node["params"], "executor.params",
                           optional=[f for f in SimParams.__dataclass_fields__ if f != "seed"])
                params.update(node["params"])
            try:
                SimParams.from_dict(dict(params))
            except (TypeError, ValueError) as exc:
                raise DocumentError("invalid_value", f"executor.params: {exc}",
                                    line_of(node)) from None
        else:
            if not isinstance(node.get("command"), str) or not node["command"].strip():
                raise DocumentError("missing_field", "executor.command must be a non-empty string",
                                    line_of(node, "command"))
            for key in ("calibration", "params"):
                if node.get(key) is not None:
                    raise DocumentError("invalid_value", f"executor.{key} needs kind simulator",
                                        line_of(node, key))
        metrics_file = node.get("metrics_file", "metrics")
        if not isinstance(metrics_file, str) or "/" in metrics_file or not metrics_file:
            raise DocumentError("invalid_value", "executor.metrics_file must be a plain file name",
                                line_of(node, "metrics_file"))
        return cls(kind, parallelism, repeats, None if duration is None else float(duration),
                   clients, tuple(sorted(_freeze(params).items())), node.get("command"),
                   None if timeout is None else float(timeout), metrics_file)

    def with_overrides(self, **kw):
        from dataclasses import replace
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def sim_params(self):
        return SimParams.from_dict(_thaw(dict(self.params)))

    def build(self):
        if self.kind == "simulator":
            return SimulatorExecutor(self.sim_params(), self.repeats, self.duration, self.clients)
        return CommandExecutor(self.command, self.timeout, self.metrics_file, self.repeats,
                               self.duration, self.clients)


def _freeze(d):
    return {k: tuple(sorted(v.items())) if isinstance(v, dict) else v for k, v in d.items()}


def _thaw(d):
    return {k: dict(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _load_calibration(ref, base_dir, line=None):
    candidates = []
    if base_dir is not None:
        candidates.append(Path(base_dir) / ref)
    candidates.append(Path(ref))
    candidates.append(Path(str(resources.files("contune") / "scenarios" / ref)))
    for path in candidates:
        if path.is_file():
            doc = json.loads(path.read_text())
            return dict(doc.get("params", doc))
    raise DocumentError("invalid_value", f"calibration file {ref!r} not found", line)


def scenario_path(name):
    """Path of a shipped scenario document (``plantnet``)."""
    path = Path(str(resources.files("contune") / "scenarios" / f"{name}.yaml"))
    if not path.is_file():
        raise DocumentError("invalid_value", f"unknown scenario {name!r}")
    return path


@dataclass
class RunDocument:
    tree: dict
    problem: object
    search: SearchSpec
    executor: ExecutorSpec
    plan: OatPlan | None
    scenario: dict | None
    base_dir: Path | None = None


def _plain(node):
    if isinstance(node, dict):
        return {k: _plain(v) for k, v in node.items()}
    if isinstance(node, list):
        return [_plain(v) for v in node]
    return node


def load_run_document(source):
    """Parse every section of a problem document (path, text, or mapping)."""
    base_dir = None
    if isinstance(source, (str, Path)) and "\n" not in str(source) and Path(source).is_file():
        base_dir = Path(source).resolve().parent
    tree = read_document(source)
    problem = parse_problem(tree)
    search = SearchSpec.from_dict(tree.get("search"))
    executor = ExecutorSpec.from_dict(tree.get("executor"), base_dir)
    plan = None
    if tree.get("sensitivity") is not None:
        plan = OatPlan.from_dict(tree["sensitivity"], problem.space)
    scenario = None
    if tree.get("scenario") is not None:
        scenario = _parse_scenario(tree["scenario"], problem.space)
    return RunDocument(_plain(tree), problem, search, executor, plan, scenario, base_dir)


def _parse_scenario(node, space):
    check_keys(node, "scenario", optional=("name", "baseline", "workloads"))
    out = {"name": node.get("name"), "baseline": None, "workloads": []}
    if node.get("baseline") is not None:
        base = node["baseline"]
        check_keys(base, "scenario.baseline", required=space.names)
        point = tuple(base[n] for n in space.names)
        from .problem import validate_configuration
        problems = validate_configuration(space, point)
        if problems:
            raise DocumentError("invalid_value", f"scenario.baseline: {'; '.join(problems)}",
                                line_of(base))
        out["baseline"] = space.configuration(point)
    for w in node.get("workloads") or []:
        out["workloads"].append(check_number(w, "scenario.workloads", line_of(node, "workloads"),
                                             integer=True, minimum=1))
    return out


# -- lifecycle --------------------------------------------------------------

def _config_snapshot(trial):
    return json.dumps({"id": trial.id, "configuration": trial.config, "seed": trial.seed,
                       "repeats": trial.repeats, "duration": trial.duration}, indent=1) + "\n"


def prepare(trial, run_dir, subdir="trials"):
    """Create ``<run_dir>/trials/<id>/config``; a second call is a no-op."""
    if trial.status != "pending":
        raise ValueError(f"trial {trial.id} is {trial.status}, expected pending")
    d = Path(run_dir) / subdir / str(trial.id)
    text = _config_snapshot(trial)
    cfg = d / "config"
    if cfg.exists():
        if cfg.read_text() != text:
            raise ArchiveCollisionError(f"{d} already holds a different configuration")
    else:
        d.mkdir(parents=True, exist_ok=True)
        cfg.write_text(text)
    trial.artifact_dir = d
    return d


def launch(trial, executor, run_seed=0, problem=None, clock=time.monotonic):
    """Evaluate a prepared trial; returns its metrics or None on failure."""
    if trial.artifact_dir is None:
        raise ValueError(f"trial {trial.id} has not been prepared")
    trial.advance("running")
    trial.started = clock()
    seeds = _repeat_seeds(run_seed, trial.id, trial.repeats)
    log = ""
    try:
        metrics, log = executor.run(trial.config, seeds, trial.artifact_dir)
        if problem is not None:
            _judge(problem, trial, metrics)
    except AbortRun:
        trial.ended = clock()
        raise
    except TrialFailure as exc:
        trial.ended = clock()
        trial.diagnostics = f"{exc}\n{exc.diagnostics}".rstrip() + "\n"
        trial.advance("failed")
        _write_log(trial, exc.diagnostics or log)
        return None
    except Exception:
        trial.ended = clock()
        trial.diagnostics = traceback.format_exc()
        trial.advance("failed")
        _write_log(trial, log)
        return None
    trial.ended = clock()
    trial.metrics = metrics
    trial.advance("done")
    _write_log(trial, log)
    return metrics


def _write_log(trial, text):
    if trial.artifact_dir is not None:
        (Path(trial.artifact_dir) / "log").write_text(text or "")


def _judge(problem, trial, metrics):
    name = problem.objective.metric
    if name not in metrics:
        raise TrialFailure(f"objective metric {name!r} missing from {sorted(metrics)}")
    if not math.isfinite(metrics[name]):
        raise TrialFailure(f"objective metric {name!r} is not finite")
    if problem.metric_constraints:
        values = dict(trial.config, **metrics)
        violated = check_constraints(problem, trial.configuration, values)
        if violated:
            raise TrialFailure("constraint violated: " + "; ".join(map(str, violated)))


def _checkpoint(optimizer):
    model = optimizer.current_model() if hasattr(optimizer, "current_model") else None
    state = {"algorithm": optimizer.algorithm, "n_told": len(optimizer.dataset_),
             "best": None if optimizer.best is None else list(optimizer.best),
             "model": None if model is None else model.to_dict()}
    return state, model


def finalize(trial, optimizer, run_dir, ledger, keep_checkpoints=True):
    """Write metrics (or diagnostics + penalty), a model checkpoint and the ledger."""
    if trial.status not in ("done", "failed"):
        raise ValueError(f"trial {trial.id} is {trial.status}")
    d = Path(trial.artifact_dir)
    obs = optimizer.dataset_[-1]
    if trial.status == "done":
        (d / "metrics").write_text(format_metrics(trial.metrics))
    else:
        (d / "diagnostics").write_text(
            (trial.diagnostics or "") + f"penalty={obs.loss!r}\n")
    state, model = _checkpoint(optimizer)
    model_dict = state.pop("model")
    state = _clean(state)
    state["model"] = model_dict  # plain lists of finite floats already
    (d / "checkpoint").write_text(json.dumps(state) + "\n")
    if not keep_checkpoints:
        for other in (Path(run_dir) / "trials").iterdir():
            ck = other / "checkpoint"
            if other != d and ck.exists():
                ck.unlink()
    text = ledger_csv(ledger, optimizer.problem.space.names)
    (d / "ledger.csv").write_text(text)
    (Path(run_dir) / "ledger.csv").write_text(text)
    return model


def ledger_csv(rows, names):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "order", "status", *names, "objective", "loss"])
    for r in rows:
        obj = r["objective"]
        w.writerow([r["id"], r["order"], r["status"], *[r["configuration"][n] for n in names],
                    "" if obj is None else repr(obj), repr(r["loss"])])
    return buf.getvalue()


# -- coordinator ------------------------------------------------------------

class _Cycle:
    def __init__(self, doc, run_dir, executor, spec, seed, keep_checkpoints):
        self.doc = doc
        self.run_dir = Path(run_dir)
        self.executor = executor
        self.spec = spec
        self.seed = seed
        self.keep_checkpoints = keep_checkpoints
        self.optimizer = make_optimizer(doc.problem, doc.search, seed=seed)
        self.trials = []
        self.ledger = []
        self.events = []
        self.reference = None
        self.t0 = time.monotonic()
        self.status = "running"
        self.reason = None
        self.convergence = None

    def new_trial(self, point):
        trial = Trial(len(self.trials), tuple(point), self.doc.problem.space.names,
                      derive_seed(self.seed, len(self.trials)),
                      repeats=self.executor.repeats, duration=self.executor.duration)
        self.trials.append(trial)
        return trial

    def record(self, trial):
        obs = self.optimizer.dataset_[-1]
        self.ledger.append({
            "id": trial.id,
            "order": len(self.ledger),
            "status": trial.status,
            "configuration": trial.config,
            "objective": None if obs.failed else obs.value,
            "loss": obs.loss,
            "metrics": dict(sorted(trial.metrics.items())),
        })

    def evaluate_reference(self):
        base = (self.doc.scenario or {}).get("baseline")
        if base is None:
            return
        t = Trial(REFERENCE_TAG, base, self.doc.problem.space.names,
                  derive_seed(self.seed, REFERENCE_TAG), repeats=self.executor.repeats,
                  duration=self.executor.duration)
        target = self.run_dir / "reference"
        target.mkdir(parents=True, exist_ok=True)
        (target / "config").write_text(_config_snapshot(t))
        t.artifact_dir = target
        metrics = launch(t, self.executor, self.seed, self.doc.problem)
        if metrics is not None:
            (target / "metrics").write_text(format_metrics(metrics))
        self.reference = {"configuration": t.config, "status": t.status,
                          "metrics": dict(sorted((metrics or {}).items()))}


def run_cycle(document, run_dir, *, executor=None, parallelism=None, repeats=None,
              duration=None, clients=None, seed=None, keep_checkpoints=True,
              reference=True):
    """Optimize the document's problem, archiving everything under ``run_dir``.

    Returns the manifest (a dict) that was written to ``<run_dir>/manifest``.
    Raises :class:`RunAborted` after writing an ``aborted`` manifest if the
    coordinator fails.
    """
    from .archive import build_manifest, write_manifest

    doc = document if isinstance(document, RunDocument) else load_run_document(document)
    spec = doc.executor.with_overrides(parallelism=parallelism, repeats=repeats,
                                       duration=duration, clients=clients)
    if executor is None:
        executor = spec.build()
    elif repeats is not None:
        executor.repeats = int(repeats)
    run_seed = doc.search.seed if seed is None else int(seed)
    run_dir = Path(run_dir)
    if (run_dir / "manifest").exists():
        raise ArchiveCollisionError(f"{run_dir} already contains a run")
    (run_dir / "trials").mkdir(parents=True, exist_ok=True)

    cyc = _Cycle(doc, run_dir, executor, spec, run_seed, keep_checkpoints)
    done_q = queue.Queue()
    running = {}
    n_slots = spec.parallelism
    lock = threading.Lock()

    def work(trial):
        try:
            launch(trial, executor, run_seed, doc.problem)
            done_q.put((trial, None))
        except BaseException as exc:  # noqa: BLE001 - forwarded to the coordinator
            done_q.put((trial, exc))

    pool = ThreadPoolExecutor(max_workers=n_slots)
    try:
        if reference and executor.kind != "stub":
            cyc.evaluate_reference()
        opt = cyc.optimizer
        unarchived = None
        while True:
            while len(running) < n_slots and not opt.converged()[0]:
                point = opt.ask()
                if point is None:
                    break
                trial = cyc.new_trial(point)
                cyc.events.append(["ask", trial.id])
                prepare(trial, run_dir)
                with lock:
                    running[trial.id] = trial
                cyc.events.append(["start", trial.id])
                pool.submit(work, trial)
            # archive the last told trial only after its slot has been refilled;
            # the optimizer state is unchanged since that tell (asks only add
            # pending points) so the checkpoint is the model current at tell time
            if unarchived is not None:
                finalize(unarchived, opt, run_dir, cyc.ledger, keep_checkpoints)
                unarchived = None
            if not running:
                break
            trial, exc = done_q.get()
            del running[trial.id]
            cyc.events.append(["end", trial.id])
            if exc is not None:
                raise exc
            value = trial.metrics[doc.problem.objective.metric] if trial.status == "done" else math.nan
            opt.tell(trial.configuration, value)
            cyc.events.append(["tell", trial.id])
            cyc.record(trial)
            unarchived = trial
        cyc.status = "completed"
        cyc.convergence = opt.converged()[1] or "exhausted"
    except BaseException as exc:
        cyc.status = "aborted"
        cyc.reason = f"{type(exc).__name__}: {exc}"
        pool.shutdown(wait=True, cancel_futures=True)
        manifest = build_manifest(cyc)
        write_manifest(manifest, run_dir)
        _write_timing(cyc)
        if isinstance(exc, KeyboardInterrupt):
            raise
        raise RunAborted(cyc.reason, manifest, run_dir) from exc
    pool.shutdown(wait=True)
    manifest = build_manifest(cyc)
    write_manifest(manifest, run_dir)
    _write_timing(cyc)
    return manifest


def _write_timing(cyc):
    rows = [{"id": t.id,
             "start": None if t.started is None else t.started - cyc.t0,
             "end": None if t.ended is None else t.ended - cyc.t0}
            for t in cyc.trials]
    _write_json(cyc.run_dir / "timing.json",
                _clean({"wall_clock_unix": time.time(), "elapsed": time.monotonic() - cyc.t0,
                        "trials": rows}))


def max_concurrency(intervals):
    """Largest number of overlapping ``(start, end)`` intervals (ends before starts on ties)."""
    marks = sorted([(s, 1) for s, _ in intervals] + [(e, -1) for _, e in intervals],
                   key=lambda m: (m[0], m[1]))
    cur = peak = 0
    for _, d in marks:
        cur += d
        peak = max(peak, cur)
    return peak


def evaluate_batch(configurations, names, executor, out_dir, run_seed=0, parallelism=1,
                   problem=None):
    """Evaluate fixed configurations in parallel slots (no optimizer involved).

    Each configuration gets ``<out_dir>/trials/<k>/`` and seeds derived from
    ``(run_seed, k, repeat)``.  Returns the list of trials in input order.
    """
    trials = []
    for k, point in enumerate(configurations):
        t = Trial(k, tuple(point), tuple(names), derive_seed(run_seed, k),
                  repeats=executor.repeats, duration=executor.duration)
        prepare(t, out_dir)
        trials.append(t)

    def work(t):
        metrics = launch(t, executor, run_seed, problem)
        if metrics is not None:
            (Path(t.artifact_dir) / "metrics").write_text(format_metrics(metrics))
        elif t.diagnostics:
            (Path(t.artifact_dir) / "diagnostics").write_text(t.diagnostics)
        return t

    with ThreadPoolExecutor(max_workers=max(1, int(parallelism))) as pool:
        list(pool.map(work, trials))
    return trials
