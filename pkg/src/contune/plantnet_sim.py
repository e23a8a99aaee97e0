"""Discrete-event model of the Pl@ntNet identification engine.

Closed-loop clients send identification requests through four thread pools
(HTTP, Download, Extract, Simsearch).  A request holds an HTTP token for its
whole life and walks the task pipeline::

    pre_process -> wait_download -> download -> wait_extract -> extract
    -> process -> wait_simsearch -> simsearch -> post_process

CPU tasks share ``cpu_cores`` by processor sharing; extract runs on one GPU
whose per-inference speed drops by ``gpu_efficiency`` for every additional
concurrent inference.  Both shared resources use a virtual-time clock so each
event costs O(log n).
"""
from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

__all__ = [
    "PoolConfig",
    "SimParams",
    "MetricsReport",
    "simulate",
    "TASKS",
    "POOLS",
    "TokenOverflowError",
    "CalibrationResult",
    "calibrate",
]

TASKS = ("pre_process", "wait_download", "download", "wait_extract", "extract",
         "process", "wait_simsearch", "simsearch", "post_process")
POOLS = ("http", "download", "extract", "simsearch")
SERVICE_TASKS = ("pre_process", "download", "extract", "process", "simsearch", "post_process")

_DEFAULT_CPU_WEIGHTS = {"pre_process": 1.0, "download": 0.0, "extract": 0.0,
                        "process": 1.0, "simsearch": 1.0, "post_process": 1.0}


class TokenOverflowError(AssertionError):
    """More concurrent holders than a pool's size (engine bug guard)."""


@dataclass(frozen=True)
class PoolConfig:
    http: int = 40
    download: int = 40
    extract: int = 7
    simsearch: int = 40

    def __post_init__(self):
        for name in POOLS:
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v or v < 1:
                raise ValueError(f"pool {name} must be a positive integer, got {v!r}")
            object.__setattr__(self, name, int(v))

    @classmethod
    def from_mapping(cls, values):
        missing = [p for p in POOLS if p not in values]
        if missing:
            raise KeyError(f"configuration lacks pool sizes for {missing}")
        return cls(**{p: values[p] for p in POOLS})


@dataclass(frozen=True)
class SimParams:
    cpu_cores: int = 40
    clients: int = 80
    duration: float = 1380.0
    sample_interval: float = 10.0
    warmup_fraction: float = 0.1
    ramp_up: float | None = None  # spread of client start times; None = one unloaded cycle
    pre_process: float = 0.02
    download: float = 0.01
    extract: float = 0.1938
    process: float = 0.06
    simsearch: float = 0.996
    post_process: float = 0.02
    cpu_weights: dict = field(default_factory=lambda: dict(_DEFAULT_CPU_WEIGHTS))
    gpu_efficiency: float = 0.99
    gpu_mem_base: float = 1.6
    gpu_mem_per_thread: float = 1.2
    jitter_cv: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if int(self.cpu_cores) != self.cpu_cores or self.cpu_cores < 1:
            raise ValueError("cpu_cores must be a positive integer")
        if int(self.clients) != self.clients or self.clients < 1:
            raise ValueError("clients must be a positive integer")
        for name in SERVICE_TASKS + ("duration", "sample_interval"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.ramp_up is not None and not 0 <= self.ramp_up < self.warmup_fraction * self.duration + self.duration:
            raise ValueError("ramp_up must be >= 0 and shorter than the simulated time")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must be in [0, 1)")
        if not 0 < self.gpu_efficiency <= 1:
            raise ValueError("gpu_efficiency must be in (0, 1]")
        if self.jitter_cv < 0:
            raise ValueError("jitter_cv must be >= 0")
        if self.gpu_mem_base < 0 or self.gpu_mem_per_thread < 0:
            raise ValueError("GPU memory parameters must be >= 0")
        weights = dict(_DEFAULT_CPU_WEIGHTS)
        weights.update(self.cpu_weights or {})
        if set(weights) != set(SERVICE_TASKS) or any(w < 0 for w in weights.values()):
            raise ValueError(f"cpu_weights must map {SERVICE_TASKS} to non-negative numbers")
        object.__setattr__(self, "cpu_weights", weights)

    @property
    def service_times(self):
        return {t: getattr(self, t) for t in SERVICE_TASKS}

    def with_(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown simulator parameters: {sorted(unknown)}")
        return cls(**d)

    def __hash__(self):
        return hash(tuple(sorted((k, v) for k, v in asdict(self).items() if k != "cpu_weights")))


@dataclass
class MetricsReport:
    """Aggregates over the measurement window of one simulation run."""

    response_time_mean: float
    response_time_std: float
    task_times: dict
    wait_http: float
    busy: dict
    cpu_utilization: float
    gpu_mem: float
    throughput: float
    completed: int
    samples: dict = field(default_factory=dict, repr=False)

    def metrics(self):
        """Flat ``name -> value`` map (the ``metrics`` file vocabulary)."""
        out = {
            "response_time_mean": self.response_time_mean,
            "response_time_std": self.response_time_std,
            "throughput": self.throughput,
            "completed": float(self.completed),
            "cpu_utilization": self.cpu_utilization,
            "gpu_mem": self.gpu_mem,
            "wait_http_time": self.wait_http,
        }
        for task in TASKS:
            out[f"{task}_time"] = self.task_times[task]
        for pool in POOLS:
            out[f"{pool}_busy"] = self.busy[pool]
        return out

    def timeseries_rows(self):
        """``(timestamp, metric, value)`` rows for plotting."""
        times = self.samples.get("time", [])
        rows = []
        for name, values in self.samples.items():
            if name == "time":
                continue
            rows.extend((t, name, v) for t, v in zip(times, values))
        rows.sort(key=lambda r: (r[0], r[1]))
        return rows


class _Jitter:
    """Lognormal multipliers with mean 1 and the given coefficient of variation."""

    def __init__(self, rng, cv, block=8192):
        self.rng = rng
        self.block = block
        self.constant = cv == 0
        if not self.constant:
            self.sigma = math.sqrt(math.log1p(cv * cv))
            self.mu = -0.5 * self.sigma**2
        self.buf = []
        self.i = 0

    def __call__(self):
        if self.constant:
            return 1.0
        if self.i >= len(self.buf):
            self.buf = self.rng.lognormal(self.mu, self.sigma, self.block).tolist()
            self.i = 0
        v = self.buf[self.i]
        self.i += 1
        return v


def simulate(pools, params, trace=None):
    """Run one closed-loop simulation and return its :class:`MetricsReport`.

    ``trace``, when a list, receives ``(time, pool, holders)`` after every
    token change (used by the token-conservation tests).
    """
    if not isinstance(pools, PoolConfig):
        pools = PoolConfig.from_mapping(pools)
    p = params
    rng = np.random.default_rng(p.seed)
    jitter = _Jitter(rng, p.jitter_cv)
    base = p.service_times
    weights = p.cpu_weights
    cores = float(p.cpu_cores)
    eff = p.gpu_efficiency
    warmup = p.warmup_fraction * p.duration
    end_time = warmup + p.duration
    n_samples = int(round(p.duration / p.sample_interval))
    sizes = {"http": pools.http, "download": pools.download,
             "extract": pools.extract, "simsearch": pools.simsearch}

    # --- shared-resource state --------------------------------------------
    now = 0.0
    held = {k: 0 for k in POOLS}
    queues = {k: deque() for k in POOLS}
    cpu_heap, cpu_v, cpu_load = [], 0.0, 0.0
    gpu_heap, gpu_v, gpu_k = [], 0.0, 0
    timers = []  # (time, seq, client, task) for non-shared tasks
    seq = 0

    # per-client timestamps of the current request
    stamps = [[0.0] * 11 for _ in range(p.clients)]
    # stamp slots
    ISSUE, HTTP, PRE, DLS, DLE, EXS, EXE, PROC, SSS, SSE, DONE = range(11)

    # --- measurement --------------------------------------------------------
    integ = {k: 0.0 for k in POOLS}
    integ_cpu = 0.0
    done_count = 0
    rt_sum = 0.0
    task_sum = {t: 0.0 for t in TASKS}
    wait_http_sum = 0.0
    interval_rt, interval_n = 0.0, 0
    samples = {"time": [], "response_time": [], "throughput": [], "cpu_utilization": []}
    for k in POOLS:
        samples[f"{k}_busy"] = []
    last_integ = dict(integ)
    last_cpu = 0.0
    next_sample = warmup + p.sample_interval
    samples_taken = 0

    def cpu_rate():
        return 1.0 if cpu_load <= cores else cores / cpu_load

    def gpu_rate():
        return eff ** (gpu_k - 1) if gpu_k > 0 else 1.0

    def start_task(c, task):
        nonlocal seq, cpu_load, gpu_k
        work = base[task] * jitter()
        seq += 1
        if task == "extract":
            gpu_k += 1
            heapq.heappush(gpu_heap, (gpu_v + work, seq, c))
        elif weights[task] > 0:
            cpu_load += weights[task]
            heapq.heappush(cpu_heap, (cpu_v + work, seq, c, task))
        else:
            heapq.heappush(timers, (now + work, seq, c, task))

    def acquire(c, pool, slot):
        """Take a token now or queue; returns True when granted immediately."""
        if held[pool] < sizes[pool]:
            held[pool] += 1
            if trace is not None:
                trace.append((now, pool, held[pool]))
            stamps[c][slot] = now
            return True
        queues[pool].append(c)
        return False

    def release(pool):
        q = queues[pool]
        if q:
            c = q.popleft()
            if trace is not None:
                trace.append((now, pool, held[pool]))
            granted(c, pool)
        else:
            held[pool] -= 1
            if trace is not None:
                trace.append((now, pool, held[pool]))
        if held[pool] > sizes[pool]:
            raise TokenOverflowError(f"{pool}: {held[pool]} holders > {sizes[pool]}")

    def granted(c, pool):
        # token handed over on release: continue the request's pipeline
        if pool == "http":
            stamps[c][HTTP] = now
            start_task(c, "pre_process")
        elif pool == "download":
            stamps[c][DLS] = now
            start_task(c, "download")
        elif pool == "extract":
            stamps[c][EXS] = now
            start_task(c, "extract")
        else:
            stamps[c][SSS] = now
            start_task(c, "simsearch")

    def issue(c):
        st = stamps[c]
        st[ISSUE] = now
        if acquire(c, "http", HTTP):
            start_task(c, "pre_process")

    def finish(c, task):
        nonlocal done_count, rt_sum, wait_http_sum, interval_rt, interval_n
        st = stamps[c]
        if task == "issue":
            issue(c)
        elif task == "pre_process":
            st[PRE] = now
            if acquire(c, "download", DLS):
                start_task(c, "download")
        elif task == "download":
            st[DLE] = now
            release("download")
            if acquire(c, "extract", EXS):
                start_task(c, "extract")
        elif task == "extract":
            st[EXE] = now
            release("extract")
            start_task(c, "process")
        elif task == "process":
            st[PROC] = now
            if acquire(c, "simsearch", SSS):
                start_task(c, "simsearch")
        elif task == "simsearch":
            st[SSE] = now
            release("simsearch")
            start_task(c, "post_process")
        else:
            st[DONE] = now
            release("http")
            if now > warmup:
                rt = now - st[ISSUE]
                done_count += 1
                rt_sum += rt
                interval_rt += rt
                interval_n += 1
                wait_http_sum += st[HTTP] - st[ISSUE]
                task_sum["pre_process"] += st[PRE] - st[HTTP]
                task_sum["wait_download"] += st[DLS] - st[PRE]
                task_sum["download"] += st[DLE] - st[DLS]
                task_sum["wait_extract"] += st[EXS] - st[DLE]
                task_sum["extract"] += st[EXE] - st[EXS]
                task_sum["process"] += st[PROC] - st[EXE]
                task_sum["wait_simsearch"] += st[SSS] - st[PROC]
                task_sum["simsearch"] += st[SSE] - st[SSS]
                task_sum["post_process"] += now - st[SSE]
            issue(c)

    # clients join evenly over the ramp-up so they do not move in lockstep
    ramp = sum(base.values()) if p.ramp_up is None else p.ramp_up
    for c in range(p.clients):
        start = c * ramp / p.clients
        if start == 0:
            issue(c)
        else:
            seq += 1
            heapq.heappush(timers, (start, seq, c, "issue"))

    inf = math.inf
    while True:
        r_cpu = cpu_rate()
        r_gpu = gpu_rate()
        t_cpu = now + (cpu_heap[0][0] - cpu_v) / r_cpu if cpu_heap else inf
        t_gpu = now + (gpu_heap[0][0] - gpu_v) / r_gpu if gpu_heap else inf
        t_tim = timers[0][0] if timers else inf
        t_next = min(t_cpu, t_gpu, t_tim, next_sample)
        if t_next > end_time:
            t_next = end_time
        dt = t_next - now
        if dt > 0:
            if cpu_heap:
                cpu_v += r_cpu * dt
            if gpu_heap:
                gpu_v += r_gpu * dt
            # time integrals, restricted to the measurement window
            lo = now if now > warmup else warmup
            if t_next > lo:
                w = t_next - lo
                for k in POOLS:
                    integ[k] += held[k] * w
                integ_cpu += (cpu_load if cpu_load < cores else cores) * w
            now = t_next
        if now >= next_sample - 1e-12 and samples_taken < n_samples and now >= warmup:
            span = p.sample_interval
            samples["time"].append(round(now - warmup, 9))
            samples["response_time"].append(interval_rt / interval_n if interval_n else math.nan)
            samples["throughput"].append(interval_n / span)
            samples["cpu_utilization"].append(min(1.0, (integ_cpu - last_cpu) / (span * cores)))
            for k in POOLS:
                samples[f"{k}_busy"].append(min(1.0, (integ[k] - last_integ[k]) / (span * sizes[k])))
            last_integ = dict(integ)
            last_cpu = integ_cpu
            interval_rt, interval_n = 0.0, 0
            samples_taken += 1
            next_sample = warmup + (samples_taken + 1) * p.sample_interval
            if samples_taken >= n_samples:
                break
            continue
        if now >= end_time:
            break
        if t_next == t_cpu and cpu_heap:
            _, _, c, task = heapq.heappop(cpu_heap)
            cpu_load -= weights[task]
            if not cpu_heap:
                cpu_load = 0.0
            finish(c, task)
        elif t_next == t_gpu and gpu_heap:
            _, _, c = heapq.heappop(gpu_heap)
            gpu_k -= 1
            finish(c, "extract")
        elif t_next == t_tim and timers:
            _, _, c, task = heapq.heappop(timers)
            finish(c, task)

    window = p.duration
    rts = [x for x in samples["response_time"] if not math.isnan(x)]
    rt_mean = float(np.mean(rts)) if rts else math.nan
    rt_std = float(np.std(rts, ddof=1)) if len(rts) > 1 else 0.0
    n = max(done_count, 1)
    return MetricsReport(
        response_time_mean=rt_mean,
        response_time_std=rt_std,
        task_times={t: task_sum[t] / n for t in TASKS},
        wait_http=wait_http_sum / n,
        # the min() only absorbs rounding in the accumulated integrals
        busy={k: min(1.0, integ[k] / (window * sizes[k])) for k in POOLS},
        cpu_utilization=min(1.0, integ_cpu / (window * cores)),
        gpu_mem=p.gpu_mem_base + pools.extract * p.gpu_mem_per_thread,
        throughput=done_count / window,
        completed=done_count,
        samples=samples,
    )


CALIBRATED_FIELDS = SERVICE_TASKS + ("gpu_efficiency",)
_MIN_TIME = 1e-6


@dataclass
class CalibrationResult:
    params: SimParams
    residuals: list
    loss: float
    iterations: int
    converged: bool
    warning: str | None = None

    def to_dict(self):
        return {
            "params": self.params.to_dict(),
            "residuals": list(self.residuals),
            "loss": self.loss,
            "iterations": self.iterations,
            "converged": self.converged,
            "warning": self.warning,
        }


def _clamp(name, value):
    if name == "gpu_efficiency":
        return min(max(value, 1e-3), 1.0)
    return max(value, _MIN_TIME)


def calibrate(targets, params=None, *, parameters=CALIBRATED_FIELDS, duration=None,
              step=0.2, min_step=0.005, tol=1e-3, max_iter=40):
    """Fit service times (and GPU efficiency) to observed mean response times.

    ``targets`` is a sequence of ``(PoolConfig, clients, response_time)``.  The
    loss is the sum of squared relative errors.  Each sweep tries a
    multiplicative step up and down on every parameter in turn and keeps any
    improvement; the step is halved after a sweep without progress.  Seeds are
    fixed by ``params.seed`` so the fit is deterministic.
    """
    targets = [(t[0] if isinstance(t[0], PoolConfig) else PoolConfig.from_mapping(t[0]),
                int(t[1]), float(t[2])) for t in targets]
    if not targets:
        raise ValueError("calibrate needs at least one target")
    if any(rt <= 0 for _, _, rt in targets):
        raise ValueError("target response times must be > 0")
    unknown = set(parameters) - set(CALIBRATED_FIELDS)
    if unknown:
        raise ValueError(f"cannot calibrate {sorted(unknown)}")
    base = params or SimParams()
    if duration is not None:
        base = base.with_(duration=float(duration))

    def residuals_of(p):
        out = []
        for pools, clients, rt in targets:
            sim = simulate(pools, p.with_(clients=clients)).response_time_mean
            out.append((sim - rt) / rt)
        return out

    def loss_of(res):
        return float(sum(r * r for r in res))

    best = base
    best_res = residuals_of(best)
    best_loss = loss_of(best_res)
    it = 0
    while best_loss > tol and step >= min_step and it < max_iter:
        it += 1
        improved = False
        for name in parameters:
            for factor in (1 + step, 1 / (1 + step)):
                value = _clamp(name, getattr(best, name) * factor)
                if value == getattr(best, name):
                    continue
                cand = best.with_(**{name: value})
                res = residuals_of(cand)
                loss = loss_of(res)
                if loss < best_loss:
                    best, best_res, best_loss, improved = cand, res, loss, True
                    break
            if best_loss <= tol:
                break
        if not improved:
            step /= 2
    converged = best_loss <= tol or step < min_step
    warning = None
    if not converged:
        warning = f"iteration cap {max_iter} reached with loss {best_loss:.3g}"
    if duration is not None:
        best = best.with_(duration=(params or SimParams()).duration)
    return CalibrationResult(best, best_res, best_loss, it, converged, warning)
