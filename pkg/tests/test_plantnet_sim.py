import numpy as np
import pytest

from contune.plantnet_sim import (
    POOLS,
    TASKS,
    PoolConfig,
    SimParams,
    calibrate,
    simulate,
)

QUIET = dict(jitter_cv=0.0, cpu_cores=10_000)


def test_single_client_no_contention():
    p = SimParams(clients=1, duration=500.0, **QUIET)
    r = simulate(PoolConfig(1, 1, 1, 1), p)
    cycle = sum(p.service_times.values())
    assert r.response_time_mean == pytest.approx(cycle, rel=1e-12)
    for task in ("wait_download", "wait_extract", "wait_simsearch"):
        assert r.task_times[task] == 0.0
    assert r.wait_http == 0.0
    for task in ("pre_process", "download", "extract", "process", "simsearch", "post_process"):
        assert r.task_times[task] == pytest.approx(getattr(p, task), rel=1e-9)
    assert r.busy["http"] == pytest.approx(1.0, abs=1e-9)
    for pool in ("download", "extract", "simsearch"):
        assert r.busy[pool] == pytest.approx(getattr(p, pool) / cycle, rel=5e-3)


def two_client_params(duration):
    return SimParams(clients=2, duration=duration, warmup_fraction=0.0, ramp_up=0.0,
                     sample_interval=duration / 5, pre_process=0.01, download=0.01,
                     extract=1.0, process=0.01, simsearch=0.01, post_process=0.01, **QUIET)


def test_two_clients_first_cycle():
    # A and B reach extract together at 0.02; B waits out A's whole extract.
    # A completes at 1.05, B at 2.05, A again at 3.05.
    r = simulate(PoolConfig(2, 2, 1, 2), two_client_params(2.5))
    assert r.completed == 2
    assert r.task_times["wait_extract"] == pytest.approx(1.0 / 2, rel=1e-12)


def test_two_clients_steady_state():
    # after the first cycle extract is always busy: each cycle lasts 2E, so the
    # wait is 2E minus one's own E and the other tasks O = 0.05
    r = simulate(PoolConfig(2, 2, 1, 2), two_client_params(400.0))
    assert r.task_times["wait_extract"] == pytest.approx(1.0 - 0.05, rel=1e-2)
    assert r.throughput == pytest.approx(1.0, rel=1e-2)


def test_bottleneck_law():
    p = SimParams(clients=20, duration=500.0, extract=1.0, gpu_efficiency=0.9,
                  pre_process=0.01, download=0.01, process=0.01, simsearch=0.01,
                  post_process=0.01, **QUIET)
    r = simulate(PoolConfig(20, 20, 2, 20), p)
    bound = 2 * 0.9 / 1.0
    assert r.throughput <= bound * 1.05
    assert r.throughput == pytest.approx(bound, rel=0.05)


def test_token_conservation():
    trace = []
    pools = PoolConfig(30, 12, 4, 9)
    simulate(pools, SimParams(clients=50, duration=200.0, seed=3), trace=trace)
    assert trace
    sizes = {k: getattr(pools, k) for k in POOLS}
    peak = {}
    for _, pool, holders in trace:
        assert 0 <= holders <= sizes[pool]
        peak[pool] = max(peak.get(pool, 0), holders)
    assert peak["extract"] == 4


def test_deterministic_and_seeded():
    p = SimParams(clients=40, duration=200.0, seed=7)
    a = simulate(PoolConfig(), p).metrics()
    assert a == simulate(PoolConfig(), p).metrics()
    assert a != simulate(PoolConfig(), p.with_(seed=8)).metrics()


def test_report_ranges():
    r = simulate(PoolConfig(30, 30, 5, 30), SimParams(clients=80, duration=300.0))
    for task in TASKS:
        assert r.task_times[task] >= 0
    assert all(0 <= b <= 1 for b in r.busy.values())
    assert 0 <= r.cpu_utilization <= 1
    assert r.response_time_mean >= max(SimParams().service_times.values())
    assert len(r.samples["time"]) == 30


def test_gpu_memory_affine():
    p = SimParams(clients=4, duration=50.0)
    mem = [simulate(PoolConfig(extract=k), p).gpu_mem for k in range(1, 10)]
    assert mem == [p.gpu_mem_base + k * p.gpu_mem_per_thread for k in range(1, 10)]


# the paper's OAT base; at (40,40,k,40) the HTTP pool caps load before the GPU does
OAT = dict(http=54, download=54, simsearch=53)


def test_wait_extract_relief(params):
    p = params.with_(jitter_cv=0.0, duration=300.0, clients=80)
    waits = [simulate(PoolConfig(extract=k, **OAT), p).task_times["wait_extract"]
             for k in range(1, 10)]
    assert all(b <= a for a, b in zip(waits, waits[1:]))


def test_extract_concurrency_slows_simsearch(params):
    p = params.with_(jitter_cv=0.0, duration=300.0, clients=80)
    ss = {k: simulate(PoolConfig(extract=k, **OAT), p).task_times["simsearch"] for k in (7, 9)}
    assert ss[9] > ss[7]


def test_little_law_quick(params):
    p = params.with_(jitter_cv=0.0, duration=300.0, clients=80)
    r = simulate(PoolConfig(), p)
    assert r.throughput * r.response_time_mean == pytest.approx(80, rel=0.02)


def test_timeseries_rows():
    r = simulate(PoolConfig(), SimParams(clients=10, duration=100.0))
    rows = r.timeseries_rows()
    times = sorted({t for t, _, _ in rows})
    assert times == pytest.approx(list(np.arange(10.0, 101.0, 10.0)))
    assert {"response_time", "throughput", "extract_busy"} <= {m for _, m, _ in rows}


def test_params_validation():
    with pytest.raises(ValueError):
        SimParams(extract=0.0)
    with pytest.raises(ValueError):
        SimParams(gpu_efficiency=1.5)
    with pytest.raises(ValueError):
        SimParams(jitter_cv=-0.1)
    with pytest.raises(ValueError):
        SimParams.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        PoolConfig(0, 1, 1, 1)


def test_params_round_trip():
    p = SimParams(clients=7, extract=0.3, cpu_weights={"download": 0.5})
    assert SimParams.from_dict(p.to_dict()) == p


SMALL = SimParams(clients=3, duration=60.0, sample_interval=5.0, jitter_cv=0.0)


def test_calibrate_fixed_point():
    rt = simulate(PoolConfig(), SMALL).response_time_mean
    result = calibrate([(PoolConfig(), 3, rt)], SMALL)
    assert result.residuals == [0.0]
    assert result.loss == 0.0
    assert result.iterations == 0
    assert result.converged and result.warning is None
    assert result.params == SMALL


def test_calibrate_two_targets_moves_toward_fit():
    start = SMALL.with_(simsearch=0.5)
    targets = [(PoolConfig(), 3, 1.6), (PoolConfig(extract=1), 3, 1.7)]
    result = calibrate(targets, start)
    assert result.loss < sum(r * r for r in calibrate(targets, start, max_iter=0).residuals)
    assert len(result.residuals) == 2


def test_calibrate_clamps_positive():
    start = SMALL.with_(pre_process=2e-6)
    result = calibrate([(PoolConfig(), 3, 0.5)], start, parameters=("pre_process",))
    assert result.params.pre_process >= 1e-6
    assert result.residuals[0] > 0


def test_calibrate_iteration_cap_warns():
    result = calibrate([(PoolConfig(), 3, 9.0)], SMALL, max_iter=1)
    assert not result.converged
    assert "iteration cap" in result.warning
    assert result.loss < calibrate([(PoolConfig(), 3, 9.0)], SMALL, max_iter=0).loss


def test_calibrate_rejects_bad_targets():
    with pytest.raises(ValueError):
        calibrate([])
    with pytest.raises(ValueError):
        calibrate([(PoolConfig(), 3, 0.0)], SMALL)
