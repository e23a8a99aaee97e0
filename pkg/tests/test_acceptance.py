"""Acceptance criteria 1-10, each printing one PASS/FAIL line.

Oracles are computed independently of the code under test where one exists
(brute-force enumeration, hand-derived radical inverses, variance of the
target); the measured values are printed so the margins are visible.
"""
import copy
import csv
import json
import shutil
import time

import numpy as np
import yaml

from contune.archive import load_manifest, replay
from contune.cli import main as cli_main
from contune.plantnet_sim import PoolConfig, SimParams, calibrate, simulate
from contune.problem import ObjectiveSpec, ProblemSpec
from contune.runner import StubExecutor, load_run_document, max_concurrency, run_cycle, scenario_path
from contune.sampling import halton, latin_hypercube, random_candidates
from contune.search import BayesianOptimizer
from contune.surrogate import ExtraTreesSurrogate

from conftest import calibrated_params, pool_space

RESULTS = {}
BASELINE = (40, 40, 7, 40)
OAT_BASE = dict(http=54, download=54, simsearch=53)
TARGETS = [(PoolConfig(*BASELINE), 80, 2.657), (PoolConfig(*BASELINE), 120, 3.86)]


def verdict(n, title, ok, detail):
    line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    RESULTS[n] = line
    print(line)
    assert ok, line


def full_rt(cfg, clients, params, repeats=7):
    runs = [simulate(PoolConfig(*cfg), params.with_(clients=clients, seed=s))
            for s in range(repeats)]
    return float(np.mean([r.response_time_mean for r in runs]))


def test_c1_calibration_fidelity():
    t0 = time.perf_counter()
    fit = calibrate(TARGETS, SimParams(), duration=300.0)
    errors = [(simulate(pools, fit.params.with_(clients=c)).response_time_mean - rt) / rt
              for pools, c, rt in TARGETS]
    elapsed = time.perf_counter() - t0
    committed = calibrated_params()
    same = fit.params.with_(clients=committed.clients) == committed
    ok = all(abs(e) <= 0.15 for e in errors) and elapsed < 120 and same
    verdict(1, "calibrated simulator reproduces 2.657 s @80 and 3.86 s @120 within 15%", ok,
            f"errors {100 * errors[0]:+.1f}% / {100 * errors[1]:+.1f}%, "
            f"matches committed file: {same}, {elapsed:.0f} s")


def test_c2_optimization_improvement(tmp_path):
    t0 = time.perf_counter()
    doc = load_run_document(scenario_path("plantnet"))
    params = doc.executor.sim_params()
    base = full_rt(BASELINE, 80, params)
    gains, wider_http, rows = [], 0, []
    for seed in range(5):
        m = run_cycle(doc, tmp_path / f"seed{seed}", repeats=1, duration=300, seed=seed,
                      reference=False)
        best = tuple(m["best"]["configuration"].values())
        rt = full_rt(best, 80, params)
        gains.append((rt - base) / base)
        wider_http += best[0] > 40
        rows.append(f"seed {seed}: {best} {100 * gains[-1]:+.1f}%")
    elapsed = time.perf_counter() - t0
    ok = all(g <= -0.05 for g in gains) and wider_http >= 4 and elapsed < 600
    verdict(2, "BO finds <= baseline - 5% for every seed and http > 40 for >= 4 of 5", ok,
            f"baseline {base:.3f} s; {'; '.join(rows)}; http>40 in {wider_http}/5; "
            f"{elapsed:.0f} s")


def test_c3_oat_trends(params):
    t0 = time.perf_counter()
    quiet = params.with_(jitter_cv=0.0, clients=80)
    exact = {k: simulate(PoolConfig(extract=k, **OAT_BASE), quiet) for k in range(5, 10)}
    noisy = {}
    for k in range(5, 10):
        runs = [simulate(PoolConfig(extract=k, **OAT_BASE), params.with_(clients=80, seed=s))
                for s in range(7)]
        noisy[k] = (np.mean([r.task_times["wait_extract"] for r in runs]),
                    np.mean([r.task_times["simsearch"] for r in runs]))

    def trends(wait, ss):
        down = all(wait[k + 1] <= wait[k] for k in range(5, 9))
        return down and ss[8] > ss[7] and ss[9] > ss[7]

    ok_exact = trends({k: r.task_times["wait_extract"] for k, r in exact.items()},
                      {k: r.task_times["simsearch"] for k, r in exact.items()})
    ok_noisy = trends({k: v[0] for k, v in noisy.items()}, {k: v[1] for k, v in noisy.items()})
    waits = ", ".join(f"{exact[k].task_times['wait_extract']:.3g}" for k in range(5, 10))
    verdict(3, "wait-extract non-increasing over extract 5..9; simsearch at 8, 9 > at 7",
            ok_exact and ok_noisy,
            f"jitter 0: {ok_exact}, 7-repeat means: {ok_noisy}; wait {waits}; simsearch "
            f"{exact[7].task_times['simsearch']:.4f} -> {exact[8].task_times['simsearch']:.4f}, "
            f"{exact[9].task_times['simsearch']:.4f}; {time.perf_counter() - t0:.0f} s")


def test_c4_sampling_properties():
    rng = np.random.default_rng(20240404)
    failures = 0
    for _ in range(200):
        n, d = int(rng.integers(1, 1001)), int(rng.integers(1, 21))
        strata = np.floor(latin_hypercube(n, d, int(rng.integers(2**63))) * n).astype(int)
        failures += any(not np.array_equal(np.sort(strata[:, j]), np.arange(n)) for j in range(d))
    # radical inverse in base 2, digit by digit: 1=0.1b, 2=0.01b, 3=0.11b, ...
    oracle = [1 / 2, 1 / 4, 3 / 4, 1 / 8, 5 / 8, 3 / 8, 7 / 8, 1 / 16]
    got = halton(8, 1)[:, 0].tolist()
    verdict(4, "LHS stratification over 200 random cases; Halton 1-D first 8 exact",
            failures == 0 and got == oracle, f"{failures} stratification failures, halton {got}")


def test_c5_surrogate_properties():
    rng = np.random.default_rng(5)
    X = rng.random((12, 3))
    model = ExtraTreesSurrogate(n_trees=25).fit(X, np.full(12, 2.5))
    mean, std = model.predict(rng.random((100, 3)), return_std=True)
    constant = bool(np.all(mean == 2.5) and np.all(std == 0))
    violations = 0
    for i in range(1000):
        n, d = int(rng.integers(2, 20)), int(rng.integers(1, 6))
        Xi, yi = rng.normal(size=(n, d)), rng.normal(size=n) * 10 ** rng.uniform(-3, 3)
        m = ExtraTreesSurrogate(n_trees=int(rng.integers(1, 10)), random_state=i).fit(Xi, yi)
        pred = m.predict(rng.normal(size=(25, d)) * 4)
        violations += int(np.any(pred < yi.min()) or np.any(pred > yi.max()))
    beats = 0
    for seed in range(20):
        Xs = np.random.default_rng(seed).random((50, 2))
        ys = Xs.sum(axis=1)
        fit = ExtraTreesSurrogate(n_trees=50, random_state=seed).fit(Xs, ys)
        beats += np.mean((fit.predict(Xs) - ys) ** 2) < np.var(ys)
    verdict(5, "constant target, interpolation bound, y = x1 + x2 MSE below variance",
            constant and violations == 0 and beats == 20,
            f"constant {constant}, {violations}/1000 bound violations, {beats}/20 seeds beat the mean")


def test_c6_optimizer_vs_oracle():
    t0 = time.perf_counter()
    space = pool_space()
    center = np.array([45, 33, 6, 52])
    grids = np.meshgrid(*[np.arange(v.lower, v.upper + 1) for v in space.variables], indexing="ij")
    values = np.sort(sum((g - c) ** 2 for g, c in zip(grids, center)).ravel())
    top = values[int(np.ceil(0.01 * len(values))) - 1]
    assert (len(values), values[0], top) == (41 * 41 * 7 * 41, 0, 34)

    def f(p):
        return float(np.sum((np.asarray(p) - center) ** 2))

    problem = ProblemSpec(space, ObjectiveSpec("f"))
    bo, rs = [], []
    for seed in range(11):
        opt = BayesianOptimizer(problem, budget=30, patience=30, random_state=seed)
        while (p := opt.ask()) is not None:
            opt.tell(p, f(p))
        assert len(opt.dataset_) == 30
        bo.append(opt.best[1])
        rs.append(min(f(p) for p in random_candidates(space, 30, seed)))
    med_bo, med_rs = float(np.median(bo)), float(np.median(rs))
    elapsed = time.perf_counter() - t0
    verdict(6, "BO median best after 30 evaluations in oracle top 1% and <= random search",
            med_bo <= top and med_bo <= med_rs and elapsed < 180,
            f"top-1% threshold {top:g}, BO median {med_bo:g}, random median {med_rs:g}, {elapsed:.0f} s")


STUB_DOC = {
    "variables": [{"name": n, "kind": "integer", "lower": lo, "upper": hi}
                  for n, lo, hi in (("http", 20, 60), ("download", 20, 60), ("extract", 3, 9),
                                    ("simsearch", 20, 60))],
    "objective": {"metric": "objective", "direction": "minimize"},
    "search": {"budget": 16, "patience": 100, "seed": 0},
}


def test_c7_asynchrony(tmp_path):
    tau = 0.2
    f = StubExecutor(lambda c: sum((v - 40) ** 2 for v in c.values()), delay=tau)
    t0 = time.perf_counter()
    manifest = run_cycle(load_run_document(STUB_DOC), tmp_path / "run", executor=f, parallelism=4)
    wall = time.perf_counter() - t0
    timing = json.loads((tmp_path / "run" / "timing.json").read_text())
    peak = max_concurrency([(t["start"], t["end"]) for t in timing["trials"]])
    bound = 1.5 * (16 / 4) * tau
    verdict(7, "16 stub trials of 0.2 s on 4 slots within 1.5 x ideal, never > 4 running",
            wall <= bound and peak <= 4 and manifest["counts"]["told"] == 16,
            f"wall {wall:.3f} s vs bound {bound:.1f} s, peak concurrency {peak}")


def test_c8_determinism_and_replay(tmp_path):
    tree = yaml.safe_load(scenario_path("plantnet").read_text())
    tree["search"]["budget"] = 12
    tree["executor"].update(repeats=2, duration=120, params={"jitter_cv": 0.0})
    tree["executor"]["calibration"] = str(scenario_path("plantnet").parent / tree["executor"]["calibration"])
    digests = []
    for name in ("a", "b"):
        run_cycle(load_run_document(copy.deepcopy(tree)), tmp_path / name, parallelism=1)
        digests.append((tmp_path / name / "manifest.sha256").read_text())
    identical = (tmp_path / "a" / "manifest").read_bytes() == (tmp_path / "b" / "manifest").read_bytes()
    clean = replay(tmp_path / "a")
    shutil.copytree(tmp_path / "a", tmp_path / "t")
    path = tmp_path / "t" / "trials" / "7" / "metrics"
    path.write_text(path.read_text().replace("wait_extract_time=", "wait_extract_time=9", 1))
    tampered = replay(tmp_path / "t")
    named = [(d.trial, d.metric) for d in tampered.drifts] == [(7, "wait_extract_time")]
    verdict(8, "same seed gives byte-identical manifests; replay zero drift; tamper named",
            identical and digests[0] == digests[1] and clean.ok and not clean.drifts
            and not tampered.ok and named,
            f"identical {identical}, clean drifts {len(clean.drifts)}, "
            f"tampered report {[str(d) for d in tampered.drifts]}")


def test_c9_little_law(params):
    quiet = params.with_(jitter_cv=0.0)
    rows, ok = [], True
    for clients in (80, 120, 140):
        r = simulate(PoolConfig(*BASELINE), quiet.with_(clients=clients))
        n = r.throughput * r.response_time_mean
        ok &= abs(n - clients) / clients <= 0.02
        rows.append(f"{clients}: {n:.3f}")
    verdict(9, "clients = throughput x mean response time within 2% at jitter 0", ok,
            ", ".join(rows))


def test_c10_workload_sweep(tmp_path, capsys):
    t0 = time.perf_counter()
    runs = []
    for clients in (80, 120, 140):
        root = tmp_path / f"w{clients}"
        code = cli_main(["optimize", "scenario", "plantnet", "--clients", str(clients),
                         "--repeat", "1", "--duration", "300", "--seed", "0", "--out", str(root)])
        assert code == 0
        runs.append(next(p for p in root.iterdir() if p.is_dir()))
    assert cli_main(["report", *map(str, runs), "--out", str(tmp_path / "report")]) == 0
    capsys.readouterr()
    summary = list(csv.DictReader((tmp_path / "report" / "summary.csv").open()))
    per_run = [(int(r["clients"]), float(r["best"]), float(r["baseline"])) for r in summary]
    swept = all(best <= base for _, best, base in per_run)
    # the optimum found at 80 clients, re-measured at every workload with 7 repeats
    params = calibrated_params()
    found = tuple(load_manifest(runs[0])["best"]["configuration"].values())
    cross = [(c, full_rt(found, c, params), full_rt(BASELINE, c, params)) for c in (80, 120, 140)]
    carried = all(v <= b for _, v, b in cross)
    elapsed = time.perf_counter() - t0
    verdict(10, "report shows the found optimum <= baseline at 80, 120 and 140 clients",
            swept and carried and elapsed < 600,
            "per-run " + ", ".join(f"{c}: {b:.3f} vs {a:.3f}" for c, b, a in per_run)
            + f"; optimum {found} re-measured " + ", ".join(f"{c}: {v:.3f} vs {b:.3f}" for c, v, b in cross)
            + f"; {elapsed:.0f} s")
