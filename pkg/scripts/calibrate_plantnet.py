"""Regenerate src/contune/scenarios/plantnet_calibration.json.

Fits the simulator's service times to two measured mean response times of
the baseline pools (40, 40, 7, 40): 2.657 s at 80 clients and 3.86 s at 120.
"""
import json
import sys
from pathlib import Path

from contune.plantnet_sim import PoolConfig, SimParams, calibrate, simulate

TARGETS = [(PoolConfig(40, 40, 7, 40), 80, 2.657), (PoolConfig(40, 40, 7, 40), 120, 3.86)]
FIT_DURATION = 300.0


def main(out=None):
    out = Path(out or Path(__file__).resolve().parents[1] / "src/contune/scenarios/plantnet_calibration.json")
    result = calibrate(TARGETS, SimParams(), duration=FIT_DURATION)
    check = []
    for pools, clients, rt in TARGETS:
        sim = simulate(pools, result.params.with_(clients=clients)).response_time_mean
        check.append({"pools": [pools.http, pools.download, pools.extract, pools.simsearch],
                      "clients": clients, "target": rt, "simulated": sim,
                      "relative_error": (sim - rt) / rt})
    doc = {
        "params": {k: v for k, v in result.params.to_dict().items() if k not in ("clients", "seed")},
        "fit": {"duration": FIT_DURATION, "loss": result.loss, "iterations": result.iterations,
                "converged": result.converged, "warning": result.warning,
                "residuals": result.residuals},
        "check": check,
    }
    out.write_text(json.dumps(doc, indent=2) + "\n")
    print(json.dumps(check, indent=2))


if __name__ == "__main__":
    main(*sys.argv[1:])
