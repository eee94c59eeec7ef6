"""Compare the numba and pure-numpy backends on the hot kernels.

Each backend runs in its own interpreter (the backend flag is read at import
time).  Compile time is excluded by one warm-up call per workload.

    python benchmarks/bench_kernels.py [--repeat 3]
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time


def _workloads():
    import numpy as np

    from mfctmdp import OpenLoop, RelaxedControlPath, integrate_limit, policy_evaluation, registry_get, simulate, value_iteration
    from mfctmdp.experiments import equivalence_fixture, paper_machine_policy
    from mfctmdp.models import initial_measure

    mr = registry_get("machine_replacement")
    mr_ctrl = paper_machine_policy(mr)
    sir = registry_get("sir_malware")
    sir_ctrl = RelaxedControlPath.constant(sir.actions.dirac(), sir.horizon)
    fx = equivalence_fixture()

    def sim():
        for s in range(5):
            simulate(mr, 1000, initial_measure(mr), OpenLoop(mr_ctrl), s)

    return {
        "simulate machine_replacement N=1000 x5": sim,
        "policy_evaluation machine_replacement N=40": lambda: policy_evaluation(mr, 40, OpenLoop(mr_ctrl)),
        "value_iteration fixture N=200": lambda: value_iteration(fx, 200),
        "integrate_limit sir_malware 2000 steps": lambda: integrate_limit(sir, initial_measure(sir), sir_ctrl),
    }


def worker(repeat: int) -> dict:
    from mfctmdp import backend_name

    out = {"backend": backend_name(), "timings": {}}
    for name, fn in _workloads().items():
        fn()  # warm-up (compilation, caches)
        best = float("inf")
        for _ in range(repeat):
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
        out["timings"][name] = best
    return out


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.worker:
        print(json.dumps(worker(args.repeat)))
        return
    results = {}
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, MFCTMDP_DISABLE_NUMBA=flag)
        proc = subprocess.run([sys.executable, __file__, "--worker", "--repeat", str(args.repeat)],
                              env=env, capture_output=True, text=True, check=True)
        results[label] = json.loads(proc.stdout.strip().splitlines()[-1])["timings"]
    width = max(len(k) for k in results["numba"])
    print(f"{'workload':<{width}}  {'numba [s]':>10}  {'numpy [s]':>10}  {'speedup':>8}")
    for name in results["numba"]:
        a, b = results["numba"][name], results["numpy"][name]
        print(f"{name:<{width}}  {a:>10.4f}  {b:>10.4f}  {b / a:>7.1f}x")


if __name__ == "__main__":
    main()
