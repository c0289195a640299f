"""Compiled vs pure-Python RK4 kernel on one reference-protocol trace.

Usage: python benchmarks/bench_kernels.py [--steps N] [--repeat R]
"""

import argparse
import time

import numpy as np

from latentfno import _kernels_py, kernels
from latentfno.oracle import OracleConfig, PointNeuronParams, resting_state


def time_backend(mod, p, cur, dt, y0, repeat):
    out = np.empty(len(cur))
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        mod.integrate(p, cur, dt, y0, out)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=25750)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    cfg = OracleConfig()
    params = PointNeuronParams()
    cur = np.zeros(args.steps)
    on = int(cfg.onset / cfg.dt)
    cur[on:on + int(cfg.duration / cfg.dt)] = params.current_density(0.1)
    p, y0 = params.vector(), np.array(resting_state(params))
    rows = [("python", _kernels_py)]
    try:
        rows.insert(0, ("compiled", kernels.load_backend("compiled")))
    except ImportError:
        print("compiled extension not built; timing the pure-Python kernel only")
    results = {name: time_backend(mod, p, cur, cfg.dt, y0, args.repeat) for name, mod in rows}
    print(f"steps {args.steps} (dt {cfg.dt} ms), best of {args.repeat}")
    for name, (sec, _) in results.items():
        print(f"{name:9s} {sec * 1e3:10.2f} ms  {args.steps / sec:12.0f} steps/s")
    if len(results) == 2:
        (tc, vc), (tp, vp) = results["compiled"], results["python"]
        print(f"speedup {tp / tc:.1f}x, max |dV| {np.max(np.abs(vc - vp)):.2e} mV")


if __name__ == "__main__":
    main()
