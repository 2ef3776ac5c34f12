"""Time the compiled stepping core against the pure-Python fallback.

Runs the same Figure-1 trajectories on every available backend, checks that the
results are bit-identical and reports steps per second.

Run: ``python benchmarks/bench_kernels.py [--steps N] [--repeat R]``
"""
import argparse
import time

import numpy as np

from perfsa import kernels
from perfsa.dynamics import RecordPlan, StepSchedule, drive_core
from perfsa.problem import FeasibleSet, Problem, fig1_problem
from perfsa.rng import make_rng

CASES = {
    "unconstrained": lambda: fig1_problem(0.5),
    "box": lambda: _boxed(fig1_problem(0.5)),
}


def _boxed(p):
    return Problem(FeasibleSet.box([-0.5, -0.5], [0.5, 0.5]), p.distribution, p.decision, name="fig1-box")


def run(problem, steps, backend, mode=0):
    """Mode 0 is plain stepping; mode 1 also accumulates a likelihood ratio for a small tilt."""
    w = np.array([0.3, 0.0]) if mode else None
    traj, acc = drive_core(problem, [1.0, -1.0], StepSchedule(1.0, 0.75), steps, make_rng(1234),
                           RecordPlan(()), mode=mode, w=w, scale=1.0 / np.sqrt(steps), backend=backend)
    return np.concatenate([traj.x, traj.xbar, acc.zsum, [acc.log_lr]])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)} (default {kernels.BACKEND})")
    for name, make in CASES.items():
        for mode in (0, 1):
            problem = make()
            timing, results = {}, {}
            for b in backends:
                best = np.inf
                for _ in range(args.repeat):
                    t0 = time.perf_counter()
                    results[b] = run(problem, args.steps, b, mode)
                    best = min(best, time.perf_counter() - t0)
                timing[b] = best
            ref = results[backends[0]]
            same = all(np.array_equal(r, ref) for r in results.values())
            line = "  ".join(f"{b}: {args.steps / timing[b]:>12,.0f} steps/s" for b in backends)
            speedup = timing["python"] / timing["compiled"] if "compiled" in timing else float("nan")
            print(f"{name:>13} mode {mode}  {line}  speedup {speedup:6.1f}x  bit-identical: {same}")


if __name__ == "__main__":
    main()
