import os
import subprocess
import sys

import numpy as np
import pytest

from perfsa import dynamics, kernels
from perfsa.dynamics import RecordPlan, StepSchedule, drive_core
from perfsa.problem import FeasibleSet, LinearDecision, fig1_problem, location_scale_problem
from perfsa.rng import make_rng
from perfsa.tilt import DEFAULT_SATURATION

needs_compiled = pytest.mark.skipif("compiled" not in kernels.available_backends(),
                                    reason="compiled core not built")
SCHED = StepSchedule(1.0, 0.75)
HC = DEFAULT_SATURATION.coefficients()

PROBLEMS = {
    "fig1": fig1_problem(0.5),
    "box": fig1_problem(0.5, feasible=FeasibleSet.box([-0.2, -0.1], [0.3, 0.4])),
    "ball": fig1_problem(0.25, feasible=FeasibleSet.ball([0.1, 0.0], 0.3)),
    # odd noise dimension exercises the unpaired Box-Muller draw
    "odd": location_scale_problem(np.array([[0.1, 0.0], [0.0, 0.2], [0.3, -0.1]]),
                                  base_cov=np.diag([1.0, 2.0, 0.5]),
                                  decision=LinearDecision(np.eye(2), [[-1.0, 0.0, -0.5], [0.0, -1.0, 0.2]])),
}


def drive(problem, mode, backend, T=3000, seed=7):
    n = problem.distribution.base_cov.shape[0] if hasattr(problem.distribution, "base_cov") else 2
    w = np.linspace(0.3, -0.2, n)
    x0 = problem.feasible.project(np.array([0.2, -0.1]))
    traj, acc = drive_core(problem, x0, SCHED, T, make_rng(seed), RecordPlan((10, 999), store_every=3),
                           mode=mode, w=w, scale=0.9, hcoef=HC, logc=0.01, backend=backend)
    return traj, acc


def same(a, b):
    ta, aa = a
    tb, ab = b
    assert np.array_equal(ta.iterates, tb.iterates)
    assert np.array_equal(ta.x, tb.x) and np.array_equal(ta.xbar, tb.xbar)
    assert [c.t for c in ta.checkpoints] == [c.t for c in tb.checkpoints]
    for ca, cb in zip(ta.checkpoints, tb.checkpoints):
        assert np.array_equal(ca.x, cb.x) and np.array_equal(ca.xbar, cb.xbar)
    assert ta.clip_segments == tb.clip_segments
    assert aa.log_lr == ab.log_lr and aa.proposals == ab.proposals
    assert np.array_equal(aa.zsum, ab.zsum) and np.array_equal(aa.ggsum, ab.ggsum)


@needs_compiled
@pytest.mark.parametrize("name", sorted(PROBLEMS))
@pytest.mark.parametrize("mode", [0, 1, 2])
def test_backends_bit_identical(name, mode):
    p = PROBLEMS[name]
    same(drive(p, mode, "python"), drive(p, mode, "compiled"))


@pytest.mark.parametrize("mode", [0, 1, 2])
def test_chunk_split_invariance(monkeypatch, mode):
    p = PROBLEMS["box"]
    ref = drive(p, mode, None)
    monkeypatch.setattr(dynamics, "CHUNK", 37)
    same(ref, drive(p, mode, None))


def test_saturate_matches_backends():
    ts = np.linspace(-3, 3, 2001)
    ref = np.array([kernels.saturate(t, HC.tolist()) for t in ts])
    assert np.array_equal(ref, DEFAULT_SATURATION(ts))
    assert np.max(np.abs(ref)) <= 1.0


def _backend_in_subprocess(value):
    env = dict(os.environ, PERFSA_BACKEND=value)
    out = subprocess.run([sys.executable, "-c", "import perfsa.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True)
    return out


def test_env_selects_python_backend():
    out = _backend_in_subprocess("python")
    assert out.returncode == 0 and out.stdout.strip() == "python"


def test_env_rejects_unknown_backend():
    out = _backend_in_subprocess("fortran")
    assert out.returncode != 0 and "PERFSA_BACKEND" in out.stderr


@needs_compiled
def test_compiled_is_default():
    env = {k: v for k, v in os.environ.items() if k != "PERFSA_BACKEND"}
    out = subprocess.run([sys.executable, "-c", "import perfsa.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True)
    assert out.stdout.strip() == "compiled"
