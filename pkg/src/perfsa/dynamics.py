"""Stochastic forward-backward iteration with iterate averaging.

Step ``t`` samples ``z_t ~ D(x_t)`` and sets ``x_{t+1} = proj(x_t - eta_t G(x_t, z_t))``.
The running average ``xbar_t = (1/t) sum_{i<t} x_i`` is maintained incrementally.
Linear-Gaussian problems run on the stepping core (:mod:`perfsa.kernels`); any other
problem runs the same recursion in Python through :func:`sfb_step`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import InvalidArgument, NumericalFailure
from .io import write_csv
from .problem import LinearDecision, LocationScaleGaussian, Problem
from .rng import make_rng, uniforms_per_draw

CHUNK = 4096


@dataclass(frozen=True)
class StepSchedule:
    """Power-law steps ``eta_t = eta0 * max(t, 1) ** -nu``."""

    eta0: float = 1.0
    nu: float = 0.75
    kind: str = "power-law"

    def __post_init__(self):
        if not self.eta0 > 0:
            raise InvalidArgument("eta0 must be positive")
        if not 0 < self.nu <= 1:
            raise InvalidArgument("nu must lie in (0, 1]")
        if self.kind != "power-law":
            raise InvalidArgument(f"unknown schedule kind {self.kind!r}")

    def eta(self, t: int) -> float:
        return schedule_eta(self, t)


def schedule_eta(schedule: StepSchedule, t: int) -> float:
    # t = 0 uses the t = 1 value; same expression as the stepping core
    tt = t if t > 1 else 1
    return schedule.eta0 * float(tt) ** (-schedule.nu)


@dataclass(frozen=True)
class RecordPlan:
    """Which states to keep.  The horizon is always recorded as the last checkpoint."""

    checkpoints: Sequence[int] = ()
    store_every: int = 0


@dataclass
class Checkpoint:
    t: int
    x: np.ndarray
    xbar: np.ndarray
    eta: float


@dataclass
class Trajectory:
    checkpoints: list
    x: np.ndarray
    xbar: np.ndarray
    t: int
    seed: object
    schedule: StepSchedule
    burn_in: int = 0
    iterates: Optional[np.ndarray] = None
    iterate_stride: int = 0
    clip_segments: list = field(default_factory=list)

    @property
    def clipped_steps(self) -> int:
        return int(sum(c for _, _, c in self.clip_segments))

    def checkpoint(self, t: int) -> Checkpoint:
        for c in self.checkpoints:
            if c.t == t:
                return c
        raise KeyError(t)

    def to_rows(self):
        rows = []
        for c in self.checkpoints:
            rows.append([c.t, *c.x.tolist(), *c.xbar.tolist(), c.eta])
        return rows

    def header(self):
        d = self.x.size
        return ["t"] + [f"x[{i}]" for i in range(d)] + [f"xbar[{i}]" for i in range(d)] + ["eta"]

    def to_csv(self, path):
        return write_csv(path, self.header(), self.to_rows())


@dataclass
class StepResult:
    next_x: np.ndarray
    sample: np.ndarray
    residual: np.ndarray


def sfb_step(problem: Problem, x, eta: float, rng) -> StepResult:
    """One forward-backward step.

    ``residual`` is ``(y - proj(y)) / eta`` for the pre-projection point ``y``; it is zero
    whenever the projection did not move ``y`` (and for ``eta = 0``).
    """
    x = np.asarray(x, dtype=float)
    z = problem.distribution.sample(x, rng)
    G = np.asarray(problem.decision(x, z), dtype=float)
    if not np.all(np.isfinite(G)):
        raise NumericalFailure("non-finite operator value", context={"x": x.tolist(), "z": z.tolist()})
    y = x - eta * G
    nxt = problem.feasible.project(y)
    if eta > 0:
        residual = (y - nxt) / eta
    else:
        residual = np.zeros_like(x)
    return StepResult(nxt, z, residual)


# ------------------------------------------------------------------ kernel plumbing


def supports_core(problem: Problem) -> bool:
    return isinstance(problem.decision, LinearDecision) and isinstance(problem.distribution, LocationScaleGaussian)


class CoreArrays:
    """Contiguous arrays describing a linear-Gaussian problem to the stepping core."""

    def __init__(self, problem: Problem):
        dist, dec = problem.distribution, problem.decision
        c = np.ascontiguousarray
        self.A = c(dist.A, dtype=float)
        self.mu = c(dist.base_mean, dtype=float)
        self.L = c(dist.L, dtype=float)
        self.M = c(dec.M, dtype=float)
        self.N = c(dec.N, dtype=float)
        self.b = c(dec.b, dtype=float)
        self.NL = c(dec.N @ dist.L, dtype=float)
        kind, lo, hi, center, radius = problem.feasible.kernel_params()
        self.proj = (int(kind), c(lo, dtype=float), c(hi, dtype=float), c(center, dtype=float), float(radius))
        self.d = problem.dim
        self.n = dist.dim_data
        self.m = uniforms_per_draw(self.n)


class UniformStream:
    """Hands out uniforms from a generator in blocks, keeping the unconsumed tail."""

    def __init__(self, rng):
        self.rng = rng
        self.buf = np.empty(0)
        self.pos = 0

    def ensure(self, count: int) -> None:
        have = self.buf.size - self.pos
        if have >= count:
            return
        fresh = self.rng.random(count - have)
        self.buf = np.concatenate([self.buf[self.pos:], fresh])
        self.pos = 0


@dataclass
class TiltAccumulators:
    """Running sums filled by the core in likelihood-ratio mode."""

    d: int
    log_lr: float = 0.0
    proposals: float = 0.0
    zsum: np.ndarray = None
    ggsum: np.ndarray = None

    def __post_init__(self):
        if self.zsum is None:
            self.zsum = np.zeros(self.d)
        if self.ggsum is None:
            self.ggsum = np.zeros((self.d, self.d))


def drive_core(problem: Problem, x0, schedule: StepSchedule, T: int, rng, plan: RecordPlan,
               burn_in: int = 0, mode: int = 0, w=None, scale: float = 1.0, hcoef=None,
               logc: float = 0.0, backend: Optional[str] = None):
    """Run ``T`` core steps; returns ``(Trajectory, TiltAccumulators)``."""
    arr = CoreArrays(problem)
    kernel = kernels.get_kernel(backend)
    d = arr.d
    x = np.array(x0, dtype=float)
    xbar = np.zeros(d)
    w = np.zeros(arr.n) if w is None else np.ascontiguousarray(w, dtype=float)
    hcoef = np.array([1.5, 1.0, 0.0, 0.0, 0.0, 0.0]) if hcoef is None else np.ascontiguousarray(hcoef, dtype=float)
    accs = TiltAccumulators(d)
    acc = np.zeros(4)
    stream = UniformStream(rng)

    cks = sorted({int(t) for t in plan.checkpoints if 1 <= int(t) <= T} | {T})
    store = plan.store_every > 0
    iterates = [] if store else None
    empty = np.zeros((0, d))
    checkpoints = []
    segments = []
    t = 0
    per_step = arr.m if mode != 2 else 2 * (arr.m + 1) + 1
    for target in cks:
        seg_start, clips_before = t, acc[1]
        while t < target:
            nsteps = min(CHUNK, target - t)
            stream.ensure(nsteps * per_step)
            xs_out = np.zeros((nsteps, d)) if store else empty
            done, upos, status = kernel(
                x, xbar, t, nsteps, burn_in, stream.buf, stream.pos,
                arr.A, arr.mu, arr.L, arr.M, arr.N, arr.b, arr.NL,
                *arr.proj, schedule.eta0, schedule.nu, mode, w, float(scale), hcoef, float(logc),
                accs.zsum, accs.ggsum, acc, xs_out)
            stream.pos = upos
            if store and done:
                iterates.append(xs_out[:done].copy())
            t += done
            if status == kernels.NEED_UNIFORMS:
                stream.ensure(stream.buf.size - stream.pos + max(per_step, 64) * 64)
                continue
            if status == kernels.NONFINITE:
                raise NumericalFailure(f"non-finite operator value at step {t}", step=t,
                                       context={"x": x.tolist()})
            if status == kernels.DEGENERATE:
                from .errors import DegenerateTilt
                raise DegenerateTilt(f"rejection sampler exhausted its budget at step {t}")
        segments.append((seg_start, target, int(acc[1] - clips_before)))
        checkpoints.append(Checkpoint(target, x.copy(), xbar.copy(), schedule_eta(schedule, target)))
    accs.log_lr = float(acc[0])
    accs.proposals = float(acc[2])
    traj = Trajectory(checkpoints, x.copy(), xbar.copy(), T, None, schedule, burn_in=burn_in,
                      clip_segments=segments)
    if store:
        allx = np.concatenate(iterates) if iterates else np.zeros((0, d))
        traj.iterates = allx[::plan.store_every].copy()
        traj.iterate_stride = plan.store_every
    return traj, accs


def _drive_python(problem: Problem, x0, schedule, T, rng, plan, burn_in):
    d = problem.dim
    x = np.array(x0, dtype=float)
    xbar = np.zeros(d)
    cks = sorted({int(t) for t in plan.checkpoints if 1 <= int(t) <= T} | {T})
    ckset = set(cks)
    store = plan.store_every > 0
    iterates = []
    checkpoints, segments = [], []
    seg_start, clips = 0, 0
    for t in range(T):
        if store and t % plan.store_every == 0:
            iterates.append(x.copy())
        if t >= burn_in:
            xbar += (x - xbar) / (t - burn_in + 1)
        eta = schedule_eta(schedule, t)
        try:
            res = sfb_step(problem, x, eta, rng)
        except NumericalFailure as exc:
            raise NumericalFailure(f"non-finite operator value at step {t}", step=t, context=exc.context) from exc
        if np.any(res.residual != 0):
            clips += 1
        x = res.next_x
        if t + 1 in ckset:
            checkpoints.append(Checkpoint(t + 1, x.copy(), xbar.copy(), schedule_eta(schedule, t + 1)))
            segments.append((seg_start, t + 1, clips))
            seg_start, clips = t + 1, 0
    traj = Trajectory(checkpoints, x.copy(), xbar.copy(), T, None, schedule, burn_in=burn_in,
                      clip_segments=segments)
    if store:
        traj.iterates = np.array(iterates)
        traj.iterate_stride = plan.store_every
    return traj


def run_sfb(problem: Problem, x0, schedule: StepSchedule, T: int, seed=0,
            plan: Optional[RecordPlan] = None, burn_in: int = 0,
            backend: Optional[str] = None) -> Trajectory:
    """Run ``T`` SFB steps from ``x0``.

    Args:
        seed: int, ``numpy.random.SeedSequence`` or ``Generator``.  Identical inputs
            give bit-identical trajectories.
        plan: checkpoints and optional iterate thinning.
        burn_in: average only ``x_i`` with ``i >= burn_in`` (0 averages every iterate).
        backend: force ``"compiled"`` or ``"python"`` for the stepping core.
    """
    if T < 1:
        raise InvalidArgument("horizon T must be at least 1")
    if burn_in < 0 or burn_in >= T:
        raise InvalidArgument("burn_in must lie in [0, T)")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (problem.dim,):
        raise InvalidArgument("x0 has the wrong dimension")
    if not problem.feasible.contains(x0, tol=1e-12):
        raise InvalidArgument("x0 must be feasible")
    plan = plan or RecordPlan()
    rng = make_rng(seed)
    if supports_core(problem):
        traj, _ = drive_core(problem, x0, schedule, T, rng, plan, burn_in=burn_in, backend=backend)
    else:
        traj = _drive_python(problem, x0, schedule, T, rng, plan, burn_in)
    traj.seed = seed if isinstance(seed, (int, np.integer)) else getattr(seed, "entropy", None)
    return traj
