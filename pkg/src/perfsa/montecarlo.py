"""Replicated SFB runs and the statistics that compare them with the Gaussian limit."""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .dynamics import RecordPlan, StepSchedule, run_sfb, schedule_eta
from .errors import (InsufficientCheckpoints, InsufficientSamples, InvalidArgument,
                     NumericalFailure, ReplicaFailure, SingularJacobian)
from .io import write_csv
from .problem import Problem
from .rng import replica_seed

LEVELS = (0.5, 0.9, 0.95)


def default_workers() -> int:
    env = os.environ.get("PERFSA_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass
class ReplicaBatch:
    problem_id: str
    T: int
    R: int
    master_seed: int
    x_star: np.ndarray
    deviations: np.ndarray
    checkpoint_ts: list = field(default_factory=list)
    checkpoint_deviations: Optional[np.ndarray] = None  # (n_ck, R, d): sqrt(t) (xbar_t - x*)
    checkpoint_errors: Optional[np.ndarray] = None  # (n_ck, R, d): x_t - x*

    def to_csv(self, path):
        d = self.deviations.shape[1]
        rows = [[i, *row.tolist()] for i, row in enumerate(self.deviations)]
        return write_csv(path, ["replica"] + [f"dev[{j}]" for j in range(d)], rows)

    def checkpoints_to_csv(self, path):
        d = self.deviations.shape[1]
        header = ["t", "replica"] + [f"dev[{j}]" for j in range(d)] + [f"err[{j}]" for j in range(d)]
        rows = []
        for k, t in enumerate(self.checkpoint_ts):
            for i in range(self.R):
                rows.append([t, i, *self.checkpoint_deviations[k, i].tolist(),
                             *self.checkpoint_errors[k, i].tolist()])
        return write_csv(path, header, rows)


def run_replicas(problem: Problem, x0, schedule: StepSchedule, T: int, R: int, master_seed: int,
                 x_star, checkpoints: Sequence[int] = (), workers: Optional[int] = None,
                 burn_in: int = 0, backend: Optional[str] = None) -> ReplicaBatch:
    """``R`` independent SFB runs; replica ``i`` uses stream ``(master_seed, i)``.

    Rows are stored by replica id, so the worker count never changes the batch.
    """
    if R < 2:
        raise InvalidArgument("need at least two replicas")
    x_star = np.asarray(x_star, dtype=float)
    cks = sorted({int(t) for t in checkpoints if 1 <= int(t) <= T} | {T})
    plan = RecordPlan(checkpoints=cks)

    def one(i):
        seed = replica_seed(master_seed, i)
        try:
            traj = run_sfb(problem, x0, schedule, T, seed=seed, plan=plan, burn_in=burn_in, backend=backend)
        except NumericalFailure as exc:
            raise ReplicaFailure(f"replica {i} failed at step {exc.step}: {exc}", replica=i,
                                 seed=(master_seed, i)) from exc
        return traj

    workers = default_workers() if workers is None else max(1, int(workers))
    if workers == 1:
        trajs = [one(i) for i in range(R)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trajs = list(pool.map(one, range(R)))

    d = x_star.size
    n_ck = len(cks)
    devs = np.empty((n_ck, R, d))
    errs = np.empty((n_ck, R, d))
    for i, traj in enumerate(trajs):
        for k, c in enumerate(traj.checkpoints):
            devs[k, i] = math.sqrt(c.t - burn_in) * (c.xbar - x_star)
            errs[k, i] = c.x - x_star
    return ReplicaBatch(problem.fingerprint(), T, R, int(master_seed), x_star, devs[-1].copy(),
                        cks, devs, errs)


# ---------------------------------------------------------------- normality checks


@dataclass
class NormalityReport:
    empirical_covariance: np.ndarray
    target_covariance: np.ndarray
    relative_operator_error: float
    coverage: dict
    mean_deviation_norm: float
    rows: int

    def passes(self, rel_tol: float, coverage_band=None, level: float = 0.9) -> bool:
        ok = self.relative_operator_error < rel_tol
        if coverage_band is not None:
            lo, hi = coverage_band
            ok = ok and lo <= self.coverage[level] <= hi
        return ok

    def to_dict(self) -> dict:
        return {
            "empirical_covariance": self.empirical_covariance.tolist(),
            "target_covariance": self.target_covariance.tolist(),
            "relative_operator_error": self.relative_operator_error,
            "coverage": {str(k): v for k, v in self.coverage.items()},
            "mean_deviation_norm": self.mean_deviation_norm,
            "rows": self.rows,
        }


def _rows(batch_or_rows) -> np.ndarray:
    if isinstance(batch_or_rows, ReplicaBatch):
        return batch_or_rows.deviations
    return np.atleast_2d(np.asarray(batch_or_rows, dtype=float))


def _target(target) -> np.ndarray:
    if hasattr(target, "asymptotic_covariance"):
        return np.asarray(target.asymptotic_covariance, dtype=float)
    return np.asarray(target, dtype=float)


def empirical_covariance(rows) -> np.ndarray:
    return np.atleast_2d(np.cov(np.asarray(rows, dtype=float), rowvar=False, ddof=1))


def normality_check(batch, target, levels=LEVELS) -> NormalityReport:
    """Compare deviation rows with ``N(0, C)``.

    Relative operator error ``||C_hat - C|| / ||C||`` uses the sample covariance; coverage
    at level ``p`` is the fraction of rows with ``v^T C^-1 v <= chi2_p(d)``.
    """
    rows = _rows(batch)
    C = _target(target)
    R, d = rows.shape
    if R < d + 1:
        raise InsufficientSamples(f"need at least d+1 = {d + 1} rows, got {R}")
    try:
        chol = np.linalg.cholesky(C)
    except np.linalg.LinAlgError as exc:
        raise SingularJacobian("target covariance is singular") from exc
    emp = empirical_covariance(rows)
    rel = float(np.linalg.norm(emp - C, 2) / np.linalg.norm(C, 2))
    white = np.linalg.solve(chol, rows.T)
    q = np.sum(white ** 2, axis=0)
    coverage = {float(p): float(np.mean(q <= stats.chi2.ppf(p, d))) for p in levels}
    return NormalityReport(emp, C, rel, coverage, float(np.linalg.norm(rows.mean(axis=0))), R)


def pilot_tolerance(target, R: int, n_pilot: int = 200, seed: int = 0, quantile: float = 0.95,
                    factor: float = 2.0) -> float:
    """Known-truth pilot: ``factor`` times the ``quantile`` of the relative error at size ``R``.

    Rows are drawn directly from ``N(0, C)``, which isolates estimator noise from any
    bias of the method under test.
    """
    C = _target(target)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    chol = np.linalg.cholesky(C)
    errs = []
    for _ in range(n_pilot):
        rows = rng.standard_normal((R, C.shape[0])) @ chol.T
        emp = empirical_covariance(rows)
        errs.append(np.linalg.norm(emp - C, 2) / np.linalg.norm(C, 2))
    return float(factor * np.quantile(errs, quantile))


# ----------------------------------------------------------------------- rate fits


@dataclass
class RateFit:
    slope: float
    intercept: float
    constant: float
    ts: list
    etas: np.ndarray
    mse: np.ndarray

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "constant": self.constant,
                "ts": list(self.ts), "etas": self.etas.tolist(), "mse": self.mse.tolist()}


def rate_fit(batch: ReplicaBatch, schedule: StepSchedule, min_replicas: int = 30) -> RateFit:
    """Least-squares slope of ``log mean ||x_t - x*||^2`` against ``log eta_t``.

    A slope near one matches ``E||x_t - x*||^2 <= C eta_t``.  ``constant`` is
    ``exp(intercept)``.  Checkpoints with zero error make the slope infinite.
    """
    ts = list(batch.checkpoint_ts)
    if len(ts) < 3:
        raise InsufficientCheckpoints("need at least three checkpoints")
    if batch.R < min_replicas:
        raise InsufficientSamples(f"need at least {min_replicas} replicas per checkpoint")
    mse = np.mean(np.sum(batch.checkpoint_errors ** 2, axis=2), axis=1)
    etas = np.array([schedule_eta(schedule, t) for t in ts])
    if np.any(mse == 0):
        return RateFit(math.inf, -math.inf, 0.0, ts, etas, mse)
    slope, intercept = np.polyfit(np.log(etas), np.log(mse), 1)
    return RateFit(float(slope), float(intercept), float(math.exp(intercept)), ts, etas, mse)


# ---------------------------------------------------------------- density exports


@dataclass
class DensityGrid:
    axes: list
    density: np.ndarray
    bandwidth: np.ndarray

    def to_csv(self, path):
        if len(self.axes) == 1:
            rows = zip(self.axes[0], self.density)
            return write_csv(path, ["x", "density"], rows)
        X, Y = np.meshgrid(self.axes[0], self.axes[1], indexing="ij")
        rows = zip(X.ravel(), Y.ravel(), self.density.ravel())
        return write_csv(path, ["x", "y", "density"], rows)


def _grid_axes(centers, spans, grid_size):
    return [np.linspace(c - s, c + s, grid_size) for c, s in zip(centers, spans)]


def density_grid(batch, dims=(0, 1), bandwidth=None, grid_size: int = 81, extent=None) -> DensityGrid:
    """Gaussian-kernel density of the deviation rows on a regular grid.

    ``dims`` picks a 1-d margin or a pair of coordinates.  The default per-axis
    bandwidth is ``R ** (-1 / (k + 4)) * std`` (``k = len(dims)``; std 0 counts as 1).
    ``extent`` is a half-width per axis around the row mean.
    """
    rows = _rows(batch)
    dims = tuple(dims)
    if len(dims) not in (1, 2):
        raise InvalidArgument("density grids are 1-d or 2-d")
    pts = rows[:, dims]
    R, k = pts.shape
    if R == 0:
        raise InvalidArgument("no rows")
    if bandwidth is None:
        std = pts.std(axis=0, ddof=1) if R > 1 else np.zeros(k)
        std = np.where(std > 0, std, 1.0)
        bw = R ** (-1.0 / (k + 4)) * std
    else:
        bw = np.broadcast_to(np.asarray(bandwidth, dtype=float), (k,)).copy()
        if np.any(bw <= 0):
            raise InvalidArgument("bandwidth must be positive")
    center = pts.mean(axis=0)
    if extent is None:
        spread = pts.std(axis=0) if R > 1 else np.zeros(k)
        span = 4.0 * np.maximum(spread, bw)
    else:
        span = np.broadcast_to(np.asarray(extent, dtype=float), (k,))
    axes = _grid_axes(center, span, grid_size)
    norm = 1.0 / (R * np.prod(bw) * (2 * math.pi) ** (k / 2))
    if k == 1:
        u = (axes[0][:, None] - pts[None, :, 0]) / bw[0]
        dens = norm * np.exp(-0.5 * u ** 2).sum(axis=1)
    else:
        ux = np.exp(-0.5 * ((axes[0][:, None] - pts[None, :, 0]) / bw[0]) ** 2)
        uy = np.exp(-0.5 * ((axes[1][:, None] - pts[None, :, 1]) / bw[1]) ** 2)
        dens = norm * ux @ uy.T
    return DensityGrid(axes, dens, bw)


def gaussian_density_grid(cov, dims=(0, 1), grid_size: int = 81, extent=None) -> DensityGrid:
    """Exact ``N(0, cov)`` density (margin over ``dims``) on the same kind of grid."""
    cov = np.asarray(cov, dtype=float)
    dims = tuple(dims)
    S = cov[np.ix_(dims, dims)]
    sd = np.sqrt(np.diag(S))
    span = 4.0 * sd if extent is None else np.broadcast_to(np.asarray(extent, dtype=float), (len(dims),))
    axes = _grid_axes(np.zeros(len(dims)), span, grid_size)
    if len(dims) == 1:
        dens = stats.norm.pdf(axes[0], scale=sd[0])
    else:
        X, Y = np.meshgrid(axes[0], axes[1], indexing="ij")
        dens = stats.multivariate_normal(mean=np.zeros(2), cov=S).pdf(np.dstack([X, Y]))
    return DensityGrid(axes, dens, np.zeros(len(dims)))


def confidence_ellipse(cov, level: float, n_points: int = 200, center=None) -> np.ndarray:
    """Boundary ``{v : v^T C^-1 v = chi2_level(2)}`` of a 2-d Gaussian confidence region."""
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (2, 2):
        raise InvalidArgument("ellipses are drawn for 2-d covariances")
    r = math.sqrt(stats.chi2.ppf(level, 2))
    th = np.linspace(0.0, 2 * math.pi, n_points)
    circle = np.vstack([np.cos(th), np.sin(th)])
    pts = (r * np.linalg.cholesky(cov) @ circle).T
    return pts if center is None else pts + np.asarray(center, dtype=float)
