"""Decision-dependent problems: feasible sets, distribution maps, decision maps.

A :class:`Problem` bundles a feasible set, a distribution map ``x -> D(x)`` and a
decision map ``G(x, z)``.  The built-in families are affine in the data and Gaussian
in the noise, which gives closed forms for every expectation the solvers need;
custom families plug in callables and fall back to Monte-Carlo.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InvalidArgument, UnsupportedMode
from .rng import box_muller, make_rng, standard_normals, uniforms_per_draw

SWAP2 = np.array([[0.0, 1.0], [1.0, 0.0]])


def _vec(v, name="vector") -> np.ndarray:
    a = np.array(v, dtype=float).reshape(-1)
    return a


def _mat(m, rows, cols, name) -> np.ndarray:
    a = np.array(m, dtype=float)
    if a.ndim == 0:
        a = np.full((rows, cols), float(a))
    if a.shape != (rows, cols):
        raise InvalidArgument(f"{name} has shape {a.shape}, expected {(rows, cols)}")
    return a


def op_norm(a) -> float:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0:
        return 0.0
    return float(np.linalg.norm(a, 2))


# --------------------------------------------------------------------------- modes


@dataclass(frozen=True)
class Analytic:
    """Closed-form expectations (built-in families only)."""

    def describe(self) -> dict:
        return {"mode": "analytic"}


@dataclass(frozen=True)
class MonteCarlo:
    """Sample-average expectations with ``n`` draws from a stream seeded by ``seed``.

    Re-using the same seed at different decisions gives common random numbers.
    """

    n: int
    seed: int = 0

    def describe(self) -> dict:
        return {"mode": "monte-carlo", "n": int(self.n), "seed": int(self.seed)}


ANALYTIC = Analytic()


# --------------------------------------------------------------------- feasible set


@dataclass(frozen=True, eq=False)
class FeasibleSet:
    """Whole space, a box, or a Euclidean ball, with its nearest-point projection."""

    kind: str
    dimension: int
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    center: Optional[np.ndarray] = None
    radius: float = math.inf

    @classmethod
    def whole_space(cls, dimension: int) -> "FeasibleSet":
        if dimension < 1:
            raise InvalidArgument("dimension must be positive")
        return cls("whole-space", int(dimension))

    @classmethod
    def box(cls, lower, upper) -> "FeasibleSet":
        lo, hi = _vec(lower), _vec(upper)
        if lo.shape != hi.shape or lo.size == 0:
            raise InvalidArgument("box bounds must be nonempty vectors of equal length")
        if np.any(lo > hi):
            raise InvalidArgument("box requires lower <= upper coordinatewise")
        return cls("box", lo.size, lower=lo, upper=hi)

    @classmethod
    def ball(cls, center, radius: float) -> "FeasibleSet":
        c = _vec(center)
        if not radius > 0:
            raise InvalidArgument("ball radius must be positive")
        return cls("euclidean-ball", c.size, center=c, radius=float(radius))

    def project(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.dimension,):
            raise InvalidArgument(f"point has shape {y.shape}, set has dimension {self.dimension}")
        if self.kind == "whole-space":
            return y.copy()
        if self.kind == "box":
            return np.minimum(np.maximum(y, self.lower), self.upper)
        diff = y - self.center
        nrm = math.sqrt(float(diff @ diff))
        if nrm <= self.radius:
            return y.copy()
        return self.center + diff * (self.radius / nrm)

    def contains(self, y, tol: float = 0.0) -> bool:
        y = np.asarray(y, dtype=float)
        if self.kind == "whole-space":
            return True
        if self.kind == "box":
            return bool(np.all(y >= self.lower - tol) and np.all(y <= self.upper + tol))
        return float(np.linalg.norm(y - self.center)) <= self.radius + tol

    def is_interior(self, y, margin: float = 0.0) -> bool:
        """True when the ``margin``-ball around ``y`` lies inside the set."""
        y = np.asarray(y, dtype=float)
        if self.kind == "whole-space":
            return True
        if self.kind == "box":
            return bool(np.all(y - margin > self.lower) and np.all(y + margin < self.upper))
        return float(np.linalg.norm(y - self.center)) + margin < self.radius

    def kernel_params(self):
        """(kind code, lower, upper, center, radius) as consumed by the compiled core."""
        d = self.dimension
        if self.kind == "whole-space":
            return 0, np.zeros(d), np.zeros(d), np.zeros(d), 0.0
        if self.kind == "box":
            return 1, self.lower, self.upper, np.zeros(d), 0.0
        return 2, np.zeros(d), np.zeros(d), self.center, self.radius

    def describe(self) -> dict:
        out = {"kind": self.kind, "dimension": self.dimension}
        if self.kind == "box":
            out.update(lower=self.lower.tolist(), upper=self.upper.tolist())
        elif self.kind == "euclidean-ball":
            out.update(center=self.center.tolist(), radius=self.radius)
        return out


def project(feasible: FeasibleSet, y) -> np.ndarray:
    return feasible.project(y)


# ---------------------------------------------------------------- distribution maps


def psd_factor(cov: np.ndarray) -> np.ndarray:
    """Factor ``L`` with ``L L^T = cov``: Cholesky, or a symmetric square root when singular."""
    cov = np.asarray(cov, dtype=float)
    if not np.allclose(cov, cov.T, atol=1e-12):
        raise InvalidArgument("covariance must be symmetric")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        if vals.min() < -1e-10 * max(1.0, abs(vals).max()):
            raise InvalidArgument("covariance must be positive semidefinite") from None
        return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


class LocationScaleGaussian:
    """``z = A x + base_mean + eps`` with ``eps ~ N(0, base_cov)``.

    One draw consumes ``2 * ceil(n / 2)`` uniforms (see :mod:`perfsa.rng`).  The
    Wasserstein-1 Lipschitz constant of ``x -> D(x)`` is ``||A||_op``.
    """

    kind = "location-scale-gaussian"
    has_mean = True

    def __init__(self, A, base_mean=None, base_cov=None):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        n, d = A.shape
        self.A = A
        self.base_mean = np.zeros(n) if base_mean is None else _vec(base_mean)
        self.base_cov = np.eye(n) if base_cov is None else _mat(base_cov, n, n, "base_cov")
        if self.base_mean.shape != (n,):
            raise InvalidArgument("base_mean length must match the rows of A")
        self.L = psd_factor(self.base_cov)
        self.dim_data = n
        self.dim_decision = d

    @property
    def gamma(self) -> float:
        return op_norm(self.A)

    def mean(self, x) -> np.ndarray:
        return self.A @ np.asarray(x, dtype=float) + self.base_mean

    def sample(self, x, rng) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim_decision,):
            raise InvalidArgument("decision has the wrong dimension")
        n, d = self.dim_data, self.dim_decision
        eps = box_muller(rng.random(uniforms_per_draw(n)), n)
        A, mu, L = self.A, self.base_mean, self.L
        z = np.empty(n)
        # same accumulation order as the compiled core
        for i in range(n):
            acc = 0.0
            for j in range(d):
                acc += A[i, j] * x[j]
            acc += mu[i]
            for j in range(n):
                acc += L[i, j] * eps[j]
            z[i] = acc
        return z

    def sample_many(self, x, count: int, rng) -> np.ndarray:
        eps = standard_normals(rng, count, self.dim_data)
        return self.mean(x) + eps @ self.L.T

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "A": self.A.tolist(),
            "base_mean": self.base_mean.tolist(),
            "base_cov": self.base_cov.tolist(),
        }


@dataclass(frozen=True, eq=False)
class PlayerBlock:
    """Data block of one player: ``z_i - A_own x_i - A_other x_{-i} ~ N(mean, cov)``."""

    A_own: np.ndarray
    A_other: np.ndarray
    mean: Optional[np.ndarray] = None
    cov: Optional[np.ndarray] = None


class MultiplayerProduct(LocationScaleGaussian):
    """Product of per-player location-scale Gaussian blocks.

    Blocks are independent: the assembled noise factor is block diagonal.  A draw
    consumes the uniforms of one ``sum(n_i)``-dimensional Gaussian draw.
    """

    kind = "multiplayer-product"

    def __init__(self, blocks: Sequence[PlayerBlock]):
        blocks = list(blocks)
        if not blocks:
            raise InvalidArgument("need at least one player block")
        sizes = [np.atleast_2d(b.A_own).shape[1] for b in blocks]
        rows = [np.atleast_2d(b.A_own).shape[0] for b in blocks]
        d, n = sum(sizes), sum(rows)
        A = np.zeros((n, d))
        mean = np.zeros(n)
        cov = np.zeros((n, n))
        r0 = 0
        c_starts = np.cumsum([0] + sizes)
        for i, blk in enumerate(blocks):
            ni, di = rows[i], sizes[i]
            own = _mat(blk.A_own, ni, di, f"A_own[{i}]")
            other = _mat(blk.A_other, ni, d - di, f"A_other[{i}]")
            cols_own = np.arange(c_starts[i], c_starts[i] + di)
            cols_other = np.setdiff1d(np.arange(d), cols_own)
            A[r0:r0 + ni, cols_own] = own
            A[r0:r0 + ni, cols_other] = other
            if blk.mean is not None:
                mean[r0:r0 + ni] = _vec(blk.mean)
            cov[r0:r0 + ni, r0:r0 + ni] = np.eye(ni) if blk.cov is None else _mat(blk.cov, ni, ni, f"cov[{i}]")
            r0 += ni
        super().__init__(A, mean, cov)
        self.blocks = blocks
        self.player_sizes = sizes
        self.block_rows = rows

    def describe(self) -> dict:
        out = super().describe()
        out["player_sizes"] = list(self.player_sizes)
        out["block_rows"] = list(self.block_rows)
        return out


class CustomDistribution:
    """User sampler ``sampler(x, rng) -> z``; optional closed-form ``mean_fn(x)``.

    ``sampler`` must draw only from ``rng`` so that equal seeds replay equal draws.
    """

    kind = "custom"

    def __init__(self, sampler: Callable, dim_decision: int, dim_data: int,
                 mean_fn: Optional[Callable] = None, name: str = "custom"):
        self.sampler = sampler
        self.mean_fn = mean_fn
        self.dim_decision = int(dim_decision)
        self.dim_data = int(dim_data)
        self.name = name

    @property
    def has_mean(self) -> bool:
        return self.mean_fn is not None

    def mean(self, x) -> np.ndarray:
        if self.mean_fn is None:
            raise UnsupportedMode("custom distribution has no closed-form mean")
        return _vec(self.mean_fn(np.asarray(x, dtype=float)))

    def sample(self, x, rng) -> np.ndarray:
        return _vec(self.sampler(np.asarray(x, dtype=float), rng))

    def sample_many(self, x, count: int, rng) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.empty((count, self.dim_data))
        for k in range(count):
            out[k] = self.sampler(x, rng)
        return out

    def describe(self) -> dict:
        return {"kind": self.kind, "name": self.name}


def sample(dist, x, rng) -> np.ndarray:
    return dist.sample(x, rng)


# -------------------------------------------------------------------- decision maps


class LinearDecision:
    """``G(x, z) = M x + N z + b``."""

    kind = "linear"

    def __init__(self, M, N, b=None):
        M = np.atleast_2d(np.asarray(M, dtype=float))
        d = M.shape[0]
        if M.shape != (d, d):
            raise InvalidArgument("M must be square")
        N = np.atleast_2d(np.asarray(N, dtype=float))
        if N.shape[0] != d:
            raise InvalidArgument("N must have as many rows as M")
        self.M, self.N = M, N
        self.b = np.zeros(d) if b is None else _vec(b)
        self.dim_decision = d
        self.dim_data = N.shape[1]

    def __call__(self, x, z) -> np.ndarray:
        return self.M @ np.asarray(x, dtype=float) + self.N @ np.asarray(z, dtype=float) + self.b

    def evaluate_many(self, x, Z) -> np.ndarray:
        return (self.M @ np.asarray(x, dtype=float) + self.b) + np.asarray(Z) @ self.N.T

    @property
    def alpha(self) -> float:
        return float(np.linalg.eigvalsh(0.5 * (self.M + self.M.T)).min())

    @property
    def beta(self) -> float:
        return op_norm(self.N)

    @property
    def lbar(self) -> float:
        return op_norm(self.M)

    def describe(self) -> dict:
        return {"kind": self.kind, "M": self.M.tolist(), "N": self.N.tolist(), "b": self.b.tolist()}


class QuadraticTracking(LinearDecision):
    """Gradient of ``0.5 ||x - z||^2``: ``G(x, z) = x - z``."""

    kind = "quadratic-tracking"

    def __init__(self, dim: int):
        super().__init__(np.eye(dim), -np.eye(dim))

    def describe(self) -> dict:
        return {"kind": self.kind, "dim": self.dim_decision}


@dataclass(frozen=True, eq=False)
class PlayerLoss:
    """``l_i(x, z_i) = 0.5 x_i'P x_i + x_i'Q x_{-i} - x_i'B z_i`` (P symmetric)."""

    P: np.ndarray
    Q: np.ndarray
    B: np.ndarray


class MultiplayerQuadratic(LinearDecision):
    """Stacked player gradients ``(grad_i l_i)`` of quadratic losses."""

    kind = "multiplayer-quadratic"

    def __init__(self, losses: Sequence[PlayerLoss]):
        losses = list(losses)
        sizes = [np.atleast_2d(l.P).shape[0] for l in losses]
        rows = [np.atleast_2d(l.B).shape[1] for l in losses]
        d, n = sum(sizes), sum(rows)
        M = np.zeros((d, d))
        N = np.zeros((d, n))
        starts = np.cumsum([0] + sizes)
        r0 = 0
        for i, loss in enumerate(losses):
            di = sizes[i]
            own = np.arange(starts[i], starts[i] + di)
            other = np.setdiff1d(np.arange(d), own)
            P = _mat(loss.P, di, di, f"P[{i}]")
            if not np.allclose(P, P.T):
                raise InvalidArgument(f"P[{i}] must be symmetric")
            M[np.ix_(own, own)] = P
            M[np.ix_(own, other)] = _mat(loss.Q, di, d - di, f"Q[{i}]")
            N[own, r0:r0 + rows[i]] = -_mat(loss.B, di, rows[i], f"B[{i}]")
            r0 += rows[i]
        super().__init__(M, N)
        self.losses = losses
        self.player_sizes = sizes

    def describe(self) -> dict:
        out = super().describe()
        out["kind"] = self.kind
        out["player_sizes"] = list(self.player_sizes)
        return out


class CustomDecision:
    kind = "custom"

    def __init__(self, fn: Callable, dim_decision: int, dim_data: int,
                 fn_many: Optional[Callable] = None, name: str = "custom"):
        self.fn = fn
        self.fn_many = fn_many
        self.dim_decision = int(dim_decision)
        self.dim_data = int(dim_data)
        self.name = name

    def __call__(self, x, z) -> np.ndarray:
        return _vec(self.fn(np.asarray(x, dtype=float), np.asarray(z, dtype=float)))

    def evaluate_many(self, x, Z) -> np.ndarray:
        if self.fn_many is not None:
            return np.asarray(self.fn_many(np.asarray(x, dtype=float), np.asarray(Z)), dtype=float)
        return np.array([self(x, z) for z in Z])

    def describe(self) -> dict:
        return {"kind": self.kind, "name": self.name}


# -------------------------------------------------------------------------- problem


@dataclass(frozen=True)
class Constants:
    """Declared regularity constants; ``lbar`` is the Lipschitz constant of ``y -> G_x(y)``."""

    alpha: float
    beta: float
    gamma: float
    lbar: Optional[float] = None

    @property
    def contraction(self) -> float:
        return self.gamma * self.beta / self.alpha


@dataclass(frozen=True, eq=False)
class Problem:
    feasible: FeasibleSet
    distribution: object
    decision: object
    constants: Optional[Constants] = None
    name: str = "problem"

    def __post_init__(self):
        d = self.feasible.dimension
        if self.distribution.dim_decision != d or self.decision.dim_decision != d:
            raise InvalidArgument("decision dimensions of the set, distribution and decision map differ")
        if self.distribution.dim_data != self.decision.dim_data:
            raise InvalidArgument("data dimensions of the distribution and decision map differ")
        c = self.constants
        if c is not None:
            if not c.alpha > 0:
                raise InvalidArgument("alpha must be positive")
            if c.beta < 0 or c.gamma < 0:
                raise InvalidArgument("beta and gamma must be nonnegative")
            if not c.gamma * c.beta < c.alpha:
                raise InvalidArgument(
                    f"compatibility gamma*beta < alpha fails: {c.gamma}*{c.beta} >= {c.alpha}")

    @property
    def dim(self) -> int:
        return self.feasible.dimension

    @property
    def is_linear_gaussian(self) -> bool:
        """Affine decision map over a location-scale Gaussian family (closed forms available)."""
        return isinstance(self.decision, LinearDecision) and isinstance(self.distribution, LocationScaleGaussian)

    def resolved_constants(self) -> Constants:
        """Declared constants, completed from closed forms where the family allows it."""
        c = self.constants
        lin = isinstance(self.decision, LinearDecision)
        gauss = isinstance(self.distribution, LocationScaleGaussian)
        if c is None:
            if not (lin and gauss):
                raise UnsupportedMode("custom families must declare alpha, beta and gamma")
            return Constants(self.decision.alpha, self.decision.beta, self.distribution.gamma, self.decision.lbar)
        if c.lbar is None and lin:
            return Constants(c.alpha, c.beta, c.gamma, self.decision.lbar)
        return c

    def describe(self) -> dict:
        out = {
            "name": self.name,
            "feasible": self.feasible.describe(),
            "distribution": self.distribution.describe(),
            "decision": self.decision.describe(),
        }
        if self.constants is not None:
            out["constants"] = {"alpha": self.constants.alpha, "beta": self.constants.beta,
                                "gamma": self.constants.gamma, "lbar": self.constants.lbar}
        return out

    def fingerprint(self) -> str:
        blob = json.dumps(self.describe(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------- mean fields


def mean_field(problem: Problem, x, y, mode=ANALYTIC) -> np.ndarray:
    """``G_x(y) = E_{z ~ D(x)} G(y, z)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != (problem.dim,) or y.shape != (problem.dim,):
        raise InvalidArgument("x and y must match the problem dimension")
    if isinstance(mode, Analytic):
        dec, dist = problem.decision, problem.distribution
        if not isinstance(dec, LinearDecision) or not dist.has_mean:
            raise UnsupportedMode("analytic mean field needs an affine decision map and a closed-form mean")
        return dec.M @ y + dec.N @ dist.mean(x) + dec.b
    if isinstance(mode, MonteCarlo):
        if mode.n < 1:
            raise InvalidArgument("monte-carlo mode needs at least one sample")
        Z = problem.distribution.sample_many(x, int(mode.n), make_rng(mode.seed))
        return problem.decision.evaluate_many(y, Z).mean(axis=0)
    raise InvalidArgument(f"unknown expectation mode {mode!r}")


def data_mean(problem: Problem, x, mode=ANALYTIC) -> np.ndarray:
    """``E_{z ~ D(x)} z`` under ``mode``."""
    if isinstance(mode, Analytic):
        if not problem.distribution.has_mean:
            raise UnsupportedMode("distribution has no closed-form mean")
        return problem.distribution.mean(x)
    if mode.n < 1:
        raise InvalidArgument("monte-carlo mode needs at least one sample")
    return problem.distribution.sample_many(np.asarray(x, dtype=float), int(mode.n), make_rng(mode.seed)).mean(axis=0)


# ----------------------------------------------------------------- built-in problems


def fig1_problem(rho: float, feasible: Optional[FeasibleSet] = None) -> Problem:
    """``G(x, z) = x - z`` with ``D(x1, x2) = N(rho (x2, x1), I_2)``."""
    rho = float(rho)
    feasible = FeasibleSet.whole_space(2) if feasible is None else feasible
    return Problem(
        feasible,
        LocationScaleGaussian(rho * SWAP2, np.zeros(2), np.eye(2)),
        QuadraticTracking(2),
        Constants(alpha=1.0, beta=1.0, gamma=abs(rho), lbar=1.0),
        name=f"fig1(rho={rho:g})",
    )


def point_mass_problem(dim: int = 2, feasible: Optional[FeasibleSet] = None) -> Problem:
    """Noiseless quadratic tracking of the point mass at the origin."""
    feasible = FeasibleSet.whole_space(dim) if feasible is None else feasible
    return Problem(
        feasible,
        LocationScaleGaussian(np.zeros((dim, dim)), np.zeros(dim), np.zeros((dim, dim))),
        QuadraticTracking(dim),
        Constants(alpha=1.0, beta=1.0, gamma=0.0, lbar=1.0),
        name="point-mass",
    )


def location_scale_problem(A, base_mean=None, base_cov=None, decision=None,
                           feasible: Optional[FeasibleSet] = None,
                           constants: Optional[Constants] = None, name="location-scale") -> Problem:
    dist = LocationScaleGaussian(A, base_mean, base_cov)
    decision = QuadraticTracking(dist.dim_decision) if decision is None else decision
    feasible = FeasibleSet.whole_space(dist.dim_decision) if feasible is None else feasible
    return Problem(feasible, dist, decision, constants, name=name)
