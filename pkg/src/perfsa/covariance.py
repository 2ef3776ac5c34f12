"""Asymptotic covariance of the averaged iterates.

``sqrt(t) (xbar_t - x*)`` is asymptotically ``N(0, W^-1 Sigma W^-T)`` where
``Sigma = E G(x*, z) G(x*, z)^T`` under ``D(x*)`` and ``W`` is the Jacobian of
``R(x) = E_{z ~ D(x)} G(x, z)`` at ``x*``.  ``W`` splits into a static part (Jacobian
of ``y -> G_{x*}(y)``) and a dynamic part (Jacobian of ``y -> G_y(x*)``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InsufficientSamples, InvalidArgument, SingularJacobian, UnsupportedMode
from .problem import (ANALYTIC, Analytic, LinearDecision, LocationScaleGaussian, MonteCarlo,
                      Problem, mean_field)
from .rng import make_rng

COND_LIMIT = 1e12


def mean_map_R(problem: Problem, x, mode=ANALYTIC) -> np.ndarray:
    """``R(x) = G_x(x)``."""
    return mean_field(problem, x, x, mode)


def psd_floor(S) -> tuple:
    """Symmetrize and clip negative eigenvalues; returns ``(matrix, clipped magnitude)``."""
    S = 0.5 * (np.asarray(S, dtype=float) + np.asarray(S, dtype=float).T)
    vals, vecs = np.linalg.eigh(S)
    neg = float(-vals.min()) if vals.min() < 0 else 0.0
    if neg == 0.0:
        return S, 0.0
    return (vecs * np.clip(vals, 0.0, None)) @ vecs.T, neg


def estimate_sigma(problem: Problem, x_star, mode=ANALYTIC, return_floor: bool = False):
    """Second moment of ``G(x*, z)`` under ``D(x*)``.

    Analytic for affine decision maps over location-scale Gaussians:
    ``N C N^T + r r^T`` with ``C`` the base covariance and ``r = R(x*)`` (zero at an
    interior equilibrium).  Monte-Carlo returns the symmetrized sample second moment.
    """
    x_star = np.asarray(x_star, dtype=float)
    d = problem.dim
    if isinstance(mode, Analytic):
        dec, dist = problem.decision, problem.distribution
        if not (isinstance(dec, LinearDecision) and isinstance(dist, LocationScaleGaussian)):
            raise UnsupportedMode("analytic Sigma needs an affine decision map over a location-scale Gaussian")
        r = dec.M @ x_star + dec.N @ dist.mean(x_star) + dec.b
        S = dec.N @ dist.base_cov @ dec.N.T + np.outer(r, r)
    elif isinstance(mode, MonteCarlo):
        if mode.n < d + 1:
            raise InsufficientSamples(f"need at least d+1 = {d + 1} samples, got {mode.n}")
        Z = problem.distribution.sample_many(x_star, int(mode.n), make_rng(mode.seed))
        Gs = problem.decision.evaluate_many(x_star, Z)
        S = Gs.T @ Gs / Gs.shape[0]
    else:
        raise InvalidArgument(f"unknown expectation mode {mode!r}")
    S, floor = psd_floor(S)
    return (S, floor) if return_floor else S


@dataclass(frozen=True)
class CentralDifference:
    """Central differences with step ``h`` over mean fields evaluated in ``expectation``.

    ``h=None`` uses ``1e-4 * (1 + ||x*||)``.  In Monte-Carlo expectation the same seed
    is used at the +h and -h points (common random numbers).
    """

    h: Optional[float] = None
    expectation: object = ANALYTIC

    def step(self, x_star) -> float:
        return self.h if self.h is not None else 1e-4 * (1.0 + float(np.linalg.norm(x_star)))

    def describe(self, x_star=None) -> dict:
        out = {"mode": "central-difference", "expectation": self.expectation.describe()}
        out["h"] = self.h if x_star is None else self.step(x_star)
        return out


def fd_jacobian(fn, x0, h: float) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    cols = []
    for j in range(x0.size):
        e = np.zeros_like(x0)
        e[j] = h
        cols.append((np.asarray(fn(x0 + e)) - np.asarray(fn(x0 - e))) / (2.0 * h))
    return np.column_stack(cols)


def estimate_w(problem: Problem, x_star, mode=ANALYTIC, check_interior: bool = True):
    """``(w_static, w_dynamic, w)`` at ``x*``.

    Closed form for affine decision maps over location-scale families:
    ``static = M`` and ``dynamic = N A``.
    """
    x_star = np.asarray(x_star, dtype=float)
    if isinstance(mode, Analytic):
        dec, dist = problem.decision, problem.distribution
        if not (isinstance(dec, LinearDecision) and isinstance(dist, LocationScaleGaussian)):
            raise UnsupportedMode("closed-form W needs an affine decision map over a location-scale family")
        static = dec.M.copy()
        dynamic = dec.N @ dist.A
        return static, dynamic, static + dynamic
    if not isinstance(mode, CentralDifference):
        raise InvalidArgument(f"unknown Jacobian mode {mode!r}")
    h = mode.step(x_star)
    if not h > 0:
        raise InvalidArgument("finite-difference step must be positive")
    if check_interior and not problem.feasible.is_interior(x_star, margin=h):
        raise UnsupportedMode("x* is not interior; the asymptotic covariance needs an interior equilibrium")
    ex = mode.expectation
    static = fd_jacobian(lambda y: mean_field(problem, x_star, y, ex), x_star, h)
    dynamic = fd_jacobian(lambda y: mean_field(problem, y, x_star, ex), x_star, h)
    return static, dynamic, static + dynamic


def asymptotic_covariance(sigma, w) -> np.ndarray:
    """``W^-1 Sigma W^-T`` by two linear solves, symmetrized."""
    sigma = np.asarray(sigma, dtype=float)
    w = np.asarray(w, dtype=float)
    if not np.all(np.isfinite(w)) or np.linalg.cond(w) > 1e16:
        raise SingularJacobian("W is singular")
    try:
        left = np.linalg.solve(w, sigma)
        out = np.linalg.solve(w, left.T).T
    except np.linalg.LinAlgError as exc:
        raise SingularJacobian("W is singular") from exc
    return 0.5 * (out + out.T)


def jacobian_positivity_check(w, alpha: float, gamma: float, beta: float, tol: float = 1e-6):
    """Whether ``lambda_min((W + W^T)/2) >= alpha - gamma beta - tol``; returns ``(ok, margin)``."""
    w = np.asarray(w, dtype=float)
    lam = float(np.linalg.eigvalsh(0.5 * (w + w.T)).min())
    margin = lam - (alpha - gamma * beta)
    return margin >= -tol, margin


@dataclass
class CovarianceReport:
    sigma: np.ndarray
    w_static: np.ndarray
    w_dynamic: np.ndarray
    w: np.ndarray
    asymptotic_covariance: np.ndarray
    min_real_eigenpart_of_w: float
    condition_number: float
    near_singular: bool
    sigma_floor: float
    provenance: dict = field(default_factory=dict)

    def recompute(self) -> np.ndarray:
        return asymptotic_covariance(self.sigma, self.w)

    def to_dict(self) -> dict:
        return {
            "sigma": self.sigma.tolist(),
            "w_static": self.w_static.tolist(),
            "w_dynamic": self.w_dynamic.tolist(),
            "w": self.w.tolist(),
            "asymptotic_covariance": self.asymptotic_covariance.tolist(),
            "min_real_eigenpart_of_w": self.min_real_eigenpart_of_w,
            "condition_number": self.condition_number,
            "near_singular": self.near_singular,
            "sigma_floor": self.sigma_floor,
            "provenance": self.provenance,
        }


def covariance_report(problem: Problem, x_star, sigma_mode=ANALYTIC, w_mode=ANALYTIC) -> CovarianceReport:
    """Assemble Sigma, W and the asymptotic covariance with full provenance."""
    sigma, floor = estimate_sigma(problem, x_star, sigma_mode, return_floor=True)
    static, dynamic, w = estimate_w(problem, x_star, w_mode)
    cond = float(np.linalg.cond(w))
    near_singular = not math.isfinite(cond) or cond > COND_LIMIT
    acov = asymptotic_covariance(sigma, w)
    w_prov = w_mode.describe(x_star) if isinstance(w_mode, CentralDifference) else w_mode.describe()
    return CovarianceReport(
        sigma=sigma,
        w_static=static,
        w_dynamic=dynamic,
        w=w,
        asymptotic_covariance=acov,
        min_real_eigenpart_of_w=float(np.linalg.eigvals(w).real.min()),
        condition_number=cond,
        near_singular=near_singular,
        sigma_floor=floor,
        provenance={"sigma": sigma_mode.describe(), "w": w_prov, "x_star": np.asarray(x_star).tolist()},
    )


def fig1_target(rho: float) -> np.ndarray:
    """``W^-1 W^-T`` for ``W = I - rho * swap`` and ``Sigma = I``."""
    w = np.array([[1.0, -rho], [-rho, 1.0]])
    return asymptotic_covariance(np.eye(2), w)
