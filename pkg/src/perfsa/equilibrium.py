"""Equilibrium points as fixed points of the solution map, and assumption audits.

``Sol(x)`` solves the variational inequality ``0 in G_x(y) + N_X(y)`` for the data
distribution frozen at ``D(x)``.  Under ``gamma * beta < alpha`` it is a contraction
with modulus ``q = gamma * beta / alpha`` and Banach iteration finds its unique fixed
point, the equilibrium.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ContractionViolation, InvalidArgument, NonConvergence, UnsupportedMode
from .problem import (ANALYTIC, Analytic, LinearDecision, LocationScaleGaussian, MonteCarlo,
                      Problem)
from .rng import keyed_seed, make_rng


class FrozenField:
    """``y -> G_x(y)`` at a fixed decision ``x``.

    ``linear = (M, c)`` marks an affine field ``M y + c``, which admits a closed-form
    solve on the whole space.
    """

    def __init__(self, fn: Callable, linear=None):
        self.fn = fn
        self.linear = linear

    def __call__(self, y) -> np.ndarray:
        return self.fn(np.asarray(y, dtype=float))

    @classmethod
    def affine(cls, M, c) -> "FrozenField":
        M = np.asarray(M, dtype=float)
        c = np.asarray(c, dtype=float)
        return cls(lambda y: M @ y + c, linear=(M, c))


def make_field(problem: Problem, mode=ANALYTIC) -> Callable:
    """Factory ``x -> FrozenField`` of the mean field under an expectation mode.

    In Monte-Carlo mode every call re-seeds with ``mode.seed``: fields at different
    decisions share common random numbers.
    """
    dec, dist = problem.decision, problem.distribution
    if isinstance(mode, Analytic):
        if not isinstance(dec, LinearDecision) or not dist.has_mean:
            raise UnsupportedMode("analytic mean field needs an affine decision map and a closed-form mean")

        def analytic(x):
            return FrozenField.affine(dec.M, dec.N @ dist.mean(np.asarray(x, dtype=float)) + dec.b)

        return analytic
    if not isinstance(mode, MonteCarlo):
        raise InvalidArgument(f"unknown expectation mode {mode!r}")
    if mode.n < 1:
        raise InvalidArgument("monte-carlo mode needs at least one sample")

    def sampled(x):
        Z = dist.sample_many(np.asarray(x, dtype=float), int(mode.n), make_rng(mode.seed))
        if isinstance(dec, LinearDecision):
            return FrozenField.affine(dec.M, dec.N @ Z.mean(axis=0) + dec.b)
        return FrozenField(lambda y: dec.evaluate_many(y, Z).mean(axis=0))

    return sampled


def natural_residual(problem: Problem, F: FrozenField, y) -> float:
    """``||y - proj(y - F(y))||``; zero exactly at solutions of the frozen VI."""
    y = np.asarray(y, dtype=float)
    return float(np.linalg.norm(y - problem.feasible.project(y - F(y))))


def solve_inner_vi(problem: Problem, x, tol: float = 1e-12, mode=ANALYTIC,
                   field: Optional[Callable] = None, max_iter: int = 100000) -> np.ndarray:
    """Evaluate ``Sol(x)``.

    Affine fields on the whole space are solved directly.  Otherwise the projected
    fixed-point iteration ``y <- proj(y - eta G_x(y))`` with ``eta = alpha / lbar**2``
    runs until successive iterates differ by at most ``tol``.
    """
    x = np.asarray(x, dtype=float)
    F = (field or make_field(problem, mode))(x)
    if F.linear is not None and problem.feasible.kind == "whole-space":
        M, c = F.linear
        try:
            return np.linalg.solve(M, -c)
        except np.linalg.LinAlgError as exc:
            raise NonConvergence("frozen field is singular") from exc
    consts = problem.resolved_constants()
    lbar = consts.lbar
    if lbar is None:
        raise UnsupportedMode("the inner solver needs lbar (Lipschitz constant of the mean field)")
    eta = consts.alpha / lbar ** 2
    y = problem.feasible.project(x)
    gap = math.inf
    for _ in range(max_iter):
        y_new = problem.feasible.project(y - eta * F(y))
        gap = float(np.linalg.norm(y_new - y))
        y = y_new
        if gap <= tol:
            return y
    raise NonConvergence(f"inner solver did not reach tol={tol}", residual=gap)


@dataclass
class EquilibriumReport:
    x_star: np.ndarray
    outer_iterations: int
    inner_tolerance: float
    outer_tolerance: float
    observed_contraction_ratio: float
    residual_norm: float
    contraction_bound: float
    interior: bool
    ratios: list = field(default_factory=list)
    error_bound: float = 0.0
    mode: dict = field(default_factory=dict)
    mc_floor: float = 0.0

    def to_dict(self) -> dict:
        return {
            "x_star": self.x_star.tolist(),
            "outer_iterations": self.outer_iterations,
            "inner_tolerance": self.inner_tolerance,
            "outer_tolerance": self.outer_tolerance,
            "observed_contraction_ratio": self.observed_contraction_ratio,
            "residual_norm": self.residual_norm,
            "contraction_bound": self.contraction_bound,
            "interior": self.interior,
            "ratios": list(self.ratios),
            "error_bound": self.error_bound,
            "mode": dict(self.mode),
            "mc_floor": self.mc_floor,
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "EquilibriumReport":
        rec = dict(rec)
        rec["x_star"] = np.array(rec["x_star"], dtype=float)
        return cls(**rec)


def _mc_floor(problem: Problem, x_star, mode, q_gap: float) -> float:
    """Size of the equilibrium error induced by mean-field sampling noise.

    ``sqrt(E||xi||^2 / n) / (alpha - gamma beta)``: a field error of size ``e`` moves
    the fixed point by at most ``e / (alpha - gamma beta)``.
    """
    if not isinstance(mode, MonteCarlo):
        return 0.0
    Z = problem.distribution.sample_many(x_star, min(int(mode.n), 100000), make_rng(mode.seed))
    Gs = problem.decision.evaluate_many(x_star, Z)
    spread = float(np.mean(np.sum((Gs - Gs.mean(axis=0)) ** 2, axis=1)))
    return math.sqrt(spread / mode.n) / q_gap


def find_equilibrium(problem: Problem, x_init, outer_tol: float = 1e-10, inner_tol: float = 1e-12,
                     mode=ANALYTIC, field: Optional[Callable] = None,
                     max_outer: int = 100000) -> EquilibriumReport:
    """Banach iteration ``x <- Sol(x)`` with an a-posteriori stopping rule.

    Stops once ``||x_{k+1} - x_k|| <= outer_tol (1 - q) / q``, which bounds the distance
    of ``x_{k+1}`` to the fixed point by ``outer_tol``, and the natural residual is at
    most ``outer_tol``.  Five consecutive observed ratios at or above one raise
    :class:`ContractionViolation`.
    """
    consts = problem.resolved_constants()
    q = consts.contraction
    if not q < 1:
        raise InvalidArgument(f"contraction modulus gamma*beta/alpha = {q} is not below one")
    make = field or make_field(problem, mode)
    x = problem.feasible.project(np.asarray(x_init, dtype=float))
    ratios = []
    resolved = []
    prev = None
    it = 0
    threshold = math.inf if q == 0 else outer_tol * (1.0 - q) / q
    step = math.inf
    while True:
        it += 1
        if it > max_outer:
            raise NonConvergence(f"no equilibrium within {max_outer} outer iterations", residual=step)
        y = solve_inner_vi(problem, x, inner_tol, mode, field=make)
        step = float(np.linalg.norm(y - x))
        if prev is not None and prev > 0:
            r = step / prev
            ratios.append(r)
            # ratios of steps near rounding level carry no information
            if prev > 1e3 * np.finfo(float).eps * (1.0 + float(np.linalg.norm(x))):
                resolved.append(r)
            tail = ratios[-5:]
            if len(tail) == 5 and min(tail) >= 1.0:
                raise ContractionViolation("observed fixed-point ratio >= 1 over 5 consecutive steps", ratios)
        x, prev = y, step
        if step == 0.0 or step <= threshold:
            res = natural_residual(problem, make(x), x)
            if res <= outer_tol or step == 0.0:
                break
    observed = max(resolved) if resolved else (max(ratios) if ratios else 0.0)
    res = natural_residual(problem, make(x), x)
    bound = 0.0 if q == 0 else q / (1.0 - q) * step
    return EquilibriumReport(
        x_star=x,
        outer_iterations=it,
        inner_tolerance=inner_tol,
        outer_tolerance=outer_tol,
        observed_contraction_ratio=float(observed),
        residual_norm=res,
        contraction_bound=q,
        interior=problem.feasible.is_interior(x, margin=10 * outer_tol),
        ratios=ratios,
        error_bound=bound,
        mode=mode.describe(),
        mc_floor=_mc_floor(problem, x, mode, consts.alpha - consts.gamma * consts.beta),
    )


# -------------------------------------------------------------------------- audits


@dataclass
class AssumptionAudit:
    alpha_estimate: float
    beta_estimate: float
    gamma_estimate: float
    variance_bound_K_estimate: float
    probe_count: int
    gamma_method: str = "analytic"

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _ball_point(rng, center, radius):
    d = center.size
    v = rng.standard_normal(d)
    v /= max(np.linalg.norm(v), 1e-300)
    return center + radius * rng.random() ** (1.0 / d) * v


def audit_assumptions(problem: Problem, x_star, probe_radius: float = 1.0, probes: int = 32,
                      seed: int = 0, n_mc: int = 10000) -> AssumptionAudit:
    """Empirical alpha, beta, gamma and variance constant ``K`` around ``x_star``.

    Probe ``j`` draws from its own stream ``(seed, j)``, so a longer audit extends a
    shorter one: infima never increase and suprema never decrease with more probes.
    Probe 0 sits at ``x_star``.  For non location-scale families the gamma estimate is
    a mean-shift ratio, a lower bound rather than a certificate.
    """
    if probes < 2:
        raise InvalidArgument("need at least two probes")
    x_star = np.asarray(x_star, dtype=float)
    dec, dist = problem.decision, problem.distribution
    analytic = isinstance(dec, LinearDecision) and dist.has_mean
    mc = MonteCarlo(n_mc, seed)
    field = make_field(problem, ANALYTIC if analytic else mc)
    proj = problem.feasible.project

    alpha, beta, gamma, K = math.inf, 0.0, 0.0, 0.0
    gauss = isinstance(dist, LocationScaleGaussian)
    if gauss:
        gamma = dist.gamma
    for j in range(probes):
        rng = make_rng(keyed_seed(seed, (j,)))
        x = x_star.copy() if j == 0 else proj(_ball_point(rng, x_star, probe_radius))
        y = proj(_ball_point(rng, x_star, probe_radius))
        yp = proj(_ball_point(rng, x_star, probe_radius))
        F = field(x)
        dy = y - yp
        if dy @ dy > 0:
            alpha = min(alpha, float((F(y) - F(yp)) @ dy / (dy @ dy)))
        z, zp = dist.sample(x, rng), dist.sample(x, rng)
        dz = z - zp
        if dz @ dz > 0:
            beta = max(beta, float(np.linalg.norm(dec(x, z) - dec(x, zp)) / np.linalg.norm(dz)))
        if not gauss:
            xp = proj(_ball_point(rng, x_star, probe_radius))
            dx = float(np.linalg.norm(x - xp))
            if dx > 0:
                m1 = dist.sample_many(x, n_mc, make_rng(seed)).mean(axis=0)
                m2 = dist.sample_many(xp, n_mc, make_rng(seed)).mean(axis=0)
                gamma = max(gamma, float(np.linalg.norm(m1 - m2)) / dx)
        Z = dist.sample_many(x, n_mc, make_rng(keyed_seed(seed, (j, 1))))
        Gs = dec.evaluate_many(x, Z)
        center = F(x) if analytic else Gs.mean(axis=0)
        xi2 = float(np.mean(np.sum((Gs - center) ** 2, axis=1)))
        K = max(K, xi2 / (1.0 + float(np.sum((x - x_star) ** 2))))
    return AssumptionAudit(alpha, beta, gamma, K, probes,
                           gamma_method="analytic" if gauss else "mean-shift heuristic (lower bound)")
