"""Tilted distribution maps and the local lower-bound diagnostics built on them.

A tilt direction ``u`` and a mean-zero map ``g`` reweight the data law,

    dD^u_x(z) = (1 + h(u^T g_x(z))) / C^u_x  dD_x(z),   C^u_x = 1 + E h(u^T g_x(z)),

where ``h`` is a bounded C^3 saturation equal to the identity on ``[-1/2, 1/2]``.  The
canonical choice is the noise ``g_x(z) = G(x, z) - G_x(x)``.

For linear-Gaussian problems the canonical score is ``u^T g = w^T eps`` with
``w = L^T N^T u`` and ``eps`` the standard normal driving the sampler.  This makes
several quantities exact: ``C = 1`` (odd ``h``, symmetric law), the tilted mean of
``eps`` is ``w_hat kappa(|w|)`` with ``kappa(s) = E[t h(s t)]``, and trajectories can run
on the compiled core.
"""
from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, special, stats

from .covariance import asymptotic_covariance, estimate_sigma, estimate_w, CentralDifference
from .dynamics import RecordPlan, StepSchedule, Trajectory, drive_core, schedule_eta, supports_core
from .equilibrium import FrozenField, find_equilibrium, EquilibriumReport
from .errors import DegenerateTilt, InvalidArgument, UnsupportedMode
from .io import write_csv
from .montecarlo import default_workers
from .problem import (ANALYTIC, Analytic, LinearDecision, MonteCarlo, Problem, mean_field)
from .rng import keyed_seed, make_rng, replica_seed

MAX_PROPOSALS = 1_000_000


# --------------------------------------------------------------------- saturation


def blend_coefficients(knot: float, level: float) -> tuple:
    """Coefficients ``(c4, c5, c6, c7)`` of ``p(s) = 1/2 + s + s^4 (c4 + c5 s + c6 s^2 + c7 s^3)``.

    ``s = |t| - 1/2``; the blend meets the identity with three matching derivatives at
    ``s = 0`` and reaches ``level`` with vanishing first three derivatives at
    ``s = D = knot - 1/2``.  Generated by ``scripts/regen_saturation.py``.
    """
    D = knot - 0.5
    c4 = -5.0 * (8.0 * D - 14.0 * level + 7.0) / (2.0 * D ** 4)
    c5 = 3.0 * (15.0 * D - 28.0 * level + 14.0) / D ** 5
    c6 = -(36.0 * D - 70.0 * level + 35.0) / D ** 6
    c7 = 10.0 * (D - 2.0 * level + 1.0) / D ** 7
    return (c4, c5, c6, c7)


@dataclass(frozen=True)
class SaturationFunction:
    """Odd C^3 function: identity on ``|t| <= 1/2``, degree-7 blend up to ``knot``, ``level`` beyond.

    The default (knot 3/2, level 1) has blend ``1/2 + s + s^4 (-5/2 + 3 s - s^2)``.
    """

    knot: float = 1.5
    level: float = 1.0
    blend: tuple = (-2.5, 3.0, -1.0, 0.0)

    half_width = 0.5

    def __post_init__(self):
        if not self.knot > self.half_width:
            raise InvalidArgument("knot must exceed 1/2")
        if not 0 < self.level <= 1:
            raise InvalidArgument("saturation level must lie in (0, 1]")
        s = np.linspace(0.0, self.knot - 0.5, 2001)
        if np.max(np.abs(self._poly(s))) > 1.0 + 1e-12:
            raise InvalidArgument("blend leaves [-1, 1]; choose a larger knot or lower level")

    @classmethod
    def with_knot(cls, knot: float, level: float = 1.0) -> "SaturationFunction":
        return cls(float(knot), float(level), blend_coefficients(knot, level))

    def coefficients(self) -> np.ndarray:
        """``[knot, level, c4, c5, c6, c7]``, the layout the stepping core expects."""
        return np.array([self.knot, self.level, *self.blend], dtype=float)

    def _poly(self, s, order: int = 0):
        c4, c5, c6, c7 = self.blend
        if order == 0:
            return 0.5 + s + s * s * s * s * (c4 + s * (c5 + s * (c6 + s * c7)))
        if order == 1:
            return 1.0 + s ** 3 * (4 * c4 + s * (5 * c5 + s * (6 * c6 + s * 7 * c7)))
        if order == 2:
            return s ** 2 * (12 * c4 + s * (20 * c5 + s * (30 * c6 + s * 42 * c7)))
        if order == 3:
            return s * (24 * c4 + s * (60 * c5 + s * (120 * c6 + s * 210 * c7)))
        raise InvalidArgument("derivatives up to order 3 only")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        a = np.abs(t)
        v = np.where(a >= self.knot, self.level, np.minimum(self._poly(a - 0.5), self.level))
        v = np.where(a <= 0.5, a, v)
        out = np.where(t > 0, v, -v)
        return float(out) if out.ndim == 0 else out

    def derivative(self, t, order: int = 1, side: Optional[str] = None):
        """``h^(order)(t)``.

        At a knot the pieces agree; ``side='left'`` or ``'right'`` evaluates the piece
        on that side of ``|t|`` exactly at the knot, for continuity checks.
        """
        if order == 0:
            return self(t)
        t = np.asarray(t, dtype=float)
        a = np.abs(t)
        ident = 1.0 if order == 1 else 0.0
        blend = self._poly(a - 0.5, order)
        if side is None:
            v = np.where(a <= 0.5, ident, np.where(a >= self.knot, 0.0, blend))
        else:
            inner = (a < 0.5) | ((a == 0.5) & (side == "left"))
            outer = (a > self.knot) | ((a == self.knot) & (side == "right"))
            v = np.where(inner, ident, np.where(outer, 0.0, blend))
        # h' and h''' are even, h'' is odd
        if order == 2:
            v = np.where(t < 0, -v, v)
        return float(v) if np.ndim(v) == 0 else v

    def describe(self) -> dict:
        return {"linear_half_width": 0.5, "knot": self.knot, "level": self.level, "blend": list(self.blend)}


DEFAULT_SATURATION = SaturationFunction()


# ---------------------------------------------------------------------- tilt spec


@dataclass(frozen=True, eq=False)
class TiltSpec:
    """Tilt direction ``u``, tilt map ``g`` and saturation ``h``.

    ``g`` is ``"canonical-noise"`` or a callable ``g(x, Z) -> (m, d)`` array that is
    mean-zero under ``D(x)`` for every ``x``.
    """

    u: np.ndarray
    g: object = "canonical-noise"
    saturation: SaturationFunction = DEFAULT_SATURATION

    def __post_init__(self):
        object.__setattr__(self, "u", np.atleast_1d(np.asarray(self.u, dtype=float)))
        if not (self.g == "canonical-noise" if isinstance(self.g, str) else callable(self.g)):
            raise InvalidArgument(f"unknown tilt map {self.g!r}")

    @property
    def canonical(self) -> bool:
        return isinstance(self.g, str)

    def with_u(self, u) -> "TiltSpec":
        return replace(self, u=np.asarray(u, dtype=float))

    def describe(self) -> dict:
        return {
            "u": self.u.tolist(),
            "g": "canonical-noise" if self.canonical else getattr(self.g, "__name__", "custom"),
            "saturation": self.saturation.describe(),
        }


def _u(tilt: TiltSpec, u) -> np.ndarray:
    return tilt.u if u is None else np.atleast_1d(np.asarray(u, dtype=float))


def is_exact(problem: Problem, tilt: TiltSpec) -> bool:
    """Canonical tilt over a linear-Gaussian problem (closed forms and compiled core apply)."""
    return tilt.canonical and supports_core(problem)


def canonical_w(problem: Problem, u) -> np.ndarray:
    """``w = L^T N^T u``, so that ``u^T g = w^T eps`` for the canonical noise."""
    dec, dist = problem.decision, problem.distribution
    return dist.L.T @ (dec.N.T @ np.asarray(u, dtype=float))


def g_values(problem: Problem, tilt: TiltSpec, x, Z) -> np.ndarray:
    """Rows ``g_x(z)`` for the draws ``Z``.

    The canonical noise is centred by the closed-form ``G_x(x)`` when available and by
    the sample mean of ``G(x, Z)`` otherwise.
    """
    x = np.asarray(x, dtype=float)
    Z = np.atleast_2d(Z)
    if not tilt.canonical:
        out = np.atleast_2d(np.asarray(tilt.g(x, Z), dtype=float))
        if out.shape != (Z.shape[0], problem.dim):
            raise InvalidArgument("custom tilt map must return one d-vector per draw")
        return out
    Gs = problem.decision.evaluate_many(x, Z)
    if isinstance(problem.decision, LinearDecision) and problem.distribution.has_mean:
        center = mean_field(problem, x, x, ANALYTIC)
    else:
        center = Gs.mean(axis=0)
    return Gs - center


def tilt_weights(problem: Problem, tilt: TiltSpec, x, Z, u=None) -> np.ndarray:
    """``1 + h(u^T g_x(z))`` per draw."""
    return 1.0 + tilt.saturation(g_values(problem, tilt, x, Z) @ _u(tilt, u))


# --------------------------------------------------------------------- normalizer


def _normalizer_mc(problem, tilt, x, u, n, seed):
    Z = problem.distribution.sample_many(np.asarray(x, dtype=float), int(n), make_rng(seed))
    wts = tilt_weights(problem, tilt, x, Z, u)
    se = float(wts.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return float(wts.mean()), se


def normalizer(problem: Problem, tilt: TiltSpec, x, mode=None, u=None) -> float:
    """``C^u_x = 1 + E h(u^T g_x(z))``.

    ``mode`` is ``MonteCarlo(n, seed)`` (default ``n = 10^4``) or ``ANALYTIC``; the
    analytic value for canonical tilts of linear-Gaussian problems is exactly 1.
    """
    u = _u(tilt, u)
    mode = MonteCarlo(10000, 0) if mode is None else mode
    if not np.any(u):
        return 1.0
    if isinstance(mode, Analytic):
        if not is_exact(problem, tilt):
            raise UnsupportedMode("analytic normalizer needs a canonical tilt of a linear-Gaussian problem")
        return 1.0
    if not isinstance(mode, MonteCarlo):
        raise InvalidArgument(f"unknown expectation mode {mode!r}")
    if mode.n < 1:
        raise InvalidArgument("normalizer needs at least one sample")
    return _normalizer_mc(problem, tilt, x, u, mode.n, mode.seed)[0]


class NormalizerCache:
    """Monte-Carlo normalizers cached per cell of a grid over decisions.

    A cell is evaluated at its center with a stream keyed by the cell index, so the
    stored value does not depend on which trajectory reached the cell first; duplicate
    concurrent evaluations store the same number.  Entries are keyed by sample size too,
    so reduced-budget evaluations never overwrite full ones.
    """

    def __init__(self, problem: Problem, tilt: TiltSpec, u, grid: float = 1e-3, n: int = 10000,
                 seed: int = 0):
        if not grid > 0:
            raise InvalidArgument("cache grid must be positive")
        self.problem, self.tilt, self.u = problem, tilt, np.asarray(u, dtype=float)
        self.grid, self.n, self.seed = float(grid), int(n), int(seed)
        self._store = {}
        self._lock = threading.Lock()

    def cell(self, x) -> tuple:
        return tuple(int(v) for v in np.round(np.asarray(x, dtype=float) / self.grid))

    def get(self, x, n: Optional[int] = None):
        """``(C, standard error, cell)`` for the cell containing ``x``."""
        n = self.n if n is None else int(n)
        key = self.cell(x)
        with self._lock:
            hit = self._store.get((key, n))
        if hit is not None:
            return hit[0], hit[1], key
        center = np.array(key, dtype=float) * self.grid
        val = _normalizer_mc(self.problem, self.tilt, center, self.u, n, keyed_seed(self.seed, key + (n,)))
        with self._lock:
            self._store.setdefault((key, n), val)
        return val[0], val[1], key

    def __len__(self):
        return len(self._store)


# ------------------------------------------------------------------- tilted draws


def sample_tilted_many(problem: Problem, tilt: TiltSpec, x, count: int, rng, u=None,
                       max_proposals: int = MAX_PROPOSALS):
    """``count`` draws from ``D^u_x`` by rejection; returns ``(Z, proposals)``.

    Proposals come from ``D(x)`` and are accepted with probability ``(1 + h) / 2``, so
    the expected number of proposals per draw is ``2 / C``.
    """
    x = np.asarray(x, dtype=float)
    u = _u(tilt, u)
    out = []
    have, proposals, since = 0, 0, 0
    while have < count:
        batch = max(64, 2 * (count - have))
        Z = problem.distribution.sample_many(x, batch, rng)
        thr = 0.5 * tilt_weights(problem, tilt, x, Z, u)
        acc = np.flatnonzero(rng.random(batch) < thr)
        need = count - have
        if acc.size == 0:
            proposals += batch
            since += batch
            if since >= max_proposals:
                raise DegenerateTilt(f"no acceptance within {since} proposals (normalizer near zero)")
            continue
        take = acc[:need]
        if since + take[0] + 1 > max_proposals:
            raise DegenerateTilt(f"no acceptance within {max_proposals} proposals (normalizer near zero)")
        out.append(Z[take])
        proposals += int(take[-1]) + 1 if take.size == need else batch
        since = 0 if take.size == need else batch - 1 - int(acc[-1])
        have += take.size
    return np.concatenate(out), proposals


def sample_tilted(problem: Problem, tilt: TiltSpec, x, rng, u=None, return_proposals: bool = False):
    """One draw from ``D^u_x`` (one proposal uses one base draw plus one uniform)."""
    x = np.asarray(x, dtype=float)
    u = _u(tilt, u)
    for tries in range(1, MAX_PROPOSALS + 1):
        z = problem.distribution.sample(x, rng)
        thr = 0.5 * float(tilt_weights(problem, tilt, x, z[None, :], u)[0])
        if rng.random() < thr:
            return (z, tries) if return_proposals else z
    raise DegenerateTilt(f"no acceptance within {MAX_PROPOSALS} proposals (normalizer near zero)")


@dataclass
class UnbiasedCheck:
    x: np.ndarray
    mean: np.ndarray
    standard_error: np.ndarray
    max_abs_z: float


def check_unbiased(problem: Problem, tilt: TiltSpec, xs, n: int = 100000, seed: int = 0) -> list:
    """Sample mean of ``g_x`` with its standard error at each decision in ``xs``."""
    out = []
    for j, x in enumerate(np.atleast_2d(xs)):
        Z = problem.distribution.sample_many(x, n, make_rng(keyed_seed(seed, (j,))))
        g = g_values(problem, tilt, x, Z)
        m = g.mean(axis=0)
        se = g.std(axis=0, ddof=1) / math.sqrt(n)
        z = np.divide(np.abs(m), se, out=np.zeros_like(m), where=se > 0)
        out.append(UnbiasedCheck(np.asarray(x, dtype=float), m, se, float(z.max())))
    return out


# ---------------------------------------------------------------- tilted equilibria


def kappa(s: float, saturation: SaturationFunction = DEFAULT_SATURATION) -> float:
    """``E[t h(s t)]`` for ``t ~ N(0, 1)``; equals ``s`` up to Gaussian tails beyond ``1 / (2 s)``."""
    s = abs(float(s))
    if s == 0.0:
        return 0.0
    a, b = 0.5 / s, saturation.knot / s
    phi, Phi = stats.norm.pdf, stats.norm.cdf
    ident = 2.0 * s * (Phi(a) - 0.5 - a * phi(a))
    blend, _ = integrate.quad(lambda t: t * saturation(s * t) * phi(t), a, b, epsabs=1e-15, epsrel=1e-12)
    return float(ident + 2.0 * blend + 2.0 * saturation.level * phi(b))


def tilted_field(problem: Problem, tilt: TiltSpec, u=None, mode=None) -> Callable:
    """Factory ``x -> FrozenField`` of ``y -> E_{D^u_x} G(y, z)``.

    Monte-Carlo mode reweights the base draws of ``mode.seed`` by ``(1 + h) / C``;
    every decision reuses the same stream (common random numbers).
    """
    u = _u(tilt, u)
    mode = MonteCarlo(100000, 0) if mode is None else mode
    dec, dist = problem.decision, problem.distribution
    if isinstance(mode, Analytic):
        if not is_exact(problem, tilt):
            raise UnsupportedMode("analytic tilted field needs a canonical tilt of a linear-Gaussian problem")
        w = canonical_w(problem, u)
        s = float(np.linalg.norm(w))
        shift_eps = np.zeros_like(w) if s == 0 else w / s * kappa(s, tilt.saturation)
        shift = dec.N @ (dist.L @ shift_eps)

        def analytic(x):
            return FrozenField.affine(dec.M, dec.N @ dist.mean(np.asarray(x, dtype=float)) + dec.b + shift)

        return analytic
    if not isinstance(mode, MonteCarlo) or mode.n < 1:
        raise InvalidArgument(f"bad expectation mode {mode!r}")

    def sampled(x):
        x = np.asarray(x, dtype=float)
        Z = dist.sample_many(x, int(mode.n), make_rng(mode.seed))
        wts = tilt_weights(problem, tilt, x, Z, u)
        C = wts.mean()
        if isinstance(dec, LinearDecision):
            return FrozenField.affine(dec.M, dec.N @ (wts @ Z / (Z.shape[0] * C)) + dec.b)
        return FrozenField(lambda y: wts @ dec.evaluate_many(y, Z) / (Z.shape[0] * C))

    return sampled


def perturbed_equilibrium(problem: Problem, tilt: TiltSpec, u=None, outer_tol: float = 1e-10,
                          inner_tol: float = 1e-12, mode=None, x_init=None) -> EquilibriumReport:
    """Equilibrium ``x*_u`` of the tilted distribution map."""
    x_init = np.zeros(problem.dim) if x_init is None else x_init
    return find_equilibrium(problem, x_init, outer_tol, inner_tol, mode=mode or MonteCarlo(100000, 0),
                            field=tilted_field(problem, tilt, u, mode))


def _untilted_equilibrium(problem, mode, tol=1e-12):
    return find_equilibrium(problem, np.zeros(problem.dim), tol, tol * 1e-2, mode=mode)


def _default_mode(problem, tilt):
    return ANALYTIC if is_exact(problem, tilt) else MonteCarlo(100000, 0)


def _w_matrix(problem, x_star, mode):
    try:
        return estimate_w(problem, x_star, ANALYTIC)[2]
    except UnsupportedMode:
        return estimate_w(problem, x_star, CentralDifference(expectation=mode))[2]


def sigma_g_G(problem: Problem, tilt: TiltSpec, x_star, mode=ANALYTIC) -> np.ndarray:
    """``E[g_{x*}(z) G(x*, z)^T]``; closed form ``N C N^T`` for canonical linear-Gaussian tilts."""
    if isinstance(mode, Analytic):
        if not is_exact(problem, tilt):
            raise UnsupportedMode("analytic Sigma_gG needs a canonical tilt of a linear-Gaussian problem")
        dec, dist = problem.decision, problem.distribution
        return dec.N @ dist.base_cov @ dec.N.T
    Z = problem.distribution.sample_many(np.asarray(x_star, dtype=float), int(mode.n), make_rng(mode.seed))
    g = g_values(problem, tilt, x_star, Z)
    return g.T @ problem.decision.evaluate_many(x_star, Z) / Z.shape[0]


@dataclass
class ShiftRow:
    u_norm: float
    u: np.ndarray
    x_u: np.ndarray
    ratio: float


@dataclass
class ShiftTable:
    rows: list
    x_star: np.ndarray
    w: np.ndarray
    sigma_gG: np.ndarray
    floor: float
    mode: dict

    @property
    def ratios(self) -> list:
        return [r.ratio for r in self.rows]

    def passes(self) -> bool:
        """Each ratio (largest ``u`` first) is below its predecessor or at the noise floor."""
        live = [r.ratio for r in self.rows if r.u_norm > 0]
        return all(b < a or b <= self.floor for a, b in zip(live, live[1:]))

    def to_csv(self, path):
        d = self.x_star.size
        header = ["u_norm"] + [f"u[{i}]" for i in range(d)] + [f"x_u[{i}]" for i in range(d)] + ["ratio"]
        rows = [[r.u_norm, *r.u.tolist(), *r.x_u.tolist(), r.ratio] for r in self.rows]
        return write_csv(path, header, rows)

    def to_dict(self) -> dict:
        return {
            "u_norms": [r.u_norm for r in self.rows],
            "ratios": self.ratios,
            "floor": self.floor,
            "passes": self.passes(),
            "x_star": self.x_star.tolist(),
            "w": self.w.tolist(),
            "sigma_gG": self.sigma_gG.tolist(),
            "mode": self.mode,
        }


def _batch_se(problem, tilt, x_star, mode, batches):
    """Standard error (operator norm) of the Monte-Carlo ``Sigma_gG`` by batch means."""
    Z = problem.distribution.sample_many(x_star, int(mode.n), make_rng(mode.seed))
    g = g_values(problem, tilt, x_star, Z)
    Gs = problem.decision.evaluate_many(x_star, Z)
    parts = [gb.T @ Gb / gb.shape[0] for gb, Gb in zip(np.array_split(g, batches), np.array_split(Gs, batches))]
    sd = np.std(parts, axis=0, ddof=1) / math.sqrt(batches)
    return float(np.linalg.norm(sd, 2))


def equilibrium_shift_check(problem: Problem, tilt: TiltSpec, u_norms: Sequence[float] = (0.04, 0.02, 0.01),
                            direction=None, mode=None, reference=None, batches: int = 10,
                            outer_tol: float = 1e-12) -> ShiftTable:
    """Table of ``||x*_u - x* + W^-1 Sigma_gG^T u|| / ||u||`` over shrinking ``||u||``.

    ``x*`` and every ``x*_u`` are computed in ``mode`` (analytic when exact, else
    Monte-Carlo with common random numbers).  ``W`` and ``Sigma_gG`` come from
    ``reference`` (analytic when available).  The floor is three batch-means standard
    errors of the Monte-Carlo ``Sigma_gG`` (of ``mode`` and of ``reference``) times
    ``||W^-1||``, plus the solve tolerance.  A zero ``u`` gets ratio 0.
    """
    norms = [float(v) for v in u_norms]
    live = [v for v in norms if v > 0]
    if len(live) < 3:
        raise InvalidArgument("need at least three nonzero tilt sizes")
    if any(b >= a for a, b in zip(live, live[1:])) or any(v < 0 for v in norms):
        raise InvalidArgument("tilt sizes must decrease")
    mode = _default_mode(problem, tilt) if mode is None else mode
    reference = _default_mode(problem, tilt) if reference is None else reference
    direction = (tilt.u if np.any(tilt.u) else np.eye(problem.dim)[0]) if direction is None else direction
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)

    x_star = _untilted_equilibrium(problem, mode, outer_tol).x_star
    W = _w_matrix(problem, x_star, reference)
    S = sigma_g_G(problem, tilt, x_star, reference)
    w_inv = np.linalg.inv(W)
    floor = 10.0 * outer_tol / min(live)
    for m in (mode, reference):
        if isinstance(m, MonteCarlo):
            floor += 3.0 * np.linalg.norm(w_inv, 2) * _batch_se(problem, tilt, x_star, m, batches)
    rows = []
    for r in norms:
        u = r * direction
        if r == 0:
            rows.append(ShiftRow(0.0, u, x_star.copy(), 0.0))
            continue
        x_u = perturbed_equilibrium(problem, tilt, u, outer_tol, outer_tol * 1e-2, mode, x_init=x_star).x_star
        ratio = float(np.linalg.norm(x_u - x_star + w_inv @ S.T @ u) / r)
        rows.append(ShiftRow(r, u, x_u, ratio))
    return ShiftTable(rows, x_star, W, S, float(floor), mode.describe())


# -------------------------------------------------------------------------- LAN


@dataclass
class LanReport:
    k: int
    replicas: int
    u: np.ndarray
    z: np.ndarray
    log_lr: np.ndarray
    sigma_g: np.ndarray
    predicted_drift: float
    predicted_variance: float
    mean_log_lr: float
    var_log_lr: float
    se_mean: float
    se_var: float
    drift_estimate: float
    drift_se: float
    normalizer_uncertainty: float = 0.0
    normalizer_mode: str = "analytic"

    @property
    def variance_to_drift_ratio(self) -> float:
        """``var(log LR) / -drift``; two under local asymptotic normality."""
        return self.var_log_lr / -self.drift_estimate if self.drift_estimate != 0 else math.nan

    def to_csv(self, path):
        d = self.z.shape[1]
        rows = [[i, self.log_lr[i], *self.z[i].tolist()] for i in range(self.replicas)]
        return write_csv(path, ["replica", "log_lr"] + [f"Z[{j}]" for j in range(d)], rows)

    def to_dict(self) -> dict:
        return {
            "k": self.k, "replicas": self.replicas, "u": self.u.tolist(),
            "sigma_g": self.sigma_g.tolist(),
            "predicted_drift": self.predicted_drift, "predicted_variance": self.predicted_variance,
            "mean_log_lr": self.mean_log_lr, "var_log_lr": self.var_log_lr,
            "se_mean": self.se_mean, "se_var": self.se_var,
            "drift_estimate": self.drift_estimate, "drift_se": self.drift_se,
            "variance_to_drift_ratio": self.variance_to_drift_ratio,
            "normalizer_uncertainty": self.normalizer_uncertainty,
            "normalizer_mode": self.normalizer_mode,
        }


def _lan_python(problem, tilt, u, k, x0, schedule, seed, cache, max_cells, reduced_n):
    """Untilted SFB run accumulating ``Z_k`` and the log-likelihood ratio step by step."""
    rng = make_rng(seed)
    d = problem.dim
    x = np.array(x0, dtype=float)
    scale = 1.0 / math.sqrt(k)
    us = u * scale
    h = tilt.saturation
    logl = 0.0
    zsum, ggsum = np.zeros(d), np.zeros((d, d))
    err = {}
    for t in range(k):
        z = problem.distribution.sample(x, rng)
        g = g_values(problem, tilt, x, z[None, :])[0]
        if cache is None:
            C = 1.0
        else:
            n = None if max_cells is None or len(err) < max_cells or cache.cell(x) in err else reduced_n
            C, se, key = cache.get(x, n)
            e = err.setdefault(key, [0, se / C])
            e[0] += 1
        logl += math.log1p(h(float(us @ g))) - math.log(C)
        zsum += g
        ggsum += np.outer(g, g)
        y = x - schedule_eta(schedule, t) * problem.decision(x, z)
        x = problem.feasible.project(y)
    unc = math.sqrt(sum((c * e) ** 2 for c, e in err.values()))
    return zsum, ggsum, logl, unc


def lan_statistic(problem: Problem, tilt: TiltSpec, u=None, k: int = 10000, replicas: int = 200,
                  master_seed: int = 0, schedule: Optional[StepSchedule] = None, x0=None,
                  workers: Optional[int] = None, procedure: str = "sfb", cache_grid: float = 1e-3,
                  cache_n: int = 10000, max_cells: Optional[int] = None, reduced_n: int = 100) -> LanReport:
    """Local asymptotic normality statistics of ``k``-step SFB runs under the untilted law.

    Per replica: ``Z_k = k^-1/2 sum_j g_{x_j}(z_j)`` and
    ``log LR = sum_j [log(1 + h(u^T g_{x_j}(z_j) / sqrt(k))) - log C_{x_j}^{u/sqrt(k)}]``.

    Canonical tilts of linear-Gaussian problems run on the stepping core with the exact
    normalizer 1.  Other problems estimate normalizers through a :class:`NormalizerCache`
    (grid ``cache_grid``, ``cache_n`` draws per cell); beyond ``max_cells`` new cells per
    replica use ``reduced_n`` draws, which shows up in ``normalizer_uncertainty`` rather
    than as an error.

    ``drift_estimate`` is ``mean(log LR - u^T Z_k)``; ``u^T Z_k`` has mean zero, so this is
    a lower-variance estimate of the mean log-likelihood ratio.
    """
    if procedure != "sfb":
        raise UnsupportedMode("only the SFB estimation procedure is available")
    if replicas < 2 or k < 1:
        raise InvalidArgument("need k >= 1 and at least two replicas")
    u = _u(tilt, u)
    schedule = schedule or StepSchedule(1.0, 0.75)
    exact = is_exact(problem, tilt)
    if x0 is None:
        x0 = _untilted_equilibrium(problem, _default_mode(problem, tilt)).x_star
    x0 = np.asarray(x0, dtype=float)
    cache = None if exact or not np.any(u) else NormalizerCache(problem, tilt, u / math.sqrt(k), cache_grid,
                                                                cache_n, master_seed)

    def one(i):
        seed = replica_seed(master_seed, i)
        if exact:
            w = canonical_w(problem, u)
            _, acc = drive_core(problem, x0, schedule, k, make_rng(seed), RecordPlan(), mode=1, w=w,
                                scale=1.0 / math.sqrt(k), hcoef=tilt.saturation.coefficients(), logc=0.0)
            return acc.zsum.copy(), acc.ggsum.copy(), acc.log_lr, 0.0
        return _lan_python(problem, tilt, u, k, x0, schedule, seed, cache, max_cells, reduced_n)

    workers = default_workers() if workers is None else max(1, int(workers))
    if workers == 1:
        res = [one(i) for i in range(replicas)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            res = list(pool.map(one, range(replicas)))

    zsum = np.array([r[0] for r in res])
    ggsum = np.array([r[1] for r in res])
    log_lr = np.array([r[2] for r in res])
    Z = zsum / math.sqrt(k)
    m = zsum.sum(axis=0) / (replicas * k)
    sigma_g = ggsum.sum(axis=0) / (replicas * k) - np.outer(m, m)
    quad = float(u @ sigma_g @ u)
    R = replicas
    mean = float(log_lr.mean())
    var = float(log_lr.var(ddof=1))
    m4 = float(np.mean((log_lr - mean) ** 4))
    drift = log_lr - Z @ u
    return LanReport(
        k=k, replicas=R, u=u, z=Z, log_lr=log_lr, sigma_g=sigma_g,
        predicted_drift=-0.5 * quad, predicted_variance=quad,
        mean_log_lr=mean, var_log_lr=var,
        se_mean=math.sqrt(var / R), se_var=math.sqrt(max(m4 - var ** 2, 0.0) / R),
        drift_estimate=float(drift.mean()), drift_se=float(drift.std(ddof=1) / math.sqrt(R)),
        normalizer_uncertainty=float(max(r[3] for r in res)),
        normalizer_mode="analytic" if cache is None else "monte-carlo-cache",
    )


# ------------------------------------------------------------------ f-divergences


F_FUNCTIONS = {
    "kl": (lambda r: special.xlogy(r, r), 1.0),
    "chi2": (lambda r: (r - 1.0) ** 2, 2.0),
}


@dataclass
class FDivergenceReport:
    f: str
    estimate: float
    standard_error: float
    prediction: float
    f2: float
    sigma_g: np.ndarray
    x: np.ndarray
    n: int
    mode: dict

    def to_dict(self) -> dict:
        return {"f": self.f, "estimate": self.estimate, "standard_error": self.standard_error,
                "prediction": self.prediction, "f2": self.f2, "sigma_g": self.sigma_g.tolist(),
                "x": self.x.tolist(), "n": self.n, "mode": self.mode}


def f_divergence_estimate(problem: Problem, tilt: TiltSpec, u=None, f="kl", x=None, n: int = 100000,
                          seed: int = 0, f2: Optional[float] = None, mode=None) -> FDivergenceReport:
    """``Delta_f(D^u_x || D_x) = E f((1 + h(u^T g)) / C)`` and its quadratic prediction.

    ``f`` is ``"kl"`` (``t log t``), ``"chi2"`` (``(t - 1)^2``) or a vectorised callable, in
    which case ``f2 = f''(1)`` is required.  The prediction is ``f2 / 2 * u^T E[g g^T] u``.
    Monte-Carlo mode reports the naive standard error ``sd(f(r)) / sqrt(n)``; analytic
    mode (exact tilts only) integrates over the one-dimensional score.
    """
    u = _u(tilt, u)
    if callable(f):
        if f2 is None:
            raise InvalidArgument("custom f needs f''(1)")
        fn, name = f, getattr(f, "__name__", "custom")
    else:
        if f not in F_FUNCTIONS:
            raise InvalidArgument(f"unknown f {f!r}")
        fn, default_f2 = F_FUNCTIONS[f]
        f2 = default_f2 if f2 is None else f2
        name = f
    mode = MonteCarlo(n, seed) if mode is None else mode
    if x is None:
        x = _untilted_equilibrium(problem, _default_mode(problem, tilt)).x_star
    x = np.asarray(x, dtype=float)
    h = tilt.saturation
    if isinstance(mode, Analytic):
        if not is_exact(problem, tilt):
            raise UnsupportedMode("analytic f-divergence needs a canonical tilt of a linear-Gaussian problem")
        sigma_g = sigma_g_G(problem, tilt, x, ANALYTIC)
        s = float(np.linalg.norm(canonical_w(problem, u)))
        if s == 0:
            est = 0.0
        else:
            pts = sorted({p for q in (0.5 / s, h.knot / s) for p in (q, -q) if q < 40})
            est, _ = integrate.quad(lambda t: float(fn(np.array(1.0 + h(s * t)))) * stats.norm.pdf(t),
                                    -40.0, 40.0, points=pts or None, limit=200, epsabs=1e-14)
        return FDivergenceReport(name, float(est), 0.0, 0.5 * f2 * float(u @ sigma_g @ u), f2, sigma_g, x, 0,
                                 mode.describe())
    Z = problem.distribution.sample_many(x, int(mode.n), make_rng(mode.seed))
    g = g_values(problem, tilt, x, Z)
    sigma_g = g.T @ g / g.shape[0]
    if not np.any(u):
        return FDivergenceReport(name, 0.0, 0.0, 0.0, f2, sigma_g, x, int(mode.n), mode.describe())
    wts = 1.0 + h(g @ u)
    vals = np.asarray(fn(wts / wts.mean()), dtype=float)
    return FDivergenceReport(name, float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(vals.size)),
                             0.5 * f2 * float(u @ sigma_g @ u), f2, sigma_g, x, int(mode.n), mode.describe())


# -------------------------------------------------------------- minimax risk probe


def make_loss(loss) -> Callable:
    """Loss on rows: ``"squared-norm"``, ``("indicator", r)`` for ``1{||v|| > r}``, or a callable."""
    if callable(loss):
        return loss
    if loss == "squared-norm":
        return lambda V: np.sum(np.atleast_2d(V) ** 2, axis=1)
    if isinstance(loss, (tuple, list)) and len(loss) == 2 and loss[0] == "indicator":
        r = float(loss[1])
        return lambda V: (np.linalg.norm(np.atleast_2d(V), axis=1) > r).astype(float)
    raise InvalidArgument(f"unknown loss {loss!r}")


def u_ball_grid(c: float, k: int, d: int, directions: int = 4) -> list:
    """Zero plus ``directions`` evenly spread points on the sphere of radius ``sqrt(c / k)`` (2-d: a circle)."""
    r = math.sqrt(c / k)
    out = [np.zeros(d)]
    for j in range(directions):
        v = np.zeros(d)
        th = 2 * math.pi * j / directions
        v[0], v[1 % d] = math.cos(th), math.sin(th) if d > 1 else 0.0
        out.append(r * v / np.linalg.norm(v))
    return out


def run_tilted_sfb(problem: Problem, tilt: TiltSpec, u, x0, schedule: StepSchedule, T: int, seed=0) -> Trajectory:
    """SFB run whose samples come from the tilted law ``D^u`` at every visited iterate."""
    u = np.asarray(u, dtype=float)
    rng = make_rng(seed)
    if is_exact(problem, tilt):
        traj, _ = drive_core(problem, x0, schedule, T, rng, RecordPlan(), mode=2, w=canonical_w(problem, u),
                             scale=1.0, hcoef=tilt.saturation.coefficients())
        return traj
    x = np.array(x0, dtype=float)
    xbar = np.zeros(problem.dim)
    for t in range(T):
        xbar += (x - xbar) / (t + 1)
        z = sample_tilted(problem, tilt, x, rng, u)
        x = problem.feasible.project(x - schedule_eta(schedule, t) * problem.decision(x, z))
    from .dynamics import Checkpoint
    ck = Checkpoint(T, x.copy(), xbar.copy(), schedule_eta(schedule, T))
    return Trajectory([ck], x, xbar, T, None, schedule)


@dataclass
class MinimaxReport:
    k: int
    radius: float
    us: list
    x_us: list
    risks: np.ndarray
    risk_se: np.ndarray
    benchmark: float
    benchmark_se: float
    asymptotic_covariance: np.ndarray

    @property
    def max_risk(self) -> float:
        return float(self.risks.max())

    @property
    def gap(self) -> float:
        return self.max_risk - self.benchmark

    def to_dict(self) -> dict:
        return {"k": self.k, "radius": self.radius, "us": [u.tolist() for u in self.us],
                "x_us": [x.tolist() for x in self.x_us], "risks": self.risks.tolist(),
                "risk_se": self.risk_se.tolist(), "max_risk": self.max_risk, "benchmark": self.benchmark,
                "benchmark_se": self.benchmark_se, "gap": self.gap,
                "asymptotic_covariance": self.asymptotic_covariance.tolist()}


def minimax_risk_probe(problem: Problem, tilt: TiltSpec, k: int, c: float = 1.0, us=None, loss="squared-norm",
                       replicas: int = 100, master_seed: int = 0, schedule: Optional[StepSchedule] = None,
                       x0=None, workers: Optional[int] = None, n_benchmark: int = 100000,
                       mode=None) -> MinimaxReport:
    """Risk ``E_{Q_{k,u}} L(sqrt(k) (xbar_k - x*_u))`` of the averaged SFB iterate per tilt ``u``.

    The grid defaults to :func:`u_ball_grid`.  The benchmark is ``E L(Z)`` for
    ``Z ~ N(0, W^-1 Sigma W^-T)``: exact trace for the squared norm, Monte-Carlo otherwise.
    Replica streams are shared across tilts.
    """
    schedule = schedule or StepSchedule(1.0, 0.75)
    radius = math.sqrt(c / k)
    us = u_ball_grid(c, k, problem.dim) if us is None else [np.asarray(u, dtype=float) for u in us]
    if any(np.linalg.norm(u) > radius * (1 + 1e-9) for u in us):
        raise InvalidArgument(f"tilts must lie in the ball of radius sqrt(c/k) = {radius}")
    mode = _default_mode(problem, tilt) if mode is None else mode
    lossf = make_loss(loss)
    x_star = _untilted_equilibrium(problem, mode).x_star
    x0 = x_star if x0 is None else np.asarray(x0, dtype=float)

    sig_mode = ANALYTIC if isinstance(mode, Analytic) else mode
    sigma = estimate_sigma(problem, x_star, sig_mode)
    acov = asymptotic_covariance(sigma, _w_matrix(problem, x_star, sig_mode))
    if loss == "squared-norm":
        bench, bench_se = float(np.trace(acov)), 0.0
    else:
        rng = make_rng(keyed_seed(master_seed, (-1,)))
        Zb = rng.multivariate_normal(np.zeros(problem.dim), acov, size=n_benchmark, method="eigh")
        lb = lossf(Zb)
        bench, bench_se = float(lb.mean()), float(lb.std(ddof=1) / math.sqrt(n_benchmark))

    workers = default_workers() if workers is None else max(1, int(workers))
    risks, ses, x_us = [], [], []
    for u in us:
        x_u = x_star if not np.any(u) else perturbed_equilibrium(problem, tilt, u, mode=mode, x_init=x_star).x_star

        def one(i, u=u):
            return run_tilted_sfb(problem, tilt, u, x0, schedule, k, replica_seed(master_seed, i)).xbar

        if workers == 1:
            xbars = [one(i) for i in range(replicas)]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                xbars = list(pool.map(one, range(replicas)))
        vals = lossf(math.sqrt(k) * (np.array(xbars) - x_u))
        risks.append(float(vals.mean()))
        ses.append(float(vals.std(ddof=1) / math.sqrt(replicas)))
        x_us.append(x_u)
    return MinimaxReport(k, radius, us, x_us, np.array(risks), np.array(ses), bench, bench_se, acov)
