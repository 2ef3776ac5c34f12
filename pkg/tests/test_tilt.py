import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from perfsa.errors import InvalidArgument, UnsupportedMode
from perfsa.problem import (ANALYTIC, Constants, CustomDecision, CustomDistribution, FeasibleSet, MonteCarlo,
                            Problem, fig1_problem)
from perfsa.rng import make_rng
from perfsa.tilt import (DEFAULT_SATURATION, NormalizerCache, SaturationFunction, TiltSpec, blend_coefficients,
                         check_unbiased, equilibrium_shift_check, f_divergence_estimate, kappa, lan_statistic,
                         make_loss, minimax_risk_probe, normalizer, perturbed_equilibrium, sample_tilted,
                         sample_tilted_many, sigma_g_G, tilt_weights, u_ball_grid)

H = DEFAULT_SATURATION
W_HALF = np.array([[1.0, -0.5], [-0.5, 1.0]])


def quad_line(f, s=1.0):
    # integrate f(t) phi(t) over the line, splitting at the knots of h(s t)
    pts = sorted({v / s for v in (-1.5, -0.5, 0.5, 1.5) if abs(v / s) < 40} | {-10.0, 0.0, 10.0})
    pieces = [-np.inf] + pts + [np.inf]
    return sum(integrate.quad(lambda t: f(t) * stats.norm.pdf(t), a, b, epsabs=1e-14, epsrel=1e-12)[0]
               for a, b in zip(pieces, pieces[1:]))


# ------------------------------------------------------------------ saturation


def _symbolic_blend(knot, level):
    s = sp.symbols("s")
    c = sp.symbols("c4:8")
    p = sp.Rational(1, 2) + s + s ** 4 * (c[0] + c[1] * s + c[2] * s ** 2 + c[3] * s ** 3)
    D = sp.nsimplify(knot) - sp.Rational(1, 2)
    eqs = [p.subs(s, D) - sp.nsimplify(level)] + [sp.diff(p, s, k).subs(s, D) for k in (1, 2, 3)]
    sol = sp.solve(eqs, c)
    return [sol[ci] for ci in c]


@pytest.mark.parametrize("knot,level", [(1.5, 1.0), (2.0, 1.0), (2.5, 0.9), (1.75, 0.95)])
def test_blend_coefficients_match_symbolic_solve(knot, level):
    exact = _symbolic_blend(knot, level)
    assert np.allclose(blend_coefficients(knot, level), [float(v) for v in exact], rtol=1e-14, atol=1e-14)


def test_default_blend_is_exact():
    assert _symbolic_blend(1.5, 1.0) == [sp.Rational(-5, 2), 3, -1, 0]
    assert H.blend == (-2.5, 3.0, -1.0, 0.0)


@pytest.mark.parametrize("sat", [H, SaturationFunction.with_knot(2.0, 0.9)], ids=["default", "wide"])
@pytest.mark.parametrize("sign", [1.0, -1.0])
def test_c3_at_knots(sat, sign):
    for knot in (0.5, sat.knot):
        t = sign * knot
        for order in range(4):
            left = sat.derivative(t, order, side="left")
            right = sat.derivative(t, order, side="right")
            assert abs(left - right) <= 1e-10


def _one_sided(f, x, h, direction):
    # fourth-order one-sided first derivative; direction -1 looks left
    c = (25.0, -48.0, 36.0, -16.0, 3.0)
    return -direction * sum(ci * f(x + direction * i * h) for i, ci in enumerate(c)) / (12.0 * h)


@pytest.mark.parametrize("knot", [0.5, 1.5])
def test_one_sided_finite_differences_agree(knot):
    for order in range(3):
        f = (lambda t, o=order: H.derivative(t, o)) if order else H
        left = _one_sided(f, knot, 1e-3, -1.0)
        right = _one_sided(f, knot, 1e-3, 1.0)
        exact = H.derivative(knot, order + 1)
        assert abs(left - right) <= 1e-6
        assert abs(left - exact) <= 1e-6


def test_identity_segment_and_origin():
    t = np.linspace(-0.5, 0.5, 1001)
    assert np.array_equal(H(t), t)
    assert H.derivative(0.0, 1) == 1.0 and H.derivative(0.0, 2) == 0.0


@settings(max_examples=300, deadline=None)
@given(t=st.floats(-1e6, 1e6, allow_nan=False))
def test_bounded_and_odd(t):
    assert abs(H(t)) <= 1.0
    assert H(-t) == -H(t)


@settings(max_examples=50, deadline=None)
@given(knot=st.floats(1.2, 1.5), level=st.floats(0.8, 1.0))
def test_custom_saturations_stay_bounded(knot, level):
    sat = SaturationFunction.with_knot(knot, level)
    t = np.linspace(-knot - 1, knot + 1, 4001)
    assert np.max(np.abs(sat(t))) <= level
    assert sat(knot + 0.1) == level


def test_saturation_validation():
    with pytest.raises(InvalidArgument):
        SaturationFunction(knot=0.5)
    with pytest.raises(InvalidArgument):
        SaturationFunction.with_knot(1.5, level=0.0)
    with pytest.raises(InvalidArgument):
        SaturationFunction.with_knot(2.5, level=1.0)


# ------------------------------------------------------------------ normalizer


def test_normalizer_examples():
    p = fig1_problem(0.5)
    assert normalizer(p, TiltSpec([0.0, 0.0]), np.zeros(2)) == 1.0
    C = normalizer(p, TiltSpec([0.1, 0.0]), np.zeros(2), MonteCarlo(10 ** 6, 0))
    assert abs(C - 1) < 1e-3
    big = normalizer(p, TiltSpec([100.0, 0.0]), np.zeros(2), MonteCarlo(10 ** 4, 1))
    assert 0.0 <= big <= 2.0
    assert normalizer(p, TiltSpec([0.3, 0.2]), np.zeros(2), ANALYTIC) == 1.0


def test_normalizer_analytic_needs_exact_tilt():
    custom = TiltSpec([0.1, 0.0], g=lambda x, Z: Z - Z.mean(axis=0))
    with pytest.raises(UnsupportedMode):
        normalizer(fig1_problem(0.5), custom, np.zeros(2), ANALYTIC)


def test_normalizer_cache_deterministic_and_keyed():
    p = fig1_problem(0.5)
    a = NormalizerCache(p, TiltSpec([1.0, 0.0]), [1.0, 0.0], grid=0.1, n=500, seed=3)
    b = NormalizerCache(p, TiltSpec([1.0, 0.0]), [1.0, 0.0], grid=0.1, n=500, seed=3)
    for x in ([0.0, 0.0], [0.31, -0.2], [0.29, -0.21]):
        assert a.get(x)[:2] == b.get(x)[:2]
    assert len(a) == 2  # the last two points share a cell
    assert a.get([0.3, -0.2], n=50)[:2] != a.get([0.3, -0.2])[:2]
    with pytest.raises(InvalidArgument):
        NormalizerCache(p, TiltSpec([1.0, 0.0]), [1.0, 0.0], grid=0.0)


# --------------------------------------------------------------------- sampler


def test_sampler_u_zero_is_base_law():
    p = fig1_problem(0.5)
    Z, props = sample_tilted_many(p, TiltSpec([0.0, 0.0]), np.zeros(2), 10 ** 5, make_rng(0))
    assert abs(Z.shape[0] / props - 0.5) < 3 * math.sqrt(0.25 / props)
    assert np.all(np.abs(Z.mean(axis=0)) < 4 / math.sqrt(10 ** 5))


def test_tilted_mean_matches_quadrature():
    p = fig1_problem(0.5)
    Z, _ = sample_tilted_many(p, TiltSpec([0.5, 0.0]), np.zeros(2), 10 ** 6, make_rng(1))
    C = quad_line(lambda z: 1 + H(-0.5 * z))
    m1 = quad_line(lambda z: z * (1 + H(-0.5 * z))) / C
    m2 = quad_line(lambda z: z * z * (1 + H(-0.5 * z))) / C
    se = math.sqrt((m2 - m1 ** 2) / 10 ** 6)
    assert m1 < 0
    assert abs(Z[:, 0].mean() - m1) < 4 * se
    assert abs(Z[:, 1].mean()) < 4 / 1000


def test_orthogonal_tilt_leaves_law_unchanged():
    p = fig1_problem(0.5)
    tilt = TiltSpec([0.0, 1.0], g=lambda x, Z: np.column_stack([Z[:, 0] - 0.5 * x[1], np.zeros(len(Z))]))
    x = np.array([0.4, 0.2])
    Z, _ = sample_tilted_many(p, tilt, x, 10 ** 5, make_rng(2))
    ref = p.distribution.sample_many(x, 10 ** 5, make_rng(3))
    for j in range(2):
        assert stats.ttest_ind(Z[:, j], ref[:, j]).pvalue > 1e-3


def _skewed_tilt():
    return TiltSpec([1.0, 0.0], g=lambda x, Z: np.column_stack([Z[:, 0] ** 2 - 1.0 - 0.0 * x[0], Z[:, 1]]))


@pytest.mark.parametrize("tilt,C", [(TiltSpec([3.0, -1.0]), 1.0), (_skewed_tilt(), None)], ids=["symmetric", "skewed"])
def test_acceptance_rate_is_half_normalizer(tilt, C):
    p = fig1_problem(0.0)
    x = np.zeros(2)
    if C is None:
        C = normalizer(p, tilt, x, MonteCarlo(4 * 10 ** 6, 9))
        assert abs(C - 1) > 0.05
    Z, props = sample_tilted_many(p, tilt, x, 2 * 10 ** 5, make_rng(4))
    rate = Z.shape[0] / props
    assert abs(rate - C / 2) < 3 * math.sqrt((C / 2) * (1 - C / 2) / props)
    weights = tilt_weights(p, tilt, x, p.distribution.sample_many(x, 1000, make_rng(5)))
    assert np.all(weights / C >= 0)


def test_single_draw_sampler():
    p = fig1_problem(0.5)
    draws = [sample_tilted(p, TiltSpec([0.5, 0.0]), np.zeros(2), make_rng(s), return_proposals=True)
             for s in range(2000)]
    tries = np.array([t for _, t in draws])
    assert abs(tries.mean() - 2.0) < 0.15
    again = sample_tilted(p, TiltSpec([0.5, 0.0]), np.zeros(2), make_rng(7))
    assert np.array_equal(again, draws[7][0])


def test_unbiased_tilt_map():
    p = fig1_problem(0.5)
    xs = np.random.default_rng(0).normal(size=(5, 2))
    for chk in check_unbiased(p, TiltSpec([0.1, 0.0]), xs, n=10 ** 5, seed=1):
        assert chk.max_abs_z < 4


# -------------------------------------------------------- perturbed equilibrium


def test_kappa_against_direct_quadrature():
    for s in (1e-3, 0.01, 0.1, 0.5, 2.0):
        assert abs(kappa(s) - quad_line(lambda t: t * H(s * t), s)) < 1e-12
    assert kappa(0.0) == 0.0


def test_perturbed_equilibrium_u_zero():
    p = fig1_problem(0.5)
    rep = perturbed_equilibrium(p, TiltSpec([0.0, 0.0]), mode=ANALYTIC, x_init=[1.0, 1.0])
    assert np.linalg.norm(rep.x_star) < 1e-9


def test_perturbed_equilibrium_first_order_analytic():
    p = fig1_problem(0.5)
    u = np.array([0.01, 0.0])
    x_u = perturbed_equilibrium(p, TiltSpec(u), mode=ANALYTIC).x_star
    lin = -np.linalg.solve(W_HALF, u)
    assert np.allclose(lin, [-0.0133333333, -0.0066666667])
    assert np.linalg.norm(x_u - lin) <= 0.15 * np.linalg.norm(lin)
    # exact oracle: the tilted mean of eps is -u/|u| kappa(|u|), computed by quadrature
    k = quad_line(lambda t: t * H(0.01 * t), 0.01)
    assert np.allclose(x_u, lin * k / 0.01, atol=1e-12)


def test_perturbed_equilibrium_monte_carlo_common_numbers():
    p = fig1_problem(0.5)
    u = np.array([0.01, 0.0])
    mode = MonteCarlo(10 ** 5, 4)
    base = perturbed_equilibrium(p, TiltSpec(u), [0.0, 0.0], mode=mode).x_star
    x_u = perturbed_equilibrium(p, TiltSpec(u), mode=mode).x_star
    lin = -np.linalg.solve(W_HALF, u)
    assert np.linalg.norm((x_u - base) - lin) <= 0.15 * np.linalg.norm(lin)


def test_perturbed_equilibrium_antisymmetric():
    p = fig1_problem(0.5)
    u = np.array([0.02, -0.01])
    plus = perturbed_equilibrium(p, TiltSpec(u), mode=ANALYTIC).x_star
    minus = perturbed_equilibrium(p, TiltSpec(-u), mode=ANALYTIC).x_star
    assert np.linalg.norm(plus + minus) < 1e-12
    mode = MonteCarlo(10 ** 5, 2)
    base = perturbed_equilibrium(p, TiltSpec(u), [0.0, 0.0], mode=mode).x_star
    plus = perturbed_equilibrium(p, TiltSpec(u), mode=mode).x_star
    minus = perturbed_equilibrium(p, TiltSpec(-u), mode=mode).x_star
    assert np.linalg.norm(plus + minus - 2 * base) < 0.05 * np.linalg.norm(u)


def test_sigma_gG_closed_form_and_mc():
    p = fig1_problem(0.5)
    assert np.array_equal(sigma_g_G(p, TiltSpec([1.0, 0.0]), np.zeros(2)), np.eye(2))
    mc = sigma_g_G(p, TiltSpec([1.0, 0.0]), np.zeros(2), MonteCarlo(10 ** 6, 0))
    assert np.linalg.norm(mc - np.eye(2), 2) < 0.01


# ------------------------------------------------------------------ shift table


def test_shift_table_analytic_and_zero_row():
    t = equilibrium_shift_check(fig1_problem(0.5), TiltSpec([1.0, 0.0]), u_norms=(0.04, 0.02, 0.01, 0.0))
    assert t.passes()
    assert t.rows[-1].ratio == 0.0
    assert max(t.ratios) <= t.floor


def test_shift_table_decreases_outside_floor():
    t = equilibrium_shift_check(fig1_problem(0.5), TiltSpec([1.0, 0.0]), u_norms=(0.8, 0.4, 0.2))
    r = t.ratios
    assert r[0] > r[1] > r[2] > t.floor and t.passes()


def test_shift_table_monte_carlo():
    t = equilibrium_shift_check(fig1_problem(0.5), TiltSpec([1.0, 0.0]), mode=MonteCarlo(10 ** 5, 0))
    assert t.passes()
    assert t.floor < 0.1


def test_shift_static_problem():
    t = equilibrium_shift_check(fig1_problem(0.0), TiltSpec([0.0, 1.0]), u_norms=(0.04, 0.02, 0.01))
    assert np.array_equal(t.w, np.eye(2)) and np.array_equal(t.sigma_gG, np.eye(2))
    for row in t.rows:
        assert np.linalg.norm(row.x_u + row.u) <= 1e-9 * row.u_norm


def test_shift_argument_checks():
    with pytest.raises(InvalidArgument):
        equilibrium_shift_check(fig1_problem(0.5), TiltSpec([1.0, 0.0]), u_norms=(0.04, 0.02))
    with pytest.raises(InvalidArgument):
        equilibrium_shift_check(fig1_problem(0.5), TiltSpec([1.0, 0.0]), u_norms=(0.01, 0.02, 0.04))


# ------------------------------------------------------------------------- LAN


@pytest.fixture(scope="module")
def lan_report():
    return lan_statistic(fig1_problem(0.5), TiltSpec([0.1, 0.0]), k=10 ** 4, replicas=200, master_seed=0)


def test_lan_u_zero_is_identically_zero():
    rep = lan_statistic(fig1_problem(0.5), TiltSpec([0.0, 0.0]), k=1000, replicas=20)
    assert np.all(rep.log_lr == 0.0)


def test_lan_matches_limit(lan_report):
    rep = lan_report
    assert rep.log_lr.shape == (200,) and rep.z.shape == (200, 2)
    assert abs(rep.mean_log_lr + 0.005) < 3 * rep.se_mean
    assert abs(rep.drift_estimate + 0.005) < 0.002
    assert abs(rep.var_log_lr - 0.01) < 3 * rep.se_var and abs(rep.var_log_lr - 0.01) < 0.004
    assert abs(rep.predicted_drift + 0.005) < 2e-4


def test_lan_z_covariance(lan_report):
    assert np.linalg.norm(np.cov(lan_report.z.T) - np.eye(2), 2) < 0.15
    assert np.linalg.norm(lan_report.sigma_g - np.eye(2), 2) < 0.01


def test_lan_variance_drift_ratio(lan_report):
    assert 1.6 <= lan_report.variance_to_drift_ratio <= 2.4


def test_lan_worker_invariance():
    a = lan_statistic(fig1_problem(0.5), TiltSpec([0.1, 0.0]), k=500, replicas=8, master_seed=3, workers=1)
    b = lan_statistic(fig1_problem(0.5), TiltSpec([0.1, 0.0]), k=500, replicas=8, master_seed=3, workers=3)
    assert np.array_equal(a.log_lr, b.log_lr) and np.array_equal(a.z, b.z)


def _noise_map(x, Z):
    return -(Z - 0.5 * np.asarray(x)[::-1])


def test_lan_python_cache_path_agrees_with_core():
    p = fig1_problem(0.5)
    u = np.array([0.3, 0.0])
    exact = lan_statistic(p, TiltSpec(u), k=300, replicas=4, master_seed=5, workers=1)
    approx = lan_statistic(p, TiltSpec(u, g=_noise_map), k=300, replicas=4, master_seed=5, workers=1,
                           cache_grid=0.05, cache_n=4000)
    assert approx.normalizer_mode == "monte-carlo-cache"
    assert np.allclose(approx.z, exact.z, atol=1e-10)
    assert np.all(np.abs(approx.log_lr - exact.log_lr) <= 4 * approx.normalizer_uncertainty + 1e-10)


def test_lan_budget_widens_uncertainty():
    p = fig1_problem(0.5)
    kw = dict(k=200, replicas=2, master_seed=1, workers=1, cache_grid=0.02, cache_n=2000)
    full = lan_statistic(p, TiltSpec([0.3, 0.0], g=_noise_map), **kw)
    capped = lan_statistic(p, TiltSpec([0.3, 0.0], g=_noise_map), max_cells=2, reduced_n=20, **kw)
    assert capped.normalizer_uncertainty > full.normalizer_uncertainty
    assert np.all(np.isfinite(capped.log_lr))


def _bounded_problem():
    # uniform noise on [-1, 1]^2 around a 0.3-swap mean
    dist = CustomDistribution(lambda x, rng: 0.3 * x[::-1] + rng.uniform(-1, 1, 2), 2, 2,
                              mean_fn=lambda x: 0.3 * x[::-1])
    dec = CustomDecision(lambda x, z: x - z, 2, 2)
    return Problem(FeasibleSet.whole_space(2), dist, dec, Constants(1.0, 1.0, 0.3, 1.0))


def _bounded_map(x, Z):
    return Z - 0.3 * np.asarray(x)[::-1]


def test_identity_region_bit_equal():
    p = _bounded_problem()
    u = np.array([0.3, -0.15])  # |u| * max |g| <= 1/2
    x = np.array([0.2, -0.4])
    Z = p.distribution.sample_many(x, 5000, make_rng(0))
    g = _bounded_map(x, Z)
    assert np.array_equal(tilt_weights(p, TiltSpec(u, g=_bounded_map), x, Z), 1.0 + g @ u)
    kw = dict(k=100, replicas=3, master_seed=2, workers=1, cache_grid=0.1, cache_n=500, x0=np.zeros(2))
    a = lan_statistic(p, TiltSpec(u, g=_bounded_map), **kw)
    b = lan_statistic(p, TiltSpec(u, g=_bounded_map, saturation=SaturationFunction.with_knot(1.4, 0.9)), **kw)
    assert np.array_equal(a.log_lr, b.log_lr)


# ------------------------------------------------------------------ divergences


def test_f_divergence_u_zero():
    assert f_divergence_estimate(fig1_problem(0.5), TiltSpec([0.0, 0.0]), x=np.zeros(2)).estimate == 0.0


def test_kl_expansion():
    rep = f_divergence_estimate(fig1_problem(0.5), TiltSpec([0.1, 0.0]), f="kl", n=10 ** 5, seed=0)
    assert abs(rep.estimate - 0.005) < 0.001
    assert abs(rep.estimate - 0.005) < 3 * rep.standard_error + 1e-4
    assert abs(rep.prediction - 0.005) < 1e-4


def test_chi2_expansion():
    rep = f_divergence_estimate(fig1_problem(0.5), TiltSpec([0.1, 0.0]), f="chi2", n=10 ** 5, seed=0)
    assert abs(rep.estimate - 0.01) < 0.002


def test_analytic_divergences_match_quadrature():
    p = fig1_problem(0.5)
    for f, fn in (("kl", lambda r: r * math.log(r) if r > 0 else 0.0), ("chi2", lambda r: (r - 1) ** 2)):
        rep = f_divergence_estimate(p, TiltSpec([0.1, 0.0]), f=f, mode=ANALYTIC)
        oracle = quad_line(lambda t: fn(1 + H(0.1 * t)), 0.1)
        assert abs(rep.estimate - oracle) < 1e-10


def test_custom_f_needs_curvature():
    with pytest.raises(InvalidArgument):
        f_divergence_estimate(fig1_problem(0.5), TiltSpec([0.1, 0.0]), f=lambda r: (r - 1) ** 2)


# -------------------------------------------------------------------- minimax


def test_minimax_benchmark_and_zero_column():
    rep = minimax_risk_probe(fig1_problem(0.5), TiltSpec([1.0, 0.0]), k=10 ** 5, us=[np.zeros(2)],
                             replicas=100, master_seed=0)
    assert abs(rep.benchmark - 40 / 9) < 1e-12
    assert abs(rep.risks[0] - 40 / 9) <= 0.2 * 40 / 9


def test_minimax_indicator_infinite_radius():
    rep = minimax_risk_probe(fig1_problem(0.5), TiltSpec([1.0, 0.0]), k=500, loss=("indicator", math.inf),
                             replicas=5, n_benchmark=1000)
    assert np.all(rep.risks == 0.0) and rep.benchmark == 0.0
    assert len(rep.us) == 5


def test_minimax_grid_and_loss_contracts():
    grid = u_ball_grid(2.0, 100, 2)
    assert np.allclose([np.linalg.norm(u) for u in grid[1:]], math.sqrt(0.02))
    with pytest.raises(InvalidArgument):
        minimax_risk_probe(fig1_problem(0.5), TiltSpec([1.0, 0.0]), k=100, us=[np.ones(2)])
    with pytest.raises(InvalidArgument):
        make_loss("absolute")
    assert make_loss(("indicator", 1.0))(np.array([[2.0, 0.0], [0.5, 0.0]])).tolist() == [1.0, 0.0]
