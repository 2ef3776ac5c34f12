from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from perfsa.covariance import (CentralDifference, asymptotic_covariance, covariance_report, estimate_sigma,
                               estimate_w, fig1_target, jacobian_positivity_check, mean_map_R)
from perfsa.errors import InsufficientSamples, SingularJacobian, UnsupportedMode
from perfsa.problem import (Constants, CustomDecision, CustomDistribution, FeasibleSet, MonteCarlo,
                            MultiplayerProduct, MultiplayerQuadratic, PlayerBlock, PlayerLoss, Problem,
                            fig1_problem, location_scale_problem, point_mass_problem)


def test_mean_map_examples():
    assert np.allclose(mean_map_R(fig1_problem(0.5), [1.0, 0.0]), [1.0, -0.5])
    assert np.allclose(mean_map_R(fig1_problem(0.0), [2.0, 3.0]), [2.0, 3.0])
    mc = mean_map_R(fig1_problem(0.5), [1.0, 0.0], MonteCarlo(10 ** 6, 3))
    assert np.all(np.abs(mc - [1.0, -0.5]) < 5e-3)


def test_mean_map_vanishes_at_equilibrium():
    from perfsa.equilibrium import find_equilibrium
    p = location_scale_problem([[0.2, 0.1], [-0.1, 0.3]], base_mean=[1.0, -2.0])
    rep = find_equilibrium(p, [0.0, 0.0], outer_tol=1e-11)
    assert np.linalg.norm(mean_map_R(p, rep.x_star)) <= 1e-10


def test_sigma_examples():
    assert np.array_equal(estimate_sigma(fig1_problem(0.5), np.zeros(2)), np.eye(2))
    assert np.array_equal(estimate_sigma(point_mass_problem(2), np.zeros(2)), np.zeros((2, 2)))
    mc = estimate_sigma(fig1_problem(0.5), np.zeros(2), MonteCarlo(10 ** 6, 0))
    assert np.linalg.norm(mc - np.eye(2), 2) < 0.01


def test_sigma_mc_needs_samples():
    with pytest.raises(InsufficientSamples):
        estimate_sigma(fig1_problem(0.5), np.zeros(2), MonteCarlo(2, 0))


def test_w_examples():
    _, _, w = estimate_w(fig1_problem(0.5), np.zeros(2))
    assert np.array_equal(w, [[1.0, -0.5], [-0.5, 1.0]])
    static, dynamic, w = estimate_w(fig1_problem(0.0), np.zeros(2))
    assert np.array_equal(w, np.eye(2)) and not dynamic.any()


@pytest.mark.parametrize("rho", [0.0, 0.25, 0.5, 0.9])
def test_w_central_difference_matches_closed_form(rho):
    p = fig1_problem(rho)
    ws = estimate_w(p, np.zeros(2))
    fd = estimate_w(p, np.zeros(2), CentralDifference(1e-4))
    for a, b in zip(ws, fd):
        assert np.max(np.abs(a - b)) < 1e-7


def _nonlinear_problem():
    # mean 0.4 tanh(x), G = x + 0.1 x^3 - z; exact Jacobians are diagonal
    dist = CustomDistribution(lambda x, rng: 0.4 * np.tanh(x) + rng.standard_normal(2), 2, 2)
    dec = CustomDecision(lambda x, z: x + 0.1 * x ** 3 - z, 2, 2)
    return Problem(FeasibleSet.whole_space(2), dist, dec, Constants(1.0, 1.0, 0.4))


def test_central_difference_second_order():
    p = _nonlinear_problem()
    x = np.array([0.5, -0.3])
    exact_static = np.diag(1 + 0.3 * x ** 2)
    exact_dynamic = -np.diag(0.4 / np.cosh(x) ** 2)
    errs = []
    for h in (0.2, 0.1, 0.05):
        s, dyn, _ = estimate_w(p, x, CentralDifference(h, MonteCarlo(2000, 7)), check_interior=False)
        errs.append(max(np.abs(s - exact_static).max(), np.abs(dyn - exact_dynamic).max()))
    assert errs[0] / errs[1] >= 3 and errs[1] / errs[2] >= 3


def test_w_rejects_boundary_equilibrium():
    p = fig1_problem(0.5, feasible=FeasibleSet.box([0.0, 0.0], [1.0, 1.0]))
    with pytest.raises(UnsupportedMode):
        estimate_w(p, np.zeros(2), CentralDifference(1e-4))


def test_asymptotic_covariance_rho_half_exact():
    # 2x2 inverse in exact rationals
    r = Fraction(1, 2)
    det = 1 - r * r
    inv = [[1 / det, r / det], [r / det, 1 / det]]
    exact = [[sum(inv[i][k] * inv[j][k] for k in range(2)) for j in range(2)] for i in range(2)]
    assert exact == [[Fraction(20, 9), Fraction(16, 9)], [Fraction(16, 9), Fraction(20, 9)]]
    out = asymptotic_covariance(np.eye(2), [[1.0, -0.5], [-0.5, 1.0]])
    assert np.max(np.abs(out - np.array(exact, dtype=float))) < 1e-10
    assert np.allclose(out, np.linalg.inv([[1, -0.5], [-0.5, 1]]) @ np.linalg.inv([[1, -0.5], [-0.5, 1]]).T)


def test_asymptotic_covariance_identity_and_ill_conditioned():
    assert np.allclose(asymptotic_covariance(np.eye(2), np.eye(2)), np.eye(2))
    out = fig1_target(0.9)
    vals, vecs = np.linalg.eigh(out)
    assert abs(vals.max() - 100.0) < 1e-9
    assert abs(abs(vecs[:, -1] @ np.array([1, 1]) / np.sqrt(2)) - 1) < 1e-12
    assert abs(np.linalg.det([[1, -0.9], [-0.9, 1]]) - 0.19) < 1e-12


def test_asymptotic_covariance_singular():
    with pytest.raises(SingularJacobian):
        asymptotic_covariance(np.eye(2), [[1.0, 1.0], [1.0, 1.0]])


def test_positivity_examples():
    ok, margin = jacobian_positivity_check([[1, -0.5], [-0.5, 1]], 1.0, 0.5, 1.0)
    assert ok and abs(margin) < 1e-12
    ok, margin = jacobian_positivity_check(np.eye(2), 1.0, 0.0, 1.0)
    assert ok and abs(margin) < 1e-12
    ok, margin = jacobian_positivity_check(0.1 * np.eye(2), 1.0, 0.5, 1.0)
    assert not ok and abs(margin + 0.4) < 1e-12


def test_positivity_on_random_location_scale():
    rng = np.random.default_rng(0)
    for _ in range(50):
        A = rng.normal(scale=0.3, size=(2, 2))
        p = location_scale_problem(A)
        c = p.resolved_constants()
        _, _, w = estimate_w(p, np.zeros(2))
        assert jacobian_positivity_check(w, c.alpha, c.gamma, c.beta)[0]


def test_r_lipschitz_bound_and_equality():
    rng = np.random.default_rng(1)
    for rho in (0.25, 0.5, 0.9):
        p = fig1_problem(rho)
        for _ in range(200):
            x, xp = rng.normal(size=(2, 2)) * 3
            lhs = np.linalg.norm(mean_map_R(p, x) - mean_map_R(p, xp))
            assert lhs <= (1 + rho) * np.linalg.norm(x - xp) + 1e-12
        v = np.array([1.0, -1.0])
        assert abs(np.linalg.norm(mean_map_R(p, v) - mean_map_R(p, 0 * v)) - (1 + rho) * np.linalg.norm(v)) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=4, max_size=4), st.lists(st.floats(-0.4, 0.4), min_size=4, max_size=4))
def test_covariance_symmetric_psd(b, a):
    B = np.array(b).reshape(2, 2)
    sigma = B @ B.T
    w = np.eye(2) + np.array(a).reshape(2, 2)
    out = asymptotic_covariance(sigma, w)
    assert np.max(np.abs(out - out.T)) <= 1e-12 * (1 + np.abs(out).max())
    assert np.linalg.eigvalsh(out).min() >= -1e-10 * (1 + np.abs(out).max())


def test_multiplayer_block_formula():
    blocks = [PlayerBlock([[0.2]], [[0.1]]), PlayerBlock([[-0.3]], [[0.25]])]
    losses = [PlayerLoss([[2.0]], [[0.4]], [[1.0]]), PlayerLoss([[1.5]], [[-0.3]], [[0.5]])]
    p = Problem(FeasibleSet.whole_space(2), MultiplayerProduct(blocks), MultiplayerQuadratic(losses))
    # row i: Hessian of l_i in x plus (d/dz grad l_i)(A_i, A_-i), placed in player order
    expected = np.zeros((2, 2))
    for i, (blk, loss) in enumerate(zip(blocks, losses)):
        j = 1 - i
        hzx = -np.asarray(loss.B)[0, 0]
        expected[i, i] = np.asarray(loss.P)[0, 0] + hzx * np.asarray(blk.A_own)[0, 0]
        expected[i, j] = np.asarray(loss.Q)[0, 0] + hzx * np.asarray(blk.A_other)[0, 0]
    _, _, w = estimate_w(p, np.zeros(2), CentralDifference(1e-4))
    assert np.max(np.abs(w - expected)) < 1e-7
    assert np.max(np.abs(estimate_w(p, np.zeros(2))[2] - expected)) < 1e-12


def test_report_recompute_and_provenance():
    rep = covariance_report(fig1_problem(0.5), np.zeros(2), MonteCarlo(10 ** 4, 2), CentralDifference(1e-4))
    assert np.max(np.abs(rep.recompute() - rep.asymptotic_covariance)) <= 1e-10 * np.abs(rep.asymptotic_covariance).max()
    d = rep.to_dict()
    assert d["provenance"]["sigma"]["n"] == 10 ** 4 and d["provenance"]["w"]["h"] == 1e-4
    assert rep.min_real_eigenpart_of_w >= 0.5 - 1e-6
    assert not rep.near_singular
