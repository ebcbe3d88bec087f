import numpy as np
import pytest

from oracles import prox_qp_cvxpy
from smrecover.distflow import Branch, FeederModel, sensitivity_matrices
from smrecover.feasible_projection import (Coupling, FeasibleSetSpec, ProxConvergenceError, ProxSubproblem,
                                           project_ball_pair, project_feasible, solve_prox)


def two_node_instance(seed, m=3):
    """Seeded prox subproblem on a 2-meter feeder (m x 2 matrices)."""
    rng = np.random.default_rng(seed)
    f = FeederModel("s", (Branch("s", "a", 0.05, 0.03), Branch("a", "b", 0.04, 0.02)))
    R, X = sensitivity_matrices(f, ["a", "b"])
    P = rng.uniform(0.1, 0.5, (m, 2))
    Q = 0.3 * P
    U = P @ R.T + Q @ X.T + 1.0
    raw = np.stack([U, P, Q]) + rng.normal(0, 0.02, (3, m, 2))
    radii = tuple(rng.uniform(0.005, 0.03, 3))
    sub = ProxSubproblem(rng.normal(0, 0.5, (3, m, 2)), rng.normal(0, 0.5, (3, m, 2)),
                         raw + rng.normal(0, 0.05, raw.shape), rng.normal(0, 0.05, raw.shape), 10.0)
    return sub, FeasibleSetSpec(raw, radii, Coupling(R, X, 1.0))


def test_ball_pair_interior_is_identity():
    M, S = np.ones((2, 2)), np.zeros((2, 2))
    M2, S2 = project_ball_pair(M, S, np.ones((2, 2)) + 0.01, 1.0)
    assert M2 is M and S2 is S


def test_ball_pair_symmetric_split():
    M, S = project_ball_pair(np.zeros((1, 1)), np.zeros((1, 1)), np.array([[2.0]]), 0.0)
    np.testing.assert_allclose(M, [[1.0]])
    np.testing.assert_allclose(S, [[1.0]])


@pytest.mark.parametrize("seed", range(5))
def test_ball_pair_lands_on_sphere(seed):
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(3, 4))
    Mc, Sc = rng.normal(size=(2, 3, 4))
    eps = 0.3
    M, S = project_ball_pair(Mc, Sc, raw, eps)
    D = raw - Mc - Sc
    assert np.linalg.norm(D) > eps
    assert np.linalg.norm(raw - M - S) == pytest.approx(eps, abs=1e-12)
    # line-search oracle: the shift is along D and equal for M and S
    t = (1 - eps / np.linalg.norm(D)) / 2
    np.testing.assert_allclose(M, Mc + t * D, atol=1e-12)
    np.testing.assert_allclose(S, Sc + t * D, atol=1e-12)
    M2, S2 = project_ball_pair(M, S, raw, eps)
    np.testing.assert_allclose(M2, M, atol=1e-12)
    np.testing.assert_allclose(S2, S, atol=1e-12)


def test_prox_of_feasible_center_is_center():
    sub, feas = two_node_instance(0)
    M = feas.coupling.project(feas.raw)
    zero = np.zeros_like(M)
    M_out, S_out = solve_prox(ProxSubproblem(zero, zero, M, feas.raw - M, 5.0), feas)
    np.testing.assert_allclose(M_out, M, atol=1e-12)
    np.testing.assert_allclose(S_out, feas.raw - M, atol=1e-12)


def test_kkt_one_by_one_zero_radius():
    # no coupling, raw = 0, eps = 0: S = -M, so minimise g_M M + g_S S + L/2 (M-c)^2 + L/2 (S-d)^2
    # with S = -M gives M = (L c - L d - g_M + g_S) / (2 L)
    gM, gS, c, d, L = 0.7, -0.2, 0.3, 0.1, 2.0
    feas = FeasibleSetSpec(np.zeros((3, 1, 1)), (0.0, 0.0, 0.0), None)
    sub = ProxSubproblem(np.full((3, 1, 1), gM), np.full((3, 1, 1), gS), np.full((3, 1, 1), c),
                         np.full((3, 1, 1), d), L)
    M, S = solve_prox(sub, feas)
    expected = (L * c - L * d - gM + gS) / (2 * L)
    np.testing.assert_allclose(M, expected, atol=1e-15)
    np.testing.assert_allclose(S, -expected, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_prox_matches_conic_oracle(seed):
    sub, feas = two_node_instance(seed)
    M, S = solve_prox(sub, feas, tol=1e-12, max_iter=5000)
    Mo, So = prox_qp_cvxpy(sub.grad_M, sub.grad_S, sub.center_M, sub.center_S, sub.L, feas.raw, feas.radii,
                           feas.coupling.R, feas.coupling.X, feas.coupling.u0)
    err = np.sqrt(np.sum((M - Mo) ** 2) + np.sum((S - So) ** 2))
    assert err < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_prox_output_feasible_and_locally_optimal(seed):
    sub, feas = two_node_instance(seed)
    M, S = solve_prox(sub, feas, tol=1e-10, max_iter=5000)
    coup, excess = feas.violation(M, S)
    assert coup < 1e-10 and excess < 1e-8
    base = sub.objective(M, S)
    rng = np.random.default_rng(100 + seed)
    for _ in range(20):
        dM, dS = 1e-3 * rng.normal(size=(2,) + M.shape)
        Mp, Sp = project_feasible(M + dM, S + dS, feas, tol=1e-12, max_iter=5000)
        assert sub.objective(Mp, Sp) >= base - 1e-8


def test_prox_without_coupling_is_ball_projection():
    sub, feas = two_node_instance(7)
    feas = FeasibleSetSpec(feas.raw, feas.radii, None)
    M, S = solve_prox(sub, feas)
    Mo, So = prox_qp_cvxpy(sub.grad_M, sub.grad_S, sub.center_M, sub.center_S, sub.L, feas.raw, feas.radii)
    np.testing.assert_allclose(M, Mo, atol=1e-6)
    np.testing.assert_allclose(S, So, atol=1e-6)


def test_nonconvergence_carries_last_iterate():
    sub, feas = two_node_instance(1)
    with pytest.raises(ProxConvergenceError) as info:
        solve_prox(sub, feas, tol=1e-15, max_iter=1)
    assert info.value.M.shape == feas.raw.shape
    assert info.value.gap > 0


def test_argument_checks():
    sub, feas = two_node_instance(0)
    with pytest.raises(ValueError, match="L"):
        solve_prox(ProxSubproblem(sub.grad_M, sub.grad_S, sub.center_M, sub.center_S, 0.0), feas)
    with pytest.raises(ValueError, match="tol"):
        solve_prox(sub, feas, tol=0.0)
    with pytest.raises(ValueError, match="radii"):
        FeasibleSetSpec(feas.raw, (1.0, -1.0, 1.0))
    with pytest.raises(ValueError, match="coupling size"):
        FeasibleSetSpec(feas.raw, feas.radii, Coupling(-np.eye(3), -np.eye(3), 1.0))


def test_scaled_coupling_is_equivalent():
    sub, feas = two_node_instance(3)
    c = feas.coupling
    scales = np.array([2.0, 0.5, 0.25])
    M = feas.raw
    scaled = c.scaled(scales)
    np.testing.assert_allclose(scaled.residual(M / scales[:, None, None]), c.residual(M) / 2.0, atol=1e-14)
