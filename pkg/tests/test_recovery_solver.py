import numpy as np
import pytest

from smrecover.core_model import ObservationMatrix, Quantity, SolverConfig, effective_rank
from smrecover.distflow import sensitivity_matrices
from smrecover.feasible_projection import Coupling
from smrecover.recovery_solver import (RecoveryError, RecoveryProblem, SolverState, aggregate_gradients,
                                       combination_weights, nesterov_step, recover, resolve_config)
from smrecover.smooth_norms import smoothed_l1, smoothed_nuclear
from smrecover.synthesis import planted_structure, random_feeder


def planted(seed, n_nodes=11, depth=4, **kw):
    f = random_feeder(n_nodes, depth, np.random.default_rng(seed))
    return planted_structure(f, seed=seed, **kw)


def problem_for(inst, config=SolverConfig()):
    R, X = sensitivity_matrices(inst.feeder, inst.raw[0].meter_ids)
    raw = np.stack([o.values for o in inst.raw])
    return RecoveryProblem.build(raw, config, Coupling(R, X, inst.feeder.u0))


def no_early_stop(**kw):
    return SolverConfig(early_stop_tol=None, **kw)


# -- combination weights ------------------------------------------------------------

def test_first_combination_weights():
    assert combination_weights(0) == pytest.approx((1 / 3, 2 / 3), abs=1e-16)


@pytest.mark.parametrize("k", [0, 1, 10, 1000])
def test_combination_weights_sum_to_one(k):
    wy, wz = combination_weights(k)
    assert wy + wz == 1.0


def test_combination_weights_approach_current_step():
    wy, wz = combination_weights(10 ** 6)
    assert wy == pytest.approx(1.0, abs=1e-5) and wz == pytest.approx(0.0, abs=1e-5)


# -- gradients -------------------------------------------------------------------------

def test_zero_triple_has_zero_gradients():
    state = SolverState.initial(problem_for(planted(0)))
    state.M = np.zeros_like(state.M)
    gM, gS = aggregate_gradients(state)
    assert not gM.any() and not gS.any()


def test_weight_annihilation():
    state = SolverState.initial(problem_for(planted(1), SolverConfig(omega=(1, 0, 0))))
    state.S = np.random.default_rng(0).normal(size=state.S.shape)
    gM, gS = aggregate_gradients(state)
    assert not gM[1:].any() and not gS[1:].any()
    assert np.abs(gM[0]).max() > 0


def test_gradients_match_componentwise_recomputation():
    p = problem_for(planted(2), SolverConfig(omega=(0.2, 0.5, 0.3)))
    state = SolverState.initial(p)
    rng = np.random.default_rng(3)
    state.M = state.M + 0.1 * rng.normal(size=state.M.shape)
    state.S = 0.1 * rng.normal(size=state.S.shape)
    gM, gS = aggregate_gradients(state)
    for k in range(3):
        np.testing.assert_allclose(gM[k], p.omega[k] * smoothed_nuclear(state.M[k], p.mus[k]).gradient,
                                   rtol=0, atol=1e-12)
        np.testing.assert_allclose(gS[k], p.omega[k] * p.lambdas[k] * smoothed_l1(state.S[k], p.nus[k]).gradient,
                                   rtol=0, atol=1e-12)


# -- defaults and steps ------------------------------------------------------------

def test_resolved_defaults():
    inst = planted(0)
    raw = np.stack([o.values for o in inst.raw])
    cfg = resolve_config(SolverConfig(), raw)
    m, n = raw.shape[1:]
    assert cfg.lambdas == pytest.approx((1 / np.sqrt(max(m, n)),) * 3)
    assert cfg.delta_p == pytest.approx(0.01 * np.sqrt(np.mean(raw[1] ** 2)))
    assert cfg.mu_u == pytest.approx(1e-3 * np.linalg.svd(raw[0], compute_uv=False)[0])


def test_step_beyond_budget_rejected():
    state = SolverState.initial(problem_for(planted(0), SolverConfig(max_outer_iters=0)))
    with pytest.raises(RecoveryError, match="budget"):
        nesterov_step(state)


def test_step_appends_trace_and_increments():
    state = SolverState.initial(problem_for(planted(0)))
    s1 = nesterov_step(state)
    s2 = nesterov_step(s1)
    assert (s1.k, s2.k) == (1, 2)
    assert [r.iteration for r in s2.trace] == [1, 2]
    assert s2.trace[-1].smoothed_objective == pytest.approx(s2.problem.smoothed_objective(s2.M, s2.S))


# -- recover ------------------------------------------------------------------------

def test_zero_iterations_returns_initialization():
    inst = planted(0)
    r = recover(*inst.raw, inst.feeder, SolverConfig(max_outer_iters=0))
    assert r.iterations == 0 and r.trace == []
    for M, S, o in zip(r.triple.refined, r.triple.sparse_error, inst.raw):
        np.testing.assert_allclose(M, o.values, rtol=1e-15)
        assert not S.any()


@pytest.mark.parametrize("seed", range(3))
def test_planted_active_power_recovered(seed):
    inst = planted(seed)
    r = recover(*inst.raw, inst.feeder)
    P = r.triple.P
    assert np.linalg.norm(P - inst.truth[1]) / np.linalg.norm(inst.truth[1]) <= 0.05
    # the recovered matrices are closer to the truth than the raw ones
    for k in range(3):
        assert np.linalg.norm(r.triple.refined[k] - inst.truth[k]) < np.linalg.norm(inst.raw[k].values - inst.truth[k])


def test_consistent_data_is_a_fixed_point():
    inst = planted(0, n_nodes=6, depth=3, m=12, spike_fraction=0.0)
    nu = 1e-10
    cfg = no_early_stop(delta_u=0.0, delta_p=0.0, delta_q=0.0, nu_u=nu, nu_p=nu, nu_q=nu, max_outer_iters=10)
    r = recover(*inst.raw, inst.feeder, cfg)
    assert r.iterations == 10
    for S in r.triple.sparse_error:
        assert np.abs(S).max() <= 1e-8


def test_fixed_point_drift_scales_with_huber_width():
    # the Huber gradient vanishes only at S = 0, so the drift off the initial point is O(nu)
    inst = planted(0, n_nodes=6, depth=3, m=12, spike_fraction=0.0)
    drift = []
    for nu in (1e-6, 1e-3):
        cfg = no_early_stop(delta_u=0.0, delta_p=0.0, delta_q=0.0, nu_u=nu, nu_p=nu, nu_q=nu, max_outer_iters=10)
        r = recover(*inst.raw, inst.feeder, cfg)
        drift.append(max(np.abs(S).max() for S in r.triple.sparse_error))
    assert drift[0] / drift[1] == pytest.approx(1e-3, rel=0.5)


@pytest.mark.parametrize("seed", range(3))
def test_iterates_feasible_and_objective_decreases(seed):
    inst = planted(seed)
    r = recover(*inst.raw, inst.feeder, SolverConfig(max_outer_iters=60))
    assert all(row.max_violation <= 1e-6 for row in r.trace)
    assert r.trace[-1].smoothed_objective <= r.initial_objective
    assert effective_rank(r.triple.U) <= effective_rank(inst.raw[0].values)
    assert all(row.distflow_residual < 1e-8 for row in r.trace)


def test_doubling_lambdas_changes_only_sparse_term():
    inst = planted(4)
    base = recover(*inst.raw, inst.feeder, SolverConfig(max_outer_iters=20))
    lam = base.problem.lambdas
    doubled = problem_for(inst, SolverConfig(lambda_u=2 * lam[0], lambda_p=2 * lam[1], lambda_q=2 * lam[2]))
    p = base.problem
    M = np.stack(base.triple.refined) / p.scales[:, None, None]
    S = np.stack(base.triple.sparse_error) / p.scales[:, None, None]
    g1, s1 = p.split_objective(M, S)
    g2, s2 = doubled.split_objective(M, S)
    assert g2 == pytest.approx(g1, rel=1e-13)
    assert s2 == pytest.approx(2 * s1, rel=1e-13)
    assert base.trace[-1].smoothed_objective == pytest.approx(g1 + s1, rel=1e-12)


def test_trace_table_header():
    inst = planted(0)
    r = recover(*inst.raw, inst.feeder, SolverConfig(max_outer_iters=2))
    lines = r.trace_table().splitlines()
    assert lines[0] == "iteration,smoothed_objective,exact_objective,distflow_residual,step_norm,max_violation"
    assert len(lines) == 3


def test_input_validation():
    inst = planted(0)
    U, P, Q = inst.raw
    short = ObservationMatrix(Quantity.REACTIVE_POWER, Q.values[:-1], 0.0, (Q.values.shape[0] - 1) * 900.0,
                              Q.meter_ids, 900.0, 1.0)
    with pytest.raises(RecoveryError, match="shape"):
        recover(U, P, short, inst.feeder)
    swapped = ObservationMatrix(Quantity.REACTIVE_POWER, Q.values, 0.0, Q.window_end, Q.meter_ids[::-1], 900.0, 1.0)
    with pytest.raises(RecoveryError, match="ordering"):
        recover(U, P, swapped, inst.feeder)
    with pytest.raises(RecoveryError, match="feeder"):
        recover(U, P, Q, None)
    with pytest.raises(RecoveryError, match="ObservationMatrix"):
        recover(U.values, P, Q, inst.feeder)
