import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import frobenius_inner_loop, singular_values_eig
from smrecover.core_model import (ObservationError, ObservationMatrix, Quantity, RecoveryTriple,
                                  SolverConfig, build_observation_matrix, effective_rank,
                                  entrywise_l1, frobenius_inner, frobenius_norm, nuclear_norm)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
matrices = st.tuples(st.integers(1, 6), st.integers(1, 6)).flatmap(lambda s: arrays(float, s, elements=finite))


# -- observation matrices -------------------------------------------------------

def test_unit_voltage_readings_square_to_ones():
    obs = build_observation_matrix({"A": [1.0, 1.0], "B": [1.0, 1.0]}, (0, 1800), 900, "U")
    np.testing.assert_array_equal(obs.values, [[1, 1], [1, 1]])
    assert obs.meter_ids == ("A", "B")


def test_voltage_is_squared_once():
    obs = build_observation_matrix({"A": {0.0: 1.0, 900.0: 1.02}, "B": {0.0: 1.0, 900.0: 1.0}},
                                   (0, 1800), 900, Quantity.VOLTAGE_SQUARED)
    assert obs.values[1, 0] == 1.02 * 1.02


def test_missing_sample_names_meter_and_time():
    with pytest.raises(ObservationError, match=r"missing sample: meter 'B' at t=900"):
        build_observation_matrix({"A": {0.0: 1.0, 900.0: 1.0}, "B": {0.0: 1.0}}, (0, 1800), 900, "U")


def test_short_sequence_is_a_missing_sample():
    with pytest.raises(ObservationError, match="missing sample"):
        build_observation_matrix({"A": [1.0, 1.0], "B": [1.0]}, (0, 1800), 900, "U")


def test_mismatched_units_rejected():
    with pytest.raises(ObservationError, match="mismatched units"):
        build_observation_matrix({"A": [1.0, 1.0]}, (0, 1800), 900, "U", units="V")


def test_power_requires_declared_base():
    with pytest.raises(ObservationError, match="power_base"):
        build_observation_matrix({"A": [0.1, 0.2]}, (0, 1800), 900, "P")
    obs = build_observation_matrix({"A": [0.1, 0.2]}, (0, 1800), 900, "P", power_base=1.0)
    assert obs.power_base == 1.0


def test_observation_invariants():
    with pytest.raises(ObservationError):
        ObservationMatrix("U", np.ones((2, 2)), 0, 1800, ("a",), 900)
    with pytest.raises(ObservationError):
        ObservationMatrix("U", np.ones((3, 1)), 0, 1800, ("a",), 900)
    with pytest.raises(ObservationError):
        ObservationMatrix("U", np.ones((1, 1)), 0, 900, ("a",), 900)
    with pytest.raises(ObservationError, match="NaN"):
        ObservationMatrix("P", np.array([[np.nan], [1.0]]), 0, 1800, ("a",), 900, 1.0)
    with pytest.raises(ObservationError, match="positive"):
        ObservationMatrix("U", np.array([[0.0], [1.0]]), 0, 1800, ("a",), 900)


@given(arrays(float, (4, 3), elements=st.floats(0.5, 1.5)))
def test_build_is_lossless(v):
    readings = {f"m{i}": v[:, i] for i in range(3)}
    obs = build_observation_matrix(readings, (0, 4 * 900), 900, "U")
    for i in range(3):
        for j in range(4):
            assert obs.values[j, i] == v[j, i] * v[j, i]


def test_residual_noise_is_implicit():
    raw = (np.ones((2, 2)),) * 3
    t = RecoveryTriple((np.full((2, 2), 0.5),) * 3, (np.full((2, 2), 0.25),) * 3, raw)
    for e in t.residual_noise:
        np.testing.assert_array_equal(e, 0.25)


# -- solver config ----------------------------------------------------------------

def test_omega_must_sum_to_one():
    SolverConfig(omega=(0.2, 0.3, 0.5))
    with pytest.raises(ValueError, match="omega"):
        SolverConfig(omega=(0.2, 0.3, 0.4))
    with pytest.raises(ValueError, match="omega"):
        SolverConfig(omega=(1.5, -0.5, 0.0))


def test_smoothness_parameters_positive():
    with pytest.raises(ValueError, match="mu_u"):
        SolverConfig(mu_u=0.0)
    with pytest.raises(ValueError, match="nu_q"):
        SolverConfig(nu_q=-1.0)
    with pytest.raises(ValueError, match="lambda_p"):
        SolverConfig(lambda_p=-0.1)


# -- norms --------------------------------------------------------------------------

def test_norms_of_small_examples():
    A = np.array([[1.0, -2.0], [0.0, 3.0]])
    assert entrywise_l1(A) == 6.0
    assert frobenius_norm(A) == pytest.approx(np.sqrt(14), abs=1e-15)
    assert frobenius_inner(np.eye(2), np.eye(2)) == 2.0
    assert nuclear_norm(np.zeros((3, 3))) == 0.0
    assert nuclear_norm(np.diag([3.0, 4.0])) == pytest.approx(7.0, abs=1e-12)


def test_nuclear_norm_matches_eigen_oracle():
    A = np.random.default_rng(3).normal(size=(3, 3))
    assert nuclear_norm(A) == pytest.approx(singular_values_eig(A).sum(), abs=1e-10)


def test_inner_product_matches_loop_oracle():
    rng = np.random.default_rng(4)
    A, B = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    assert frobenius_inner(A, B) == pytest.approx(frobenius_inner_loop(A, B), abs=1e-12)


def test_inner_product_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        frobenius_inner(np.ones((2, 2)), np.ones((2, 3)))


@given(matrices)
def test_frobenius_squared_is_self_inner(A):
    assert frobenius_norm(A) ** 2 == pytest.approx(frobenius_inner(A, A), rel=1e-10, abs=1e-300)


@given(matrices)
def test_norm_ordering(A):
    tol = 1e-9 * (1 + np.abs(A).max())
    assert nuclear_norm(A) >= frobenius_norm(A) - tol
    assert frobenius_norm(A) >= np.abs(A).max() - tol


@settings(max_examples=50)
@given(matrices, st.floats(-100, 100, allow_nan=False))
def test_nuclear_norm_homogeneous(A, c):
    assert nuclear_norm(c * A) == pytest.approx(abs(c) * nuclear_norm(A), rel=1e-10, abs=1e-9)


def test_effective_rank_threshold():
    assert effective_rank(np.diag([1.0, 0.02, 0.005])) == 2
    assert effective_rank(np.zeros((3, 3))) == 0
    assert effective_rank(np.outer(np.arange(1, 5), np.ones(3))) == 1
