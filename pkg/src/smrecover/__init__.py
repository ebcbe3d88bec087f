"""Recovery of asynchronous smart-meter data and branch-current state estimation."""

from .bcse import MeasurementSet, StateVector, estimate, measurement_fn, mpe
from .core_model import (ObservationMatrix, Quantity, RecoveryTriple, SolverConfig,
                         build_observation_matrix, entrywise_l1, frobenius_inner, frobenius_norm,
                         nuclear_norm)
from .distflow import FeederModel, distflow_residual, lin_distflow_voltage, sensitivity_matrices
from .recovery_solver import recover

__version__ = "0.1.0"

__all__ = [
    "FeederModel", "MeasurementSet", "ObservationMatrix", "Quantity", "RecoveryTriple",
    "SolverConfig", "StateVector", "build_observation_matrix", "distflow_residual",
    "entrywise_l1", "estimate", "frobenius_inner", "frobenius_norm", "lin_distflow_voltage",
    "measurement_fn", "mpe", "nuclear_norm", "recover", "sensitivity_matrices",
]
