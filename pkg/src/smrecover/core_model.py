"""Observation matrices, solver configuration and exact matrix norms."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np


class Quantity(str, enum.Enum):
    VOLTAGE_SQUARED = "U"
    ACTIVE_POWER = "P"
    REACTIVE_POWER = "Q"


class ObservationError(ValueError):
    """Raised when meter readings cannot be assembled into a matrix."""


@dataclass(frozen=True)
class ObservationMatrix:
    """m x N matrix of one measured quantity; row j is time, column i is meter.

    Voltage is stored as magnitude squared (pu^2). Powers are in pu on
    ``power_base`` (VA), which the caller must declare.
    """

    quantity: Quantity
    values: np.ndarray
    window_start: float
    window_end: float
    meter_ids: tuple
    resolution: float
    power_base: float | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "meter_ids", tuple(self.meter_ids))
        object.__setattr__(self, "quantity", Quantity(self.quantity))
        if values.ndim != 2:
            raise ObservationError("observation values must be a 2-D matrix")
        m, n = values.shape
        if n != len(self.meter_ids):
            raise ObservationError(
                f"{n} columns but {len(self.meter_ids)} meter ids")
        rows = (self.window_end - self.window_start) / self.resolution
        if abs(rows - round(rows)) > 1e-9 or round(rows) != m or m < 2:
            raise ObservationError(
                f"window [{self.window_start}, {self.window_end}) at "
                f"{self.resolution} s does not give {m} (>= 2) rows")
        if not np.all(np.isfinite(values)):
            raise ObservationError("observation matrix has NaN/Inf entries")
        if self.quantity is Quantity.VOLTAGE_SQUARED and np.any(values <= 0):
            raise ObservationError("voltage-squared entries must be positive")

    @property
    def shape(self):
        return self.values.shape

    @property
    def times(self) -> np.ndarray:
        return self.window_start + self.resolution * np.arange(self.shape[0])


def build_observation_matrix(readings: Mapping[object, Mapping[float, float] | Sequence[float]],
                             window: tuple[float, float],
                             resolution: float,
                             quantity: Quantity | str,
                             meter_ids: Sequence | None = None,
                             units: str | None = None,
                             power_base: float | None = None) -> ObservationMatrix:
    """Assemble per-meter readings into an observation matrix.

    ``readings[meter]`` is either a sequence with one value per sample
    instant of the window, or a mapping ``timestamp -> value``. Voltage
    readings are magnitudes in pu and are squared here, exactly once.

    ``units`` is optional and checked against the quantity: ``"pu"`` for
    voltage, ``"pu"`` for powers (with ``power_base`` declared).
    """
    quantity = Quantity(quantity)
    t_start, t_end = window
    m = int(round((t_end - t_start) / resolution))
    if m < 2 or abs((t_end - t_start) / resolution - m) > 1e-9:
        raise ObservationError("window must span an integer number (>= 2) of samples")
    if units is not None and units != "pu":
        raise ObservationError(
            f"mismatched units {units!r}: {quantity.name} readings must be in pu")
    if quantity is not Quantity.VOLTAGE_SQUARED and power_base is None:
        raise ObservationError("power readings need a declared power_base")
    ids = list(readings) if meter_ids is None else list(meter_ids)
    times = t_start + resolution * np.arange(m)
    values = np.empty((m, len(ids)))
    for i, meter in enumerate(ids):
        if meter not in readings:
            raise ObservationError(f"missing sample: meter {meter!r} has no readings")
        series = readings[meter]
        if isinstance(series, Mapping):
            for j, t in enumerate(times):
                key = float(t)
                if key not in series:
                    raise ObservationError(
                        f"missing sample: meter {meter!r} at t={key:g} s")
                values[j, i] = series[key]
        else:
            series = np.asarray(series, dtype=float)
            if series.shape != (m,):
                k = min(len(series), m)
                raise ObservationError(
                    f"missing sample: meter {meter!r} at t={times[k]:g} s")
            values[:, i] = series
    if quantity is Quantity.VOLTAGE_SQUARED:
        values = values * values
    return ObservationMatrix(quantity, values, t_start, t_end, tuple(ids),
                             resolution, power_base)


@dataclass(frozen=True)
class RecoveryTriple:
    """Refined matrices and asynchrony-error matrices, ordered (U, P, Q)."""

    refined: tuple
    sparse_error: tuple
    raw: tuple | None = None

    @property
    def residual_noise(self) -> tuple:
        """Implicit measurement-error term raw - refined - sparse_error."""
        if self.raw is None:
            raise ValueError("raw matrices not attached")
        return tuple(d - m - s for d, m, s in zip(self.raw, self.refined, self.sparse_error))

    @property
    def U(self):
        return self.refined[0]

    @property
    def P(self):
        return self.refined[1]

    @property
    def Q(self):
        return self.refined[2]


@dataclass(frozen=True)
class SolverConfig:
    """Hyperparameters of the multi-objective recovery.

    ``None`` entries are resolved from the data by
    :func:`smrecover.recovery_solver.resolve_config`.
    """

    lambda_u: float | None = None
    lambda_p: float | None = None
    lambda_q: float | None = None
    mu_u: float | None = None
    mu_p: float | None = None
    mu_q: float | None = None
    nu_u: float | None = None
    nu_p: float | None = None
    nu_q: float | None = None
    omega: tuple = (1 / 3, 1 / 3, 1 / 3)
    L: float | None = None
    delta_u: float | None = None
    delta_p: float | None = None
    delta_q: float | None = None
    max_outer_iters: int = 300
    max_inner_iters: int = 200
    inner_tol: float = 1e-8
    early_stop_tol: float | None = 1e-7
    coupling: bool = True
    history_weights: str = "nesterov"
    normalize: bool = True
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        omega = tuple(float(w) for w in self.omega)
        object.__setattr__(self, "omega", omega)
        if len(omega) != 3 or min(omega) < 0 or abs(sum(omega) - 1.0) > 1e-12:
            raise ValueError(f"omega must be 3 nonnegative weights summing to 1, got {omega}")
        for name in ("mu_u", "mu_p", "mu_q", "nu_u", "nu_p", "nu_q", "L"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lambda_u", "lambda_p", "lambda_q", "delta_u", "delta_p", "delta_q"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.max_outer_iters < 0 or self.max_inner_iters < 1:
            raise ValueError("iteration limits must be positive")
        if not self.inner_tol > 0:
            raise ValueError("inner_tol must be positive")
        if self.history_weights not in ("uniform", "nesterov"):
            raise ValueError("history_weights must be 'uniform' or 'nesterov'")

    @property
    def lambdas(self):
        return (self.lambda_u, self.lambda_p, self.lambda_q)

    @property
    def mus(self):
        return (self.mu_u, self.mu_p, self.mu_q)

    @property
    def nus(self):
        return (self.nu_u, self.nu_p, self.nu_q)

    @property
    def deltas(self):
        return (self.delta_u, self.delta_p, self.delta_q)


def _check_finite(A):
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    return A


def nuclear_norm(A) -> float:
    """Sum of singular values."""
    A = _check_finite(A)
    if A.size == 0:
        return 0.0
    return float(np.sum(np.linalg.svd(np.atleast_2d(A), compute_uv=False)))


def entrywise_l1(A) -> float:
    return float(np.sum(np.abs(_check_finite(A))))


def frobenius_norm(A) -> float:
    return float(np.sqrt(np.sum(_check_finite(A) ** 2)))


def frobenius_inner(A, B) -> float:
    A = _check_finite(A)
    B = _check_finite(B)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {B.shape}")
    return float(np.sum(A * B))


def effective_rank(A, rel_threshold=0.01) -> int:
    """Number of singular values above ``rel_threshold`` times the largest."""
    s = np.linalg.svd(np.asarray(A, dtype=float), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > rel_threshold * s[0]))
