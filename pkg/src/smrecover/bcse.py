"""Branch-current state estimation (weighted least squares, Gauss-Newton).

States are the real and imaginary parts of every branch current, in the
feeder's canonical branch order. Bus voltages follow from the fixed
substation voltage minus the impedance drops along the root path; bus
consumption is the voltage times the conjugate of the Kirchhoff balance
of branch currents at the bus.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .distflow import FeederModel


class EstimationError(RuntimeError):
    pass


class Kind(str, enum.Enum):
    VOLTAGE_SQUARED = "U"
    ACTIVE_POWER = "P"
    REACTIVE_POWER = "Q"
    CURRENT_REAL = "Ire"
    CURRENT_IMAG = "Iim"


@dataclass(frozen=True)
class StateVector:
    i_re: np.ndarray
    i_im: np.ndarray

    @classmethod
    def flat(cls, feeder: FeederModel) -> "StateVector":
        return cls(np.zeros(feeder.n_branches), np.zeros(feeder.n_branches))

    @classmethod
    def from_vector(cls, x) -> "StateVector":
        x = np.asarray(x, dtype=float)
        if x.ndim != 1 or x.size % 2:
            raise ValueError("state vector must have even length")
        nb = x.size // 2
        return cls(x[:nb].copy(), x[nb:].copy())

    @classmethod
    def from_currents(cls, I) -> "StateVector":
        I = np.asarray(I)
        return cls(I.real.astype(float), I.imag.astype(float))

    def __post_init__(self):
        if np.shape(self.i_re) != np.shape(self.i_im):
            raise ValueError("i_re and i_im must have equal length")
        if not (np.all(np.isfinite(self.i_re)) and np.all(np.isfinite(self.i_im))):
            raise ValueError("state has non-finite entries")

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.i_re, self.i_im])

    @property
    def currents(self) -> np.ndarray:
        return np.asarray(self.i_re) + 1j * np.asarray(self.i_im)


@dataclass(frozen=True)
class MeasurementSet:
    """Stacked measurements with diagonal WLS weights ``1 / sigma^2``.

    ``index`` refers to a bus (U, P, Q) or a branch (currents), both in the
    feeder's canonical order.
    """

    z: np.ndarray
    weights: np.ndarray
    kinds: tuple
    index: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        idx = np.asarray(self.index, dtype=int)
        kinds = tuple(Kind(k) for k in self.kinds)
        if not (len(z) == len(w) == len(kinds) == len(idx)):
            raise ValueError("z, weights, kinds and index must have equal length")
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "kinds", kinds)
        object.__setattr__(self, "index", idx)

    def __len__(self):
        return len(self.z)

    def concat(self, other: "MeasurementSet") -> "MeasurementSet":
        return MeasurementSet(np.concatenate([self.z, other.z]),
                              np.concatenate([self.weights, other.weights]),
                              self.kinds + other.kinds,
                              np.concatenate([self.index, other.index]))


def build_measurements(feeder: FeederModel, meter_nodes, u=None, p=None, q=None,
                       sigma=(0.01, 0.01, 0.01)) -> MeasurementSet:
    """Measurement set for one time instant from per-meter U, P, Q values."""
    cols = feeder.meter_indices(meter_nodes)
    z, w, kinds, idx = [], [], [], []
    for values, kind, s in ((u, Kind.VOLTAGE_SQUARED, sigma[0]), (p, Kind.ACTIVE_POWER, sigma[1]),
                            (q, Kind.REACTIVE_POWER, sigma[2])):
        if values is None:
            continue
        values = np.asarray(values, dtype=float)
        if values.shape != cols.shape:
            raise ValueError(f"{kind.name}: expected {cols.size} values, got {values.shape}")
        if not s > 0:
            raise ValueError(f"{kind.name}: measurement std must be positive, got {s}")
        z.append(values)
        w.append(np.full(cols.size, 1.0 / s ** 2))
        kinds += [kind] * cols.size
        idx.append(cols)
    return MeasurementSet(np.concatenate(z), np.concatenate(w), tuple(kinds), np.concatenate(idx))


def current_measurements(branches, i_re=None, i_im=None, sigma=0.01) -> MeasurementSet:
    """Synchronized branch-current measurements (the MV sensor slot)."""
    branches = np.asarray(branches, dtype=int)
    z, kinds, idx = [], [], []
    for values, kind in ((i_re, Kind.CURRENT_REAL), (i_im, Kind.CURRENT_IMAG)):
        if values is not None:
            z.append(np.asarray(values, dtype=float))
            kinds += [kind] * branches.size
            idx.append(branches)
    z = np.concatenate(z)
    return MeasurementSet(z, np.full(z.size, 1.0 / sigma ** 2), tuple(kinds), np.concatenate(idx))


def _network(x, feeder):
    nb = feeder.n_branches
    x = np.asarray(x, dtype=float)
    if x.shape != (2 * nb,):
        raise ValueError(f"state must have length {2 * nb}")
    I = x[:nb] + 1j * x[nb:]
    Az = feeder.path_matrix * feeder.z
    V = np.sqrt(feeder.u0) - Az @ I
    IL = feeder.incidence @ I
    return I, Az, V, IL


def evaluate(x, meas: MeasurementSet, feeder: FeederModel) -> tuple[np.ndarray, np.ndarray]:
    """Measurement values ``h(x)`` and Jacobian ``H`` for a whole set."""
    nb = feeder.n_branches
    I, Az, V, IL = _network(x, feeder)
    C = feeder.incidence
    S = V * np.conj(IL)
    # complex partials w.r.t. (I_re, I_im)
    dV = np.hstack([-Az, -1j * Az])
    dS = dV * np.conj(IL)[:, None] + V[:, None] * np.hstack([C, -1j * C])
    dU = 2.0 * np.real(np.conj(V)[:, None] * dV)
    h = np.empty(len(meas))
    H = np.zeros((len(meas), 2 * nb))
    for kind in set(meas.kinds):
        rows = np.flatnonzero([k is kind for k in meas.kinds])
        i = meas.index[rows]
        if kind is Kind.VOLTAGE_SQUARED:
            h[rows] = np.abs(V[i]) ** 2
            H[rows] = dU[i]
        elif kind is Kind.ACTIVE_POWER:
            h[rows] = S[i].real
            H[rows] = dS[i].real
        elif kind is Kind.REACTIVE_POWER:
            h[rows] = S[i].imag
            H[rows] = dS[i].imag
        elif kind is Kind.CURRENT_REAL:
            h[rows] = I[i].real
            H[rows, i] = 1.0
        else:
            h[rows] = I[i].imag
            H[rows, nb + i] = 1.0
    return h, H


def measurement_fn(x, kind, index: int, feeder: FeederModel) -> tuple[float, np.ndarray]:
    """Value and partial derivatives of a single measurement function."""
    try:
        kind = Kind(kind)
    except ValueError:
        raise ValueError(f"unknown measurement kind {kind!r}") from None
    meas = MeasurementSet(np.zeros(1), np.ones(1), (kind,), np.array([index]))
    h, H = evaluate(x, meas, feeder)
    return float(h[0]), H[0]


@dataclass(frozen=True)
class EstimateResult:
    state: StateVector
    residuals: list
    iterations: int

    @property
    def J(self) -> float:
        return self.residuals[-1]


def weighted_residual(x, meas: MeasurementSet, feeder: FeederModel) -> float:
    h, _ = evaluate(x, meas, feeder)
    return float(np.sum(meas.weights * (meas.z - h) ** 2))


def estimate(meas: MeasurementSet, feeder: FeederModel, init: StateVector | str | None = None,
             k_max: int = 20, tol: float = 1e-9, seed: int | None = None) -> EstimateResult:
    """Gauss-Newton WLS: ``x += G^-1 H^T W (z - h(x))`` with ``G = H^T W H``.

    ``init`` is a state (warm start), ``"random"`` or ``None`` for a flat
    start. ``residuals[k]`` is the weighted residual J after ``k`` updates.
    """
    nb = feeder.n_branches
    if len(meas) < 2 * nb:
        raise EstimationError(
            f"unobservable: {len(meas)} measurements for {2 * nb} states")
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    if init is None:
        x = np.zeros(2 * nb)
    elif isinstance(init, str):
        if init != "random":
            raise ValueError(f"unknown initialisation {init!r}")
        x = np.random.default_rng(seed).normal(0.0, 1e-3, 2 * nb)
    else:
        x = np.asarray(init.vector, dtype=float).copy()
    W = meas.weights
    residuals = []
    k = 0
    for k in range(1, k_max + 1):
        h, H = evaluate(x, meas, feeder)
        r = meas.z - h
        residuals.append(float(np.sum(W * r * r)))
        G = H.T @ (W[:, None] * H)
        s = np.linalg.svd(G, compute_uv=False)
        if s[-1] < 1e-10 * s[0]:
            _, _, Vt = np.linalg.svd(G)
            weak = [f"{'Ire' if j < nb else 'Iim'}[{feeder.bus_ids[j % nb]}]"
                    for j in np.flatnonzero(np.abs(Vt[-1]) > 0.1)]
            raise EstimationError(f"singular gain matrix; unobservable direction involves {weak}")
        dx = np.linalg.solve(G, H.T @ (W * r))
        x = x + dx
        if np.linalg.norm(dx) < tol:
            break
    residuals.append(weighted_residual(x, meas, feeder))
    return EstimateResult(StateVector.from_vector(x), residuals, k)


def mpe(x_true, x_est, signed: bool = False, exclude_zero: bool = False) -> float:
    """Mean percentage error between true and estimated states.

    The default averages absolute relative errors. ``signed=True`` gives
    the plain signed sum of relative errors, kept for comparison only.
    """
    x_true = np.asarray(x_true, dtype=float)
    x_est = np.asarray(x_est, dtype=float)
    if x_true.shape != x_est.shape:
        raise ValueError("x_true and x_est must have equal length")
    zero = x_true == 0
    if np.any(zero):
        if not exclude_zero:
            raise ValueError("true state has zero entries; use exclude_zero=True to skip them")
        x_true, x_est = x_true[~zero], x_est[~zero]
    rel = (x_true - x_est) / x_true
    if signed:
        return float(100.0 * np.sum(rel))
    return float(100.0 * np.mean(np.abs(rel)))
