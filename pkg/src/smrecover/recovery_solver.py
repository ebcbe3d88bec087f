"""Multi-objective PCP recovery with a Nesterov smoothed first-order method.

The three per-quantity objectives ``||M_k||_* + lambda_k ||S_k||_1`` are
smoothed, combined with weights ``omega`` and minimised over the feasible
set of :mod:`smrecover.feasible_projection`.

With ``config.normalize`` each quantity is divided by the RMS of its raw
matrix before solving, so the objectives (and the weights ``omega``) are
dimensionless; results are scaled back on output.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .core_model import (ObservationMatrix, RecoveryTriple, SolverConfig, entrywise_l1,
                         nuclear_norm)
from .distflow import FeederModel, distflow_residual, sensitivity_matrices
from .feasible_projection import (Coupling, FeasibleSetSpec, ProxConvergenceError,
                                  ProxSubproblem, solve_prox)
from .smooth_norms import smoothed_l1, smoothed_nuclear

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("iteration", "smoothed_objective", "exact_objective", "distflow_residual",
                 "step_norm", "max_violation")


class RecoveryError(RuntimeError):
    """Recovery could not start or a subproblem failed."""


def resolve_config(config: SolverConfig, raw) -> SolverConfig:
    """Fill data-dependent defaults (original units) from the raw matrices."""
    raw = np.asarray(raw, dtype=float)
    m, n = raw.shape[1:]
    updates = {}
    for k, tag in enumerate("upq"):
        if getattr(config, f"lambda_{tag}") is None:
            updates[f"lambda_{tag}"] = 1.0 / np.sqrt(max(m, n))
        if getattr(config, f"mu_{tag}") is None:
            top = np.linalg.svd(raw[k], compute_uv=False)[0]
            updates[f"mu_{tag}"] = 1e-3 * top if top > 0 else 1e-3
        if getattr(config, f"nu_{tag}") is None:
            big = float(np.max(np.abs(raw[k])))
            updates[f"nu_{tag}"] = 1e-3 * big if big > 0 else 1e-3
        if getattr(config, f"delta_{tag}") is None:
            updates[f"delta_{tag}"] = 0.01 * _rms(raw[k])
    return replace(config, **updates)


def _rms(A) -> float:
    return float(np.sqrt(np.mean(np.square(A))))


@dataclass(frozen=True)
class RecoveryProblem:
    """Everything fixed for one window: raw data, scaling and feasible set.

    ``feas`` and the smoothing parameters below are in solver (scaled) units.
    """

    raw: np.ndarray
    config: SolverConfig
    scales: np.ndarray
    feas: FeasibleSetSpec
    coupling: Coupling | None

    @classmethod
    def build(cls, raw, config: SolverConfig, coupling: Coupling | None) -> "RecoveryProblem":
        raw = np.asarray(raw, dtype=float)
        config = resolve_config(config, raw)
        if config.normalize:
            scales = np.array([_rms(r) or 1.0 for r in raw])
        else:
            scales = np.ones(3)
        m, n = raw.shape[1:]
        radii = tuple(d * np.sqrt(m * n) / s for d, s in zip(config.deltas, scales))
        scaled_coupling = None
        if config.coupling and coupling is not None:
            scaled_coupling = coupling.scaled(scales)
        feas = FeasibleSetSpec(raw / scales[:, None, None], radii, scaled_coupling)
        return cls(raw, config, scales, feas, coupling if config.coupling else None)

    @property
    def mus(self) -> np.ndarray:
        return np.array(self.config.mus) / self.scales

    @property
    def nus(self) -> np.ndarray:
        return np.array(self.config.nus) / self.scales

    @property
    def lambdas(self) -> np.ndarray:
        return np.array(self.config.lambdas)

    @property
    def omega(self) -> np.ndarray:
        return np.array(self.config.omega)

    @property
    def L(self) -> float:
        if self.config.L is not None:
            return float(self.config.L)
        return 1.0 / min(self.mus.min(), self.nus.min())

    def unscale(self, A) -> np.ndarray:
        return A * self.scales[:, None, None]

    def smoothed_objective(self, M, S) -> float:
        return float(sum(w * (smoothed_nuclear(M[k], mu).value + lam * smoothed_l1(S[k], nu).value)
                         for k, (w, mu, nu, lam)
                         in enumerate(zip(self.omega, self.mus, self.nus, self.lambdas))))

    def exact_objective(self, M, S) -> float:
        return float(sum(w * (nuclear_norm(M[k]) + lam * entrywise_l1(S[k]))
                         for k, (w, lam) in enumerate(zip(self.omega, self.lambdas))))

    def split_objective(self, M, S) -> tuple[float, float]:
        """Smoothed (low-rank term, sparse term) of the scalarized objective."""
        gamma = sum(w * smoothed_nuclear(M[k], mu).value
                    for k, (w, mu) in enumerate(zip(self.omega, self.mus)))
        psi = sum(w * lam * smoothed_l1(S[k], nu).value
                  for k, (w, nu, lam) in enumerate(zip(self.omega, self.nus, self.lambdas)))
        return float(gamma), float(psi)


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    smoothed_objective: float
    exact_objective: float
    distflow_residual: float
    step_norm: float
    max_violation: float

    def as_tuple(self):
        return tuple(getattr(self, c) for c in TRACE_COLUMNS)


@dataclass
class SolverState:
    """Iterate ``k`` in solver units, plus the gradient history sum."""

    problem: RecoveryProblem
    k: int
    M: np.ndarray
    S: np.ndarray
    M0: np.ndarray
    S0: np.ndarray
    grad_accumulator_M: np.ndarray
    grad_accumulator_S: np.ndarray
    trace: list = field(default_factory=list)

    @classmethod
    def initial(cls, problem: RecoveryProblem) -> "SolverState":
        M0 = problem.feas.raw.copy()
        S0 = np.zeros_like(M0)
        return cls(problem, 0, M0, S0, M0, S0, np.zeros_like(M0), np.zeros_like(M0), [])

    @property
    def current(self) -> RecoveryTriple:
        p = self.problem
        M = p.unscale(self.M)
        S = p.unscale(self.S)
        return RecoveryTriple(tuple(M), tuple(S), tuple(p.raw))


def aggregate_gradients(state: SolverState):
    """Weighted gradients of the smoothed scalarized objective at the iterate."""
    p = state.problem
    gM = np.empty_like(state.M)
    gS = np.empty_like(state.S)
    for k in range(3):
        w = p.omega[k]
        if w == 0:
            gM[k] = 0.0
            gS[k] = 0.0
            continue
        gM[k] = w * smoothed_nuclear(state.M[k], p.mus[k]).gradient
        gS[k] = w * p.lambdas[k] * smoothed_l1(state.S[k], p.nus[k]).gradient
    return gM, gS


def combination_weights(k: int) -> tuple[float, float]:
    """Weights of (Y, Z) in the refinement average at iteration ``k``."""
    return (k + 1) / (k + 3), 2 / (k + 3)


def _record(problem: RecoveryProblem, k, M, S, step) -> TraceRow:
    coup, excess = problem.feas.violation(M, S)
    if problem.coupling is not None:
        Mo = problem.unscale(M)
        res = distflow_residual(Mo[0], Mo[1], Mo[2], problem.coupling.R, problem.coupling.X,
                                problem.coupling.u0)
    else:
        res = float("nan")
    return TraceRow(k, problem.smoothed_objective(M, S), problem.exact_objective(M, S), res,
                    step, max(coup, excess))


def nesterov_step(state: SolverState) -> SolverState:
    """One pass of gradient, interim (Y, Z) prox steps and weighted averaging."""
    p = state.problem
    cfg = p.config
    if state.k >= cfg.max_outer_iters:
        raise RecoveryError("iteration budget exhausted")
    k = state.k
    gM, gS = aggregate_gradients(state)
    a = (k + 1) / 2 if cfg.history_weights == "nesterov" else 1.0
    acc_M = state.grad_accumulator_M + a * gM
    acc_S = state.grad_accumulator_S + a * gS
    try:
        YM, YS = solve_prox(ProxSubproblem(gM, gS, state.M, state.S, p.L), p.feas,
                            cfg.inner_tol, cfg.max_inner_iters)
        ZM, ZS = solve_prox(ProxSubproblem(acc_M, acc_S, state.M0, state.S0, p.L), p.feas,
                            cfg.inner_tol, cfg.max_inner_iters)
    except ProxConvergenceError as exc:
        raise RecoveryError(f"subproblem failed at iteration {k}: {exc}") from exc
    wy, wz = combination_weights(k)
    M = wy * YM + wz * ZM
    S = wy * YS + wz * ZS
    step = float(np.sqrt(np.sum((M - state.M) ** 2) + np.sum((S - state.S) ** 2)))
    trace = state.trace + [_record(p, k + 1, M, S, step)]
    return SolverState(p, k + 1, M, S, state.M0, state.S0, acc_M, acc_S, trace)


@dataclass(frozen=True)
class RecoveryResult:
    triple: RecoveryTriple
    trace: list
    problem: RecoveryProblem
    initial_objective: float
    iterations: int

    def trace_table(self, delimiter=",") -> str:
        return format_trace(self.trace, delimiter)


def format_trace(trace, delimiter=",") -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for row in trace:
        writer.writerow([row.iteration] + [repr(float(v)) for v in row.as_tuple()[1:]])
    return buf.getvalue()


def _check_inputs(MU, MP, MQ):
    obs = (MU, MP, MQ)
    for o in obs:
        if not isinstance(o, ObservationMatrix):
            raise RecoveryError("recover expects ObservationMatrix inputs")
    if len({o.shape for o in obs}) != 1:
        raise RecoveryError(f"shape mismatch: {[o.shape for o in obs]}")
    if len({o.meter_ids for o in obs}) != 1:
        raise RecoveryError("meter orderings differ across U, P, Q")
    if len({(o.window_start, o.window_end, o.resolution) for o in obs}) != 1:
        raise RecoveryError("observation windows differ across U, P, Q")


def recover(MU: ObservationMatrix, MP: ObservationMatrix, MQ: ObservationMatrix,
            feeder: FeederModel | None, config: SolverConfig = SolverConfig()) -> RecoveryResult:
    """Refine one window of (|V|^2, P, Q) observations.

    Starts from the raw data with zero sparse error and runs the Nesterov
    iteration for ``config.max_outer_iters`` steps, stopping early when
    the iterate moves less than ``config.early_stop_tol``.
    """
    _check_inputs(MU, MP, MQ)
    coupling = None
    if config.coupling:
        if feeder is None:
            raise RecoveryError("a feeder is required when the DistFlow coupling is enabled")
        try:
            R, X = sensitivity_matrices(feeder, MU.meter_ids)
        except ValueError as exc:
            raise RecoveryError(str(exc)) from exc
        coupling = Coupling(R, X, feeder.u0)
    raw = np.stack([MU.values, MP.values, MQ.values])
    problem = RecoveryProblem.build(raw, config, coupling)
    state = SolverState.initial(problem)
    initial = problem.smoothed_objective(state.M, state.S)
    while state.k < problem.config.max_outer_iters:
        state = nesterov_step(state)
        tol = problem.config.early_stop_tol
        if tol is not None and state.trace[-1].step_norm < tol:
            log.debug("early stop at iteration %d", state.k)
            break
    return RecoveryResult(state.current, state.trace, problem, initial, state.k)
