"""Constrained proximal steps of the recovery solver.

The feasible set couples six m x N blocks, stacked as arrays of shape
``(3, m, N)`` in (U, P, Q) order:

* one Frobenius ball per quantity, ``||raw_k - M_k - S_k||_F <= eps_k``;
* optionally the LinDistFlow equality ``M_U = M_P R^T + M_Q X^T + u0``.

A prox step ``argmin <g_M, M> + <g_S, S> + L/2 ||(M, S) - c||^2`` over that
set is the Euclidean projection of ``c - g / L``, computed with Dykstra's
alternating projections between the affine set and the product of balls.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import cho_factor, cho_solve


class ProxConvergenceError(RuntimeError):
    """Dykstra iterations did not settle; carries the last iterate."""

    def __init__(self, message, M, S, gap):
        super().__init__(message)
        self.M = M
        self.S = S
        self.gap = gap


@dataclass(frozen=True)
class Coupling:
    """LinDistFlow equality ``M_U = M_P R^T + M_Q X^T + u0``."""

    R: np.ndarray
    X: np.ndarray
    u0: float

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float)
        X = np.asarray(self.X, dtype=float)
        n = R.shape[0]
        if R.shape != (n, n) or X.shape != (n, n):
            raise ValueError(f"R {R.shape} and X {X.shape} must be square and equal")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "X", X)

    @cached_property
    def _K(self):
        return np.hstack([self.R, self.X])

    @cached_property
    def _factor(self):
        K = self._K
        return cho_factor(K.T @ K + np.eye(K.shape[1]))

    def voltage(self, MP, MQ):
        return MP @ self.R.T + MQ @ self.X.T + self.u0

    def residual(self, M) -> np.ndarray:
        return M[0] - self.voltage(M[1], M[2])

    def project(self, M) -> np.ndarray:
        """Euclidean projection of an (U, P, Q) stack onto the coupling set."""
        n = self.R.shape[0]
        W = np.hstack([M[1], M[2]])
        rhs = (M[0] - self.u0) @ self._K + W
        W = cho_solve(self._factor, rhs.T).T
        MP, MQ = W[:, :n], W[:, n:]
        return np.stack([self.voltage(MP, MQ), MP, MQ])

    def scaled(self, scales) -> "Coupling":
        """Coupling in variables divided by per-quantity ``scales``."""
        su, sp, sq = scales
        return Coupling(self.R * sp / su, self.X * sq / su, self.u0 / su)


@dataclass(frozen=True)
class FeasibleSetSpec:
    raw: np.ndarray
    radii: tuple
    coupling: Coupling | None = None

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=float)
        if raw.ndim != 3 or raw.shape[0] != 3:
            raise ValueError("raw must stack three m x N matrices")
        radii = tuple(float(r) for r in self.radii)
        if len(radii) != 3 or min(radii) < 0:
            raise ValueError("radii must be three nonnegative numbers")
        if self.coupling is not None and self.coupling.R.shape[0] != raw.shape[2]:
            raise ValueError("coupling size does not match the meter count")
        object.__setattr__(self, "raw", raw)
        object.__setattr__(self, "radii", radii)

    def violation(self, M, S) -> tuple[float, float]:
        """(max |coupling residual|, max ball excess) at ``(M, S)``."""
        excess = max(0.0, max(np.linalg.norm(self.raw[k] - M[k] - S[k]) - self.radii[k]
                              for k in range(3)))
        coup = 0.0 if self.coupling is None else float(np.max(np.abs(self.coupling.residual(M))))
        return coup, excess

    def project_balls(self, M, S):
        M_out = np.empty_like(M)
        S_out = np.empty_like(S)
        for k in range(3):
            M_out[k], S_out[k] = project_ball_pair(M[k], S[k], self.raw[k], self.radii[k])
        return M_out, S_out


@dataclass(frozen=True)
class ProxSubproblem:
    grad_M: np.ndarray
    grad_S: np.ndarray
    center_M: np.ndarray
    center_S: np.ndarray
    L: float

    def objective(self, M, S) -> float:
        return float(np.sum(self.grad_M * M) + np.sum(self.grad_S * S)
                     + 0.5 * self.L * (np.sum((M - self.center_M) ** 2)
                                       + np.sum((S - self.center_S) ** 2)))


def project_ball_pair(M_center, S_center, M_raw, eps):
    """Project ``(M, S)`` onto ``{||M_raw - M - S||_F <= eps}``.

    Only the sum ``M + S`` is constrained, so the correction is split evenly.
    """
    D = M_raw - M_center - S_center
    dn = np.linalg.norm(D)
    if dn <= eps:
        return M_center, S_center
    shift = D * ((dn - eps) / (2.0 * dn))
    return M_center + shift, S_center + shift


def project_feasible(M, S, feas: FeasibleSetSpec, tol=1e-8, max_iter=200):
    """Euclidean projection of ``(M, S)`` onto the feasible set (Dykstra)."""
    if feas.coupling is None:
        return feas.project_balls(M, S)
    coupling = feas.coupling
    # S is untouched by the affine set, so only M carries a Dykstra increment
    # there; the affine increment is a normal vector and can be dropped.
    xM, xS = M, S
    qM = np.zeros_like(M)
    qS = np.zeros_like(S)
    gap = np.inf
    for _ in range(max_iter):
        yM = coupling.project(xM)
        yS = xS
        zM, zS = feas.project_balls(yM + qM, yS + qS)
        qM = yM + qM - zM
        qS = yS + qS - zS
        gap = np.sqrt(np.sum((zM - xM) ** 2) + np.sum((zS - xS) ** 2))
        xM, xS = zM, zS
        if gap < tol:
            return coupling.project(xM), xS
    raise ProxConvergenceError(
        f"Dykstra projection did not converge in {max_iter} iterations (gap {gap:.3e})",
        coupling.project(xM), xS, gap)


def solve_prox(sub: ProxSubproblem, feas: FeasibleSetSpec, tol=1e-8, max_iter=200):
    """Minimize the linear-plus-proximity objective over the feasible set."""
    if not sub.L > 0:
        raise ValueError("L must be positive")
    if not tol > 0:
        raise ValueError("tol must be positive")
    M0 = sub.center_M - sub.grad_M / sub.L
    S0 = sub.center_S - sub.grad_S / sub.L
    return project_feasible(M0, S0, feas, tol=tol, max_iter=max_iter)
