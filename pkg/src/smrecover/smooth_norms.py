"""Nesterov-smoothed nuclear and l1 norms.

Both surrogates are maxima of a linear form minus a quadratic over the
dual-norm unit ball; the maximizer is the gradient and has a closed form:
singular-value clipping for the nuclear norm, entrywise clamping for l1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SV_CUTOFF = 1e-12


@dataclass(frozen=True)
class SmoothedEval:
    value: float
    gradient: np.ndarray


def smoothed_nuclear(A, mu: float) -> SmoothedEval:
    """max over spectral-norm ball of <A, a> - mu/2 ||a||_F^2.

    The gradient is 1/mu Lipschitz and has spectral norm <= 1.
    """
    if not mu > 0:
        raise ValueError(f"mu must be positive, got {mu}")
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return SmoothedEval(0.0, np.zeros_like(A))
    s = np.where(s > SV_CUTOFF * s[0], s, 0.0)
    w = np.minimum(s / mu, 1.0)
    grad = (U * w) @ Vt
    value = float(np.dot(s, w) - 0.5 * mu * np.dot(w, w))
    return SmoothedEval(value, grad)


def smoothed_l1(S, nu: float) -> SmoothedEval:
    """Huber smoothing of the entrywise l1 norm, width ``nu``."""
    if not nu > 0:
        raise ValueError(f"nu must be positive, got {nu}")
    S = np.asarray(S, dtype=float)
    beta = np.clip(S / nu, -1.0, 1.0)
    value = float(np.sum(S * beta) - 0.5 * nu * np.sum(beta * beta))
    return SmoothedEval(value, beta)
