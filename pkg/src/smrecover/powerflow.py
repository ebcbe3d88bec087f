"""Exact AC power flow on a radial feeder (Newton-Raphson, polar form).

Solves many load snapshots at once; the leading axis of ``P``/``Q`` indexes
snapshots. Used to produce ground-truth voltages and branch currents.
"""

from __future__ import annotations

import numpy as np

from .distflow import FeederModel


class PowerFlowError(RuntimeError):
    pass


def admittance_matrix(feeder: FeederModel) -> np.ndarray:
    """Bus admittance matrix, root at index 0 then ``feeder.bus_ids``."""
    n = feeder.n_branches + 1
    Y = np.zeros((n, n), dtype=complex)
    parent = feeder.parent_branch + 1
    for k, z in enumerate(feeder.z):
        if z == 0:
            raise PowerFlowError(f"branch {k} has zero impedance")
        y = 1.0 / z
        i, j = parent[k], k + 1
        Y[i, i] += y
        Y[j, j] += y
        Y[i, j] -= y
        Y[j, i] -= y
    return Y


def ac_power_flow(feeder: FeederModel, P, Q, v0=None, tol=1e-12, max_iter=30) -> np.ndarray:
    """Complex bus voltages (non-root buses) for consumptions ``P + jQ``.

    ``P`` and ``Q`` have shape ``(..., n_bus)`` in ``feeder.bus_ids`` order.
    The root is held at zero angle and magnitude ``v0`` (scalar or one value
    per snapshot), by default ``sqrt(u0)``.
    """
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    lead = P.shape[:-1]
    nb = feeder.n_branches
    P = P.reshape(-1, nb)
    Q = Q.reshape(-1, nb)
    Y = admittance_matrix(feeder)
    T = P.shape[0]
    if v0 is None:
        v0 = np.sqrt(feeder.u0)
    v0 = np.broadcast_to(np.asarray(v0, dtype=float), lead).reshape(T)
    Vm = np.ones((T, nb + 1)) * v0[:, None]
    Va = np.zeros((T, nb + 1))
    s_spec = -(P + 1j * Q)
    for _ in range(max_iter):
        V = Vm * np.exp(1j * Va)
        I = V @ Y.T
        mis = (V * np.conj(I))[:, 1:] - s_spec
        if np.max(np.abs(mis), initial=0.0) < tol:
            break
        Vn = V / np.abs(V)
        # dS/dVm and dS/dVa, batched over snapshots
        dS_dVm = V[:, :, None] * np.conj(Y[None] * Vn[:, None, :])
        dS_dVm[:, np.arange(nb + 1), np.arange(nb + 1)] += np.conj(I) * Vn
        dS_dVa = -1j * V[:, :, None] * np.conj(Y[None] * V[:, None, :])
        dS_dVa[:, np.arange(nb + 1), np.arange(nb + 1)] += 1j * V * np.conj(I)
        a = dS_dVa[:, 1:, 1:]
        m = dS_dVm[:, 1:, 1:]
        J = np.block([[a.real, m.real], [a.imag, m.imag]])
        F = np.concatenate([mis.real, mis.imag], axis=1)
        dx = np.linalg.solve(J, -F[..., None])[..., 0]
        Va[:, 1:] += dx[:, :nb]
        Vm[:, 1:] += dx[:, nb:]
    else:
        raise PowerFlowError(f"power flow did not converge in {max_iter} iterations "
                             f"(max mismatch {np.max(np.abs(mis)):.3e})")
    V = Vm * np.exp(1j * Va)
    return V[:, 1:].reshape(lead + (nb,))


def branch_currents(feeder: FeederModel, V, P, Q) -> np.ndarray:
    """Branch currents (parent -> child) consistent with bus voltages and loads."""
    V = np.asarray(V)
    load_current = np.conj((np.asarray(P) + 1j * np.asarray(Q)) / V)
    # current into a branch = load of every bus downstream of it
    return load_current @ feeder.path_matrix
