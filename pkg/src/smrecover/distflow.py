"""Radial feeder model and the linearized DistFlow voltage coupling.

Sign convention: P and Q are consumptions (positive = load). The factor -2
of LinDistFlow is folded into R and X, so

    M_U = M_P @ R.T + M_Q @ X.T + u0

holds as written, with R and X entrywise nonpositive.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

FEEDER_SCHEMA = "smrecover.feeder/1"


class FeederError(ValueError):
    """Invalid feeder topology, parameters or file."""


@dataclass(frozen=True)
class Branch:
    parent: str
    child: str
    r: float
    x: float


@dataclass(frozen=True)
class FeederModel:
    """Single-phase-equivalent radial feeder in per unit.

    Branches are kept in canonical order: breadth-first from the root,
    children in declaration order. Branch ``k`` feeds ``bus_ids[k]``.
    """

    root: str
    branches: tuple
    u0: float = 1.0
    base_kv: float | None = None
    base_mva: float | None = None

    def __post_init__(self):
        branches = tuple(b if isinstance(b, Branch) else Branch(str(b[0]), str(b[1]), float(b[2]), float(b[3]))
                         for b in self.branches)
        object.__setattr__(self, "root", str(self.root))
        if not self.u0 > 0:
            raise FeederError("u0 must be positive")
        parent = {}
        for b in branches:
            if b.r < 0 or not np.isfinite(b.r) or not np.isfinite(b.x):
                raise FeederError(f"branch {b.parent}->{b.child}: need r >= 0 and finite x")
            if b.child == self.root:
                raise FeederError(f"root {self.root!r} cannot have a parent")
            if b.child in parent:
                raise FeederError(f"node {b.child!r} has more than one parent")
            parent[b.child] = b.parent
        # every node must reach the root without revisiting anything
        for node in parent:
            seen = {node}
            cur = node
            while cur != self.root:
                if cur not in parent:
                    raise FeederError(f"node {cur!r} is not connected to the root")
                cur = parent[cur]
                if cur in seen:
                    raise FeederError(f"cycle through node {cur!r}")
                seen.add(cur)
        children = {}
        for b in branches:
            children.setdefault(b.parent, []).append(b)
        ordered = []
        queue = deque([self.root])
        while queue:
            for b in children.get(queue.popleft(), []):
                ordered.append(b)
                queue.append(b.child)
        object.__setattr__(self, "branches", tuple(ordered))

    @property
    def nodes(self) -> tuple:
        return (self.root,) + self.bus_ids

    @property
    def bus_ids(self) -> tuple:
        """Non-root nodes in canonical order."""
        return tuple(b.child for b in self.branches)

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    @cached_property
    def bus_index(self) -> dict:
        return {node: k for k, node in enumerate(self.bus_ids)}

    @cached_property
    def parent_branch(self) -> np.ndarray:
        """Index of the parent branch of each branch's sending node, -1 at root."""
        idx = self.bus_index
        return np.array([idx.get(b.parent, -1) for b in self.branches], dtype=int)

    @cached_property
    def path_matrix(self) -> np.ndarray:
        """A[i, k] = 1 if branch k lies on the path from the root to bus i."""
        nb = self.n_branches
        A = np.zeros((nb, nb))
        parent = self.parent_branch
        for i in range(nb):
            k = i
            while k >= 0:
                A[i, k] = 1.0
                k = parent[k]
        return A

    @cached_property
    def incidence(self) -> np.ndarray:
        """C[i, k]: +1 for the branch feeding bus i, -1 for branches leaving it.

        Load current at each bus is ``C @ I``.
        """
        nb = self.n_branches
        C = np.eye(nb)
        for k, p in enumerate(self.parent_branch):
            if p >= 0:
                C[p, k] = -1.0
        return C

    @property
    def r(self) -> np.ndarray:
        return np.array([b.r for b in self.branches])

    @property
    def x(self) -> np.ndarray:
        return np.array([b.x for b in self.branches])

    @property
    def z(self) -> np.ndarray:
        return self.r + 1j * self.x

    def depth(self, node) -> int:
        i = self.bus_index[node]
        return int(self.path_matrix[i].sum())

    def meter_indices(self, meter_nodes) -> np.ndarray:
        idx = self.bus_index
        out = []
        for node in meter_nodes:
            node = str(node)
            if node == self.root:
                raise FeederError(f"meter node {node!r} is the substation root")
            if node not in idx:
                raise FeederError(f"unknown meter node {node!r}")
            out.append(idx[node])
        return np.array(out, dtype=int)


def sensitivity_matrices(feeder: FeederModel, meter_nodes) -> tuple[np.ndarray, np.ndarray]:
    """R(i, j) = -2 * resistance of the common root path of meters i and j.

    X is built the same way from reactances.
    """
    rows = feeder.path_matrix[feeder.meter_indices(meter_nodes)]
    R = -2.0 * (rows * feeder.r) @ rows.T
    X = -2.0 * (rows * feeder.x) @ rows.T
    return R, X


def _conform(MP, MQ, R, X):
    MP = np.asarray(MP, dtype=float)
    MQ = np.asarray(MQ, dtype=float)
    R = np.asarray(R, dtype=float)
    X = np.asarray(X, dtype=float)
    n = MP.shape[-1]
    if MP.shape != MQ.shape or R.shape != (n, n) or X.shape != (n, n):
        raise ValueError(f"shape mismatch: MP {MP.shape}, MQ {MQ.shape}, R {R.shape}, X {X.shape}")
    return MP, MQ, R, X


def lin_distflow_voltage(MP, MQ, R, X, u0) -> np.ndarray:
    MP, MQ, R, X = _conform(MP, MQ, R, X)
    return MP @ R.T + MQ @ X.T + u0


def distflow_residual(MU, MP, MQ, R, X, u0) -> float:
    """RMS per-entry violation of the LinDistFlow coupling."""
    MU = np.asarray(MU, dtype=float)
    if MU.shape != np.shape(MP):
        raise ValueError(f"shape mismatch: MU {MU.shape} vs MP {np.shape(MP)}")
    diff = MU - lin_distflow_voltage(MP, MQ, R, X, u0)
    return float(np.sqrt(np.sum(diff ** 2) / diff.size))


# -- feeder files -------------------------------------------------------------

def feeder_to_dict(feeder: FeederModel) -> dict:
    return {
        "schema": FEEDER_SCHEMA,
        "root": feeder.root,
        "u0": feeder.u0,
        "base_kv": feeder.base_kv,
        "base_mva": feeder.base_mva,
        "nodes": [{"id": n} for n in feeder.nodes],
        "branches": [{"parent": b.parent, "child": b.child, "r_pu": b.r, "x_pu": b.x}
                     for b in feeder.branches],
    }


def feeder_from_dict(data: dict) -> FeederModel:
    if not isinstance(data, dict):
        raise FeederError("feeder file must hold a JSON object")
    if data.get("schema") != FEEDER_SCHEMA:
        raise FeederError(f"unsupported feeder schema {data.get('schema')!r}, expected {FEEDER_SCHEMA!r}")
    for key in ("root", "u0", "base_kv", "base_mva", "branches"):
        if key not in data:
            raise FeederError(f"feeder file missing field {key!r}")
    if data["base_kv"] is None or data["base_mva"] is None:
        raise FeederError("feeder file must declare base_kv and base_mva")
    branches = []
    for k, rec in enumerate(data["branches"]):
        try:
            branches.append(Branch(str(rec["parent"]), str(rec["child"]),
                                   float(rec["r_pu"]), float(rec["x_pu"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise FeederError(f"branch record {k}: {exc!r}") from None
    feeder = FeederModel(str(data["root"]), tuple(branches), float(data["u0"]),
                         float(data["base_kv"]), float(data["base_mva"]))
    if "nodes" in data:
        declared = {str(n["id"]) if isinstance(n, dict) else str(n) for n in data["nodes"]}
        if declared != set(feeder.nodes):
            raise FeederError("node records do not match the branch list")
    return feeder


def save_feeder(feeder: FeederModel, path) -> None:
    Path(path).write_text(json.dumps(feeder_to_dict(feeder), indent=2))


def load_feeder(path) -> FeederModel:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FeederError(f"{path}: not valid JSON ({exc})") from None
    return feeder_from_dict(data)
