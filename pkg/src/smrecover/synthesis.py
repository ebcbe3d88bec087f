"""Synthetic ground truth: feeders, 1-second load/PV series, asynchronous sampling.

Everything is a pure function of the seed. Independent random streams are
spawned from one :class:`numpy.random.SeedSequence` so that changing, say,
the asynchrony draw leaves the load series untouched.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import lfilter
from scipy.stats import spearmanr

from .core_model import ObservationMatrix, Quantity, effective_rank
from .distflow import Branch, FeederModel, load_feeder, save_feeder, sensitivity_matrices
from .powerflow import ac_power_flow, branch_currents

DAY = 86400.0


class OffsetDistribution(str, enum.Enum):
    UNIFORM = "uniform"
    TRUNCATED_GAUSSIAN = "truncated-gaussian"


@dataclass(frozen=True)
class AsynchronyModel:
    """Per-meter constant clock offsets, whole seconds in ``[0, max_offset]``.

    For the truncated Gaussian, ``variance`` (s^2) is that of the parent
    zero-mean Gaussian folded onto ``[0, max_offset]``.
    """

    max_offset: float = 900.0
    distribution: OffsetDistribution = OffsetDistribution.UNIFORM
    variance: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "distribution", OffsetDistribution(self.distribution))
        if self.max_offset < 0 or self.variance < 0:
            raise ValueError("max_offset and variance must be nonnegative")

    def offsets(self, n_meters: int) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        if self.max_offset == 0:
            return np.zeros(n_meters)
        if self.distribution is OffsetDistribution.UNIFORM:
            off = rng.uniform(0.0, self.max_offset, n_meters)
        else:
            sd = np.sqrt(self.variance)
            if sd == 0:
                return np.zeros(n_meters)
            off = np.empty(n_meters)
            for i in range(n_meters):
                while True:
                    v = abs(rng.normal(0.0, sd))
                    if v <= self.max_offset:
                        break
                off[i] = v
        return np.floor(off)


@dataclass(frozen=True)
class WindowConfig:
    start: float = 0.0
    length: float = DAY
    resolution: float = 900.0

    @property
    def m(self) -> int:
        return int(round(self.length / self.resolution))

    @property
    def times(self) -> np.ndarray:
        return self.start + self.resolution * np.arange(self.m)


@dataclass(frozen=True)
class ScenarioSpec:
    """Knobs of :func:`generate_scenario`. Powers end up scaled so the worst
    voltage-magnitude drop over the horizon is about ``target_drop``."""

    n_nodes: int = 21
    depth: int = 6
    seed: int = 0
    pv_penetration: float = 0.3
    window: WindowConfig = field(default_factory=WindowConfig)
    n_windows: int = 1
    max_offset: float = 900.0
    target_drop: float = 0.03
    u0: float = 1.0
    common_fluctuation: float = 0.08
    common_tau: float = 3600.0
    fluctuation: float = 0.03
    fluctuation_tau: float = 1800.0
    fast_fluctuation: float = 0.01
    fast_tau: float = 60.0
    n_archetypes: int = 2
    pv_node_fraction: float = 0.5
    cloud_events: int = 8
    source_variation: float = 0.0
    source_tau: float = 600.0
    base_kv: float = 12.47
    base_mva: float = 1.0

    def __post_init__(self):
        if self.n_nodes < 2:
            raise ValueError("need at least 2 nodes")
        if not 1 <= self.depth <= self.n_nodes - 1:
            raise ValueError("depth must be between 1 and n_nodes - 1")
        if not 0 <= self.pv_penetration <= 1:
            raise ValueError("pv_penetration must lie in [0, 1]")
        if self.n_windows < 1:
            raise ValueError("n_windows must be positive")


@dataclass(frozen=True)
class Scenario:
    """1-second ground-truth consumption series for every non-root bus.

    ``P``/``Q`` have shape ``(T, n_bus)``; row ``k`` is time ``t0 + k`` s.
    ``noise_std`` holds per-quantity entry noise for (|V|, P, Q) in pu.
    """

    feeder: FeederModel
    P: np.ndarray
    Q: np.ndarray
    pv: np.ndarray
    t0: float
    window: WindowConfig
    n_windows: int
    meters: tuple
    pv_penetration: float
    asynchrony: AsynchronyModel
    noise_std: tuple = (0.0, 0.0, 0.0)
    seed: int = 0
    v0: np.ndarray | None = None

    @property
    def duration(self) -> float:
        return float(self.P.shape[0])

    def window_config(self, index: int) -> WindowConfig:
        if not 0 <= index < self.n_windows:
            raise IndexError(f"window {index} outside 0..{self.n_windows - 1}")
        return replace(self.window, start=self.window.start + index * self.window.length)

    def series_at(self, times) -> tuple[np.ndarray, np.ndarray]:
        """Bus consumptions at whole-second instants, shape ``times.shape + (n_bus,)``."""
        k = np.asarray(np.round(np.asarray(times) - self.t0), dtype=int)
        if np.any(k < 0) or np.any(k >= self.P.shape[0]):
            raise ValueError("requested instant lies outside the scenario series")
        return self.P[k], self.Q[k]

    def source_at(self, times) -> np.ndarray:
        """Substation voltage magnitude at the given instants."""
        k = np.asarray(np.round(np.asarray(times) - self.t0), dtype=int)
        if self.v0 is None:
            return np.full(k.shape, np.sqrt(self.feeder.u0))
        return self.v0[k]

    def meter_columns(self) -> np.ndarray:
        return self.feeder.meter_indices(self.meters)

    def with_noise(self, noise_std) -> "Scenario":
        return replace(self, noise_std=tuple(float(s) for s in noise_std))

    def with_asynchrony(self, asynchrony: AsynchronyModel) -> "Scenario":
        return replace(self, asynchrony=asynchrony)


def random_feeder(n_nodes: int, depth: int, rng, r_range=(0.01, 0.3), x_range=(0.01, 0.3),
                  u0=1.0, base_kv=12.47, base_mva=1.0) -> FeederModel:
    """Random radial tree with exactly ``depth`` levels below the root."""
    names = ["0"] + [str(k) for k in range(1, n_nodes)]
    level = {"0": 0}
    branches = []
    for k in range(1, n_nodes):
        if k <= depth:
            parent = names[k - 1]
        else:
            candidates = [n for n in names[:k] if level[n] < depth]
            parent = candidates[rng.integers(len(candidates))]
        level[names[k]] = level[parent] + 1
        branches.append(Branch(parent, names[k], float(rng.uniform(*r_range)),
                               float(rng.uniform(*x_range))))
    return FeederModel("0", tuple(branches), u0, base_kv, base_mva)


def _ar1(rng, n_steps, n_series, tau, std):
    if std == 0:
        return np.zeros((n_steps, n_series))
    a = np.exp(-1.0 / tau)
    e = rng.normal(0.0, std * np.sqrt(1 - a * a), (n_steps, n_series))
    e[0] = rng.normal(0.0, std, n_series)
    return lfilter([1.0], [1.0, -a], e, axis=0)


def _daily_shapes(rng, t, n_archetypes):
    """Smooth residential-style day curves, peak normalised to 1."""
    hour = (t % DAY) / 3600.0
    shapes = []
    for _ in range(n_archetypes):
        morning = rng.uniform(6.5, 8.5)
        evening = rng.uniform(18.0, 20.5)
        base = rng.uniform(0.45, 0.6)
        s = (base
             + rng.uniform(0.25, 0.45) * np.exp(-0.5 * ((hour - morning) / rng.uniform(0.8, 1.5)) ** 2)
             + rng.uniform(0.4, 0.6) * np.exp(-0.5 * ((hour - evening) / rng.uniform(1.2, 2.2)) ** 2)
             + rng.uniform(0.05, 0.15) * np.exp(-0.5 * ((hour - 13.0) / 2.5) ** 2))
        # wrap-around evening tail into the early morning
        s += rng.uniform(0.4, 0.6) * np.exp(-0.5 * ((hour + 24 - evening) / 2.0) ** 2)
        shapes.append(s / s.max())
    return np.array(shapes).T


def _pv_profile(rng, t, n_pv, n_events):
    hour = (t % DAY) / 3600.0
    clear = np.clip(np.sin(np.pi * (hour - 6.0) / 12.0), 0.0, None) ** 1.5
    out = np.repeat(clear[:, None], n_pv, axis=1)
    if n_pv == 0:
        return out
    span = t[-1] - t[0]
    for _ in range(n_events):
        start = t[0] + rng.uniform(0.0, span)
        dur = rng.uniform(120.0, 900.0)
        depth = rng.uniform(0.3, 0.8)
        lag = rng.uniform(0.0, 180.0, n_pv)
        ramp = 60.0
        for c in range(n_pv):
            s = start + lag[c]
            rise = np.clip((t - s) / ramp, 0.0, 1.0)
            fall = np.clip((s + dur - t) / ramp, 0.0, 1.0)
            out[:, c] *= 1.0 - depth * np.minimum(rise, fall)
    return out


def generate_scenario(spec: ScenarioSpec) -> Scenario:
    """Random feeder plus 1-second net consumption series covering all windows.

    The series extend ``max_offset`` seconds past the last window so that
    offset sampling never runs off the end.
    """
    ss = np.random.SeedSequence(spec.seed)
    r_feeder, r_load, r_pv, r_q, r_src = (np.random.default_rng(s) for s in ss.spawn(5))
    feeder = random_feeder(spec.n_nodes, spec.depth, r_feeder, u0=spec.u0,
                           base_kv=spec.base_kv, base_mva=spec.base_mva)
    n = feeder.n_branches
    t0 = spec.window.start
    n_steps = int(spec.window.length * spec.n_windows + spec.max_offset) + 1
    t = t0 + np.arange(n_steps, dtype=float)

    shapes = _daily_shapes(r_load, t, spec.n_archetypes)
    arche = r_load.integers(spec.n_archetypes, size=n)
    peak = r_load.uniform(0.5, 1.5, n)
    # shared (weather/behaviour) fluctuation per archetype, plus small
    # bus-specific slow and fast parts
    common = _ar1(r_load, n_steps, spec.n_archetypes, spec.common_tau, spec.common_fluctuation)
    slow = _ar1(r_load, n_steps, n, spec.fluctuation_tau, spec.fluctuation)
    fast = _ar1(r_load, n_steps, n, spec.fast_tau, spec.fast_fluctuation)
    load = peak * shapes[:, arche] * (1.0 + common[:, arche] + slow + fast)
    load = np.maximum(load, 0.05 * peak)
    pf = r_q.uniform(0.9, 0.98, n)
    q_load = load * np.tan(np.arccos(pf))

    pv = np.zeros((n_steps, n))
    if spec.pv_penetration > 0:
        n_pv = max(1, int(round(spec.pv_node_fraction * n)))
        pv_nodes = np.sort(r_pv.choice(n, n_pv, replace=False))
        cap = peak[pv_nodes] / peak[pv_nodes].sum() * spec.pv_penetration * peak.sum()
        pv[:, pv_nodes] = _pv_profile(r_pv, t, n_pv, spec.cloud_events) * cap
    P = load - pv
    Q = q_load

    # scale powers so the linearised worst-case drop hits target_drop
    R, X = sensitivity_matrices(feeder, feeder.bus_ids)
    coarse = slice(None, None, 60)
    dU = -(P[coarse] @ R.T + Q[coarse] @ X.T)
    u_target = (np.sqrt(spec.u0) * (1.0 - spec.target_drop)) ** 2
    scale = (spec.u0 - u_target) / max(float(dU.max()), 1e-12)

    v0 = None
    if spec.source_variation > 0:
        v0 = np.sqrt(spec.u0) * (1.0 + _ar1(r_src, n_steps, 1, spec.source_tau, spec.source_variation)[:, 0])

    asyn = AsynchronyModel(max_offset=spec.max_offset, seed=spec.seed)
    return Scenario(feeder, P * scale, Q * scale, pv * scale, t0, spec.window, spec.n_windows,
                    feeder.bus_ids, spec.pv_penetration, asyn, (0.0, 0.0, 0.0), spec.seed, v0)


@dataclass(frozen=True)
class SampledWindow:
    """Raw (asynchronous, noisy) and true (synchronized) observation matrices."""

    raw: tuple
    truth: tuple
    offsets: np.ndarray
    true_currents: np.ndarray
    window: WindowConfig

    def raw_matrices(self):
        return tuple(o.values for o in self.raw)

    def true_matrices(self):
        return tuple(o.values for o in self.truth)


def _observations(values_u, values_p, values_q, window, meters, base):
    t_end = window.start + window.length
    return (ObservationMatrix(Quantity.VOLTAGE_SQUARED, values_u, window.start, t_end, meters, window.resolution),
            ObservationMatrix(Quantity.ACTIVE_POWER, values_p, window.start, t_end, meters, window.resolution, base),
            ObservationMatrix(Quantity.REACTIVE_POWER, values_q, window.start, t_end, meters, window.resolution, base))


def _window(scenario, window_index, window):
    return scenario.window_config(window_index) if window is None else window


def synchronized_truth(scenario: Scenario, window_index: int = 0, window: WindowConfig | None = None):
    """True (|V|^2, P, Q) at the window instants plus branch currents."""
    w = _window(scenario, window_index, window)
    P, Q = scenario.series_at(w.times)
    V = ac_power_flow(scenario.feeder, P, Q, v0=scenario.source_at(w.times))
    I = branch_currents(scenario.feeder, V, P, Q)
    cols = scenario.meter_columns()
    return (np.abs(V[:, cols]) ** 2, P[:, cols], Q[:, cols]), I


def sample_asynchronous(scenario: Scenario, window_index: int = 0, noise_seed: int | None = None,
                        window: WindowConfig | None = None) -> SampledWindow:
    """Sample each meter at ``t_j + offset_i``, then add entry noise.

    Noise goes on the voltage magnitude before squaring, as a meter would
    report it. ``noise_seed`` defaults to a stream derived from the
    scenario seed and window index. ``window`` overrides the scenario's
    own window layout (rolling windows with arbitrary stride).
    """
    w = _window(scenario, window_index, window)
    cols = scenario.meter_columns()
    offsets = scenario.asynchrony.offsets(len(cols))
    times = w.times
    if (w.start < scenario.t0
            or w.start + w.length - w.resolution + offsets.max(initial=0.0) > scenario.t0 + scenario.duration - 1):
        raise ValueError("asynchrony offset pushes sampling past the end of the series")
    m, n = len(times), len(cols)
    vm = np.empty((m, n))
    p = np.empty((m, n))
    q = np.empty((m, n))
    # one power flow per distinct offset (meters sharing an offset share snapshots)
    for off in np.unique(offsets):
        which = np.flatnonzero(offsets == off)
        Ps, Qs = scenario.series_at(times + off)
        V = ac_power_flow(scenario.feeder, Ps, Qs, v0=scenario.source_at(times + off))
        vm[:, which] = np.abs(V[:, cols[which]])
        p[:, which] = Ps[:, cols[which]]
        q[:, which] = Qs[:, cols[which]]
    if noise_seed is None:
        noise_seed = np.random.SeedSequence([scenario.seed, window_index, 7919]).generate_state(1)[0]
    rng = np.random.default_rng(noise_seed)
    sv, sp, sq = scenario.noise_std
    if sv > 0:
        vm = vm + rng.normal(0.0, sv, vm.shape)
    if sp > 0:
        p = p + rng.normal(0.0, sp, p.shape)
    if sq > 0:
        q = q + rng.normal(0.0, sq, q.shape)
    truth_vals, currents = synchronized_truth(scenario, window=w)
    meters = scenario.meters
    base = scenario.feeder.base_mva
    raw = _observations(vm ** 2, p, q, w, meters, base)
    truth = _observations(*truth_vals, w, meters, base)
    return SampledWindow(raw, truth, offsets, currents, w)


def relative_noise(scenario: Scenario, fraction: float, window_index: int = 0) -> tuple:
    """Noise std per quantity equal to ``fraction`` of each true signal's RMS."""
    (u, p, q), _ = synchronized_truth(scenario, window_index)
    rms = [np.sqrt(np.mean(np.sqrt(u) ** 2)), np.sqrt(np.mean(p ** 2)), np.sqrt(np.mean(q ** 2))]
    return tuple(fraction * r for r in rms)


def pseudo_reactive(M_P, power_factor: float) -> np.ndarray:
    """Reactive power implied by a constant lagging power factor."""
    if not 0 < power_factor <= 1:
        raise ValueError(f"power factor must lie in (0, 1], got {power_factor}")
    return np.asarray(M_P, dtype=float) * np.tan(np.arccos(power_factor))


@dataclass(frozen=True)
class PlantedInstance:
    """Low-rank DistFlow-consistent truth plus sparse spikes, as observations."""

    feeder: FeederModel
    truth: tuple
    spikes: tuple
    raw: tuple


def planted_structure(feeder: FeederModel, m: int = 48, rank: int = 2, spike_fraction: float = 0.05,
                      spike_scale=(0.02, 0.5, 0.5), load_scale: float = 0.02, seed: int = 0,
                      resolution: float = 900.0) -> PlantedInstance:
    """Rank-``rank`` P and Q, U from the linearized voltage model, plus spikes.

    Spikes hit ``spike_fraction`` of the entries of each matrix with sign +-1
    and magnitude ``spike_scale`` times that matrix's RMS.
    """
    rng = np.random.default_rng(seed)
    meters = feeder.bus_ids
    n = len(meters)
    R, X = sensitivity_matrices(feeder, meters)
    A = rng.uniform(0.5, 1.5, (m, rank))
    P = load_scale * A @ rng.uniform(0.2, 1.0, (n, rank)).T
    Q = 0.4 * load_scale * A @ rng.uniform(0.2, 1.0, (n, rank)).T
    U = feeder.u0 + P @ R.T + Q @ X.T
    truth = (U, P, Q)
    spikes = []
    for M, scale in zip(truth, spike_scale):
        S = np.zeros_like(M)
        mask = rng.random(M.shape) < spike_fraction
        S[mask] = rng.choice([-1.0, 1.0], mask.sum()) * scale * np.sqrt(np.mean(M ** 2))
        spikes.append(S)
    raw = tuple(ObservationMatrix(q, M + S, 0.0, m * resolution, meters, resolution,
                                  None if q is Quantity.VOLTAGE_SQUARED else 1.0)
                for q, M, S in zip(Quantity, truth, spikes))
    return PlantedInstance(feeder, truth, tuple(spikes), raw)


def rank_experiment(scenario: Scenario, levels, replicates: int = 20, seed: int = 0,
                    rel_threshold: float = 0.01, window_index: int = 0):
    """Mean effective rank of raw M_U per offset-variance level.

    Each replicate redraws the per-meter offsets (truncated Gaussian with the
    given variance, s^2) and the measurement noise.
    Returns ``(table, spearman)`` with rows ``(level, mean_rank, std_rank)``.
    """
    levels = [float(v) for v in levels]
    if len(levels) < 2:
        raise ValueError("need at least two asynchrony levels")
    rows = []
    for level in levels:
        ranks = []
        for r in range(replicates):
            asyn = AsynchronyModel(scenario.asynchrony.max_offset, OffsetDistribution.TRUNCATED_GAUSSIAN,
                                   level, seed=int(np.random.SeedSequence([seed, r]).generate_state(1)[0]))
            sampled = sample_asynchronous(scenario.with_asynchrony(asyn), window_index,
                                          noise_seed=int(np.random.SeedSequence([seed, r, 1]).generate_state(1)[0]))
            ranks.append(effective_rank(sampled.raw[0].values, rel_threshold))
        rows.append((level, float(np.mean(ranks)), float(np.std(ranks))))
    means = [r[1] for r in rows]
    if len(set(means)) == 1 or len(set(levels)) == 1:
        return rows, float("nan")
    rho = float(spearmanr(levels, means).statistic)
    return rows, rho


# -- scenario bundles ---------------------------------------------------------

SCENARIO_SCHEMA = "smrecover.scenario/1"
MANIFEST_SCHEMA = "smrecover.manifest/1"


def save_scenario(scenario: Scenario, directory) -> Path:
    """Write ``feeder.json``, ``scenario.json`` and one series file per bus.

    Series files hold ``t_s,p_pu,q_pu,pv_pu`` at 1-second resolution with
    round-trip float formatting, so a reloaded scenario is bit-identical.
    """
    d = Path(directory)
    (d / "series").mkdir(parents=True, exist_ok=True)
    save_feeder(scenario.feeder, d / "feeder.json")
    t = scenario.t0 + np.arange(scenario.P.shape[0], dtype=float)
    for k, bus in enumerate(scenario.feeder.bus_ids):
        np.savetxt(d / "series" / f"{bus}.csv",
                   np.column_stack([t, scenario.P[:, k], scenario.Q[:, k], scenario.pv[:, k]]),
                   fmt="%.17g", delimiter=",", header="t_s,p_pu,q_pu,pv_pu", comments="")
    if scenario.v0 is not None:
        np.savetxt(d / "series" / "_source.csv", np.column_stack([t, scenario.v0]), fmt="%.17g",
                   delimiter=",", header="t_s,v0_pu", comments="")
    meta = {
        "schema": SCENARIO_SCHEMA,
        "t0": scenario.t0,
        "window": {"start": scenario.window.start, "length": scenario.window.length,
                   "resolution": scenario.window.resolution},
        "n_windows": scenario.n_windows,
        "meters": list(scenario.meters),
        "pv_penetration": scenario.pv_penetration,
        "asynchrony": {"max_offset": scenario.asynchrony.max_offset,
                       "distribution": scenario.asynchrony.distribution.value,
                       "variance": scenario.asynchrony.variance,
                       "seed": scenario.asynchrony.seed},
        "noise_std": list(scenario.noise_std),
        "seed": scenario.seed,
        "source_series": scenario.v0 is not None,
    }
    (d / "scenario.json").write_text(json.dumps(meta, indent=2))
    return d


def load_scenario(directory) -> Scenario:
    d = Path(directory)
    meta = json.loads((d / "scenario.json").read_text())
    if meta.get("schema") != SCENARIO_SCHEMA:
        raise ValueError(f"unsupported scenario schema {meta.get('schema')!r}")
    feeder = load_feeder(d / "feeder.json")
    cols = [np.loadtxt(d / "series" / f"{bus}.csv", delimiter=",", skiprows=1, ndmin=2)
            for bus in feeder.bus_ids]
    P = np.column_stack([c[:, 1] for c in cols])
    Q = np.column_stack([c[:, 2] for c in cols])
    pv = np.column_stack([c[:, 3] for c in cols])
    v0 = None
    if meta.get("source_series"):
        v0 = np.loadtxt(d / "series" / "_source.csv", delimiter=",", skiprows=1, ndmin=2)[:, 1]
    return Scenario(feeder, P, Q, pv, float(meta["t0"]), WindowConfig(**meta["window"]),
                    int(meta["n_windows"]), tuple(meta["meters"]), float(meta["pv_penetration"]),
                    AsynchronyModel(**meta["asynchrony"]), tuple(meta["noise_std"]),
                    int(meta["seed"]), v0)


def write_meter_data(scenario: Scenario, directory, windows=None) -> Path:
    """Sample the scenario like the meters would and write meter files.

    One ``timestamp_s,value`` file per meter and quantity (voltage as a
    magnitude, powers on the feeder's MVA base) plus ``manifest.json``.
    Timestamps are the nominal report instants; the hidden clock offsets
    are what the recovery has to undo.
    """
    d = Path(directory)
    (d / "meters").mkdir(parents=True, exist_ok=True)
    windows = range(scenario.n_windows) if windows is None else windows
    chunks = [sample_asynchronous(scenario, i) for i in windows]
    t = np.concatenate([c.window.times for c in chunks])
    entries = []
    for q, tag in enumerate("UPQ"):
        vals = np.concatenate([c.raw_matrices()[q] for c in chunks])
        if tag == "U":
            vals = np.sqrt(vals)
        for i, node in enumerate(scenario.meters):
            name = f"meters/{node}_{tag}.csv"
            np.savetxt(d / name, np.column_stack([t, vals[:, i]]), fmt="%.17g", delimiter=",",
                       header="timestamp_s,value", comments="")
            entries.append({"node": node, "quantity": tag, "file": name, "units": "pu"})
    save_feeder(scenario.feeder, d / "feeder.json")
    manifest = {"schema": MANIFEST_SCHEMA, "feeder": "feeder.json",
                "resolution": scenario.window.resolution,
                "power_base_mva": scenario.feeder.base_mva, "meters": entries}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return d
