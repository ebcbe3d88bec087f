"""Command line front end and the rolling-window pipeline.

Subcommands: ``synth``, ``recover``, ``pipeline``, ``rank-experiment`` and
``grid-search``. Exit codes: 0 success, 1 input error, 2 solver failure.

Every file written carries a ``# schema:`` line and the exact configuration
as a one-line JSON ``# config:`` comment. Wall-clock timings go to a separate
``timings.csv`` so that ``metrics.csv`` is byte-identical across runs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .bcse import EstimationError, StateVector, build_measurements, estimate, mpe
from .core_model import (ObservationError, ObservationMatrix, Quantity, RecoveryTriple,
                         SolverConfig, build_observation_matrix, effective_rank)
from .distflow import FeederError, FeederModel, distflow_residual, load_feeder, sensitivity_matrices
from .feasible_projection import ProxConvergenceError
from .powerflow import PowerFlowError
from .recovery_solver import RecoveryError, format_trace, recover, resolve_config
from .synthesis import (MANIFEST_SCHEMA, Scenario, ScenarioSpec, WindowConfig, generate_scenario,
                        load_scenario, pseudo_reactive, rank_experiment, relative_noise,
                        sample_asynchronous, save_scenario, write_meter_data)

log = logging.getLogger("smrecover")

SCHEMA_VERSION = 1
ENV_OUTPUT_DIR = "SMRECOVER_OUTPUT_DIR"
ENV_WORKERS = "SMRECOVER_WORKERS"
ABLATIONS = ("none", "no-coupling", "independent", "passthrough")
EXIT_OK, EXIT_INPUT, EXIT_SOLVER = 0, 1, 2

METRIC_COLUMNS = (
    "window", "start_s", "end_s", "m", "n_meters", "ablation",
    "raw_err_U", "raw_err_P", "raw_err_Q", "rec_err_U", "rec_err_P", "rec_err_Q",
    "distflow_raw", "distflow_recovered", "distflow_truth",
    "eff_rank_raw_U", "eff_rank_rec_U", "recovery_iters",
    "bcse_mpe", "bcse_J_mean", "bcse_iters_mean",
)

INPUT_ERRORS = (ValueError, KeyError, FileNotFoundError, OSError, json.JSONDecodeError)
SOLVER_ERRORS = (RecoveryError, EstimationError, ProxConvergenceError, PowerFlowError,
                 np.linalg.LinAlgError)


class ConfigError(ValueError):
    pass


class WindowFailure(RuntimeError):
    def __init__(self, index, cause):
        super().__init__(f"window {index} failed: {type(cause).__name__}: {cause}")
        self.index = index
        self.cause = cause


@dataclass(frozen=True)
class PipelineConfig:
    """Inputs, solver settings, window layout, ablation and output options.

    Exactly one data source is used: ``manifest`` (meter files),
    ``scenario_dir`` (a saved scenario bundle) or, when neither is set, a
    scenario generated from ``scenario`` (``ScenarioSpec`` fields) and
    ``seed``. Synthetic sources provide ground truth for error metrics.
    """

    feeder: str | None = None
    manifest: str | None = None
    scenario_dir: str | None = None
    scenario: dict = field(default_factory=dict)
    noise: float = 0.01
    solver: dict = field(default_factory=dict)
    window_length: float = 86400.0
    stride: float | None = None
    resolution: float = 900.0
    max_windows: int | None = None
    ablation: str = "none"
    output_dir: str | None = "smrecover-out"
    seed: int = 0
    workers: int = 1
    bcse_k_max: int = 20
    power_factor: float = 0.95

    def __post_init__(self):
        if self.resolution <= 0 or self.window_length <= 0:
            raise ConfigError("window length and resolution must be positive")
        ratio = self.window_length / self.resolution
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 2:
            raise ConfigError("window length must be a multiple (>= 2) of the resolution")
        if self.stride is not None and self.stride < self.resolution:
            raise ConfigError("stride must be at least one resolution step")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        if self.manifest and self.scenario_dir:
            raise ConfigError("give either a manifest or a scenario directory, not both")
        if not 0 <= self.noise:
            raise ConfigError("noise must be nonnegative")
        unknown = set(self.solver) - {f.name for f in dataclasses.fields(SolverConfig)}
        if unknown:
            raise ConfigError(f"unknown solver fields {sorted(unknown)}")
        # the window layout comes from this config, not the scenario spec
        unknown = set(self.scenario) - ({f.name for f in dataclasses.fields(ScenarioSpec)} - {"window"})
        if unknown:
            raise ConfigError(f"unknown scenario fields {sorted(unknown)}")

    @property
    def window_stride(self) -> float:
        return self.window_length if self.stride is None else self.stride

    def solver_config(self) -> SolverConfig:
        kw = dict(self.solver)
        if "omega" in kw:
            kw["omega"] = tuple(kw["omega"])
        return SolverConfig(**kw)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        return cls(**data)


# -- data sources -------------------------------------------------------------

@dataclass
class WindowData:
    index: int
    window: WindowConfig
    raw: tuple
    truth: tuple | None = None
    currents: np.ndarray | None = None
    offsets: np.ndarray | None = None


class ScenarioSource:
    """Rolling windows sampled from a synthetic scenario (truth available)."""

    def __init__(self, scenario: Scenario, config: PipelineConfig):
        self.scenario = scenario
        self.feeder = scenario.feeder
        self.config = config

    def windows(self) -> list[WindowConfig]:
        sc, cfg = self.scenario, self.config
        end = sc.t0 + sc.n_windows * sc.window.length
        return _rolling(sc.t0, end, cfg)

    def load(self, index: int, window: WindowConfig) -> WindowData:
        sw = sample_asynchronous(self.scenario, index, window=window)
        return WindowData(index, window, sw.raw, sw.truth, sw.true_currents, sw.offsets)


def _rolling(t_start, t_end, cfg: PipelineConfig) -> list[WindowConfig]:
    out = []
    start = t_start
    while start + cfg.window_length <= t_end + 1e-9:
        out.append(WindowConfig(start, cfg.window_length, cfg.resolution))
        if cfg.max_windows is not None and len(out) >= cfg.max_windows:
            break
        start += cfg.window_stride
    if not out:
        raise ConfigError("data span is shorter than one window")
    return out


@dataclass(frozen=True)
class MeterData:
    feeder: FeederModel
    series: dict
    resolution: float
    power_base: float

    @property
    def meters(self) -> tuple:
        return tuple(dict.fromkeys(node for node, _ in self.series))


def _read_meter_file(path: Path) -> dict:
    out = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["timestamp_s", "value"]:
            raise ObservationError(f"{path}: expected header 'timestamp_s,value'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                out[float(row[0])] = float(row[1])
            except (ValueError, IndexError):
                raise ObservationError(f"{path}:{lineno}: cannot parse {row!r}") from None
    return out


def load_meter_data(manifest_path, feeder_path=None) -> MeterData:
    """Read a manifest plus per-meter ``timestamp_s,value`` files."""
    manifest_path = Path(manifest_path)
    man = json.loads(manifest_path.read_text())
    if man.get("schema") != MANIFEST_SCHEMA:
        raise ObservationError(f"unsupported manifest schema {man.get('schema')!r}")
    root = manifest_path.parent
    feeder = load_feeder(feeder_path or root / man["feeder"])
    if "power_base_mva" not in man:
        raise ObservationError("manifest must declare power_base_mva")
    series = {}
    for entry in man["meters"]:
        q = Quantity(entry["quantity"])
        if entry.get("units", "pu") != "pu":
            raise ObservationError(f"meter {entry['node']}: mismatched units {entry['units']!r}, expected pu")
        series[(str(entry["node"]), q)] = _read_meter_file(root / entry["file"])
    return MeterData(feeder, series, float(man["resolution"]), float(man["power_base_mva"]))


class MeterSource:
    """Rolling windows over real meter files; no ground truth."""

    def __init__(self, data: MeterData, config: PipelineConfig):
        if abs(data.resolution - config.resolution) > 1e-9:
            raise ConfigError(f"manifest resolution {data.resolution} differs from config {config.resolution}")
        self.data = data
        self.feeder = data.feeder
        self.config = config
        self.meters = data.meters
        for node in self.meters:
            if (node, Quantity.VOLTAGE_SQUARED) not in data.series or (node, Quantity.ACTIVE_POWER) not in data.series:
                raise ObservationError(f"meter {node}: voltage and active power are both required")

    def windows(self) -> list[WindowConfig]:
        stamps = [t for s in self.data.series.values() for t in s]
        return _rolling(min(stamps), max(stamps) + self.config.resolution, self.config)

    def load(self, index: int, window: WindowConfig) -> WindowData:
        span = (window.start, window.start + window.length)
        d = self.data
        obs = []
        for q in (Quantity.VOLTAGE_SQUARED, Quantity.ACTIVE_POWER):
            readings = {n: d.series[(n, q)] for n in self.meters}
            obs.append(build_observation_matrix(readings, span, window.resolution, q, self.meters,
                                                power_base=d.power_base))
        if all((n, Quantity.REACTIVE_POWER) in d.series for n in self.meters):
            readings = {n: d.series[(n, Quantity.REACTIVE_POWER)] for n in self.meters}
            obs.append(build_observation_matrix(readings, span, window.resolution, Quantity.REACTIVE_POWER,
                                                self.meters, power_base=d.power_base))
        else:
            # no reactive metering: constant power factor pseudo-measurements
            obs.append(replace(obs[1], quantity=Quantity.REACTIVE_POWER,
                               values=pseudo_reactive(obs[1].values, self.config.power_factor)))
        return WindowData(index, window, tuple(obs))


def make_source(config: PipelineConfig):
    if config.manifest:
        return MeterSource(load_meter_data(config.manifest, config.feeder), config)
    if config.scenario_dir:
        return ScenarioSource(load_scenario(config.scenario_dir), config)
    return ScenarioSource(build_scenario(config), config)


def build_scenario(config: PipelineConfig) -> Scenario:
    spec = dict(config.scenario)
    spec.setdefault("seed", config.seed)
    spec["window"] = WindowConfig(0.0, config.window_length, config.resolution)
    sc = generate_scenario(ScenarioSpec(**spec))
    if config.noise > 0:
        sc = sc.with_noise(relative_noise(sc, config.noise))
    return sc


# -- per-window work ----------------------------------------------------------

@dataclass
class RecoveryOutcome:
    triple: RecoveryTriple
    traces: dict
    iterations: int
    seconds: float


def run_recovery(raw: tuple, feeder: FeederModel | None, solver: SolverConfig, ablation: str) -> RecoveryOutcome:
    """Recover one window under the requested ablation."""
    t = time.perf_counter()
    if ablation == "passthrough":
        values = tuple(o.values for o in raw)
        triple = RecoveryTriple(values, tuple(np.zeros_like(v) for v in values), values)
        return RecoveryOutcome(triple, {}, 0, time.perf_counter() - t)
    if ablation == "independent":
        refined, sparse, traces, iters = [], [], {}, 0
        for k, tag in enumerate("UPQ"):
            omega = tuple(1.0 if j == k else 0.0 for j in range(3))
            res = recover(*raw, None, replace(solver, coupling=False, omega=omega))
            refined.append(res.triple.refined[k])
            sparse.append(res.triple.sparse_error[k])
            traces[tag] = res.trace
            iters += res.iterations
        triple = RecoveryTriple(tuple(refined), tuple(sparse), tuple(o.values for o in raw))
        return RecoveryOutcome(triple, traces, iters, time.perf_counter() - t)
    if ablation == "no-coupling":
        res = recover(*raw, None, replace(solver, coupling=False))
    else:
        res = recover(*raw, feeder, solver)
    return RecoveryOutcome(res.triple, {"": res.trace}, res.iterations, time.perf_counter() - t)


def _recovery_job(args):
    index, raw, feeder, solver, ablation = args
    try:
        return index, run_recovery(raw, feeder, solver, ablation), None
    except Exception as exc:  # reported per window by the caller
        return index, None, exc


def wape(est, truth) -> float:
    """Error in percent of the mean absolute true value."""
    return float(100.0 * np.mean(np.abs(np.asarray(est) - truth)) / np.mean(np.abs(truth)))


@dataclass
class WindowResult:
    data: WindowData
    recovery: RecoveryOutcome
    states: list
    metrics: dict
    bcse_seconds: float
    branch_ids: tuple = ()


def estimate_window(feeder: FeederModel, data: WindowData, triple: RecoveryTriple, sigma, k_max: int,
                    warm: StateVector | None):
    """BCSE for every row of a window, warm-started row to row."""
    meters = data.raw[0].meter_ids
    states, Js, iters, errs = [], [], [], []
    prev = warm
    U, P, Q = triple.refined
    for j in range(U.shape[0]):
        meas = build_measurements(feeder, meters, U[j], P[j], Q[j], sigma)
        res = estimate(meas, feeder, init=prev, k_max=k_max)
        prev = res.state
        states.append(res.state)
        Js.append(res.J)
        iters.append(res.iterations)
        if data.currents is not None:
            truth = StateVector.from_currents(data.currents[j]).vector
            errs.append(mpe(truth, res.state.vector, exclude_zero=True))
    return states, Js, iters, errs


def bcse_sigma(solver: SolverConfig, raw) -> tuple:
    """Measurement std for the state estimator: the recovery radii, or the
    default sensor accuracy where a radius is zero."""
    given = resolve_config(solver, raw).deltas
    default = resolve_config(SolverConfig(), raw).deltas
    return tuple(g if g > 0 else d for g, d in zip(given, default))


def window_metrics(feeder, data: WindowData, outcome: RecoveryOutcome, Js, iters, errs) -> dict:
    raw = tuple(o.values for o in data.raw)
    rec = outcome.triple.refined
    nan = float("nan")
    row = {"window": data.index, "start_s": data.window.start, "end_s": data.window.start + data.window.length,
           "m": raw[0].shape[0], "n_meters": raw[0].shape[1], "ablation": None}
    for k, tag in enumerate("UPQ"):
        if data.truth is not None:
            truth = data.truth[k].values
            row[f"raw_err_{tag}"] = wape(raw[k], truth)
            row[f"rec_err_{tag}"] = wape(rec[k], truth)
        else:
            row[f"raw_err_{tag}"] = row[f"rec_err_{tag}"] = nan
    R, X = sensitivity_matrices(feeder, data.raw[0].meter_ids)
    row["distflow_raw"] = distflow_residual(*raw, R, X, feeder.u0)
    row["distflow_recovered"] = distflow_residual(*rec, R, X, feeder.u0)
    row["distflow_truth"] = (distflow_residual(*(o.values for o in data.truth), R, X, feeder.u0)
                             if data.truth is not None else nan)
    row["eff_rank_raw_U"] = effective_rank(raw[0])
    row["eff_rank_rec_U"] = effective_rank(rec[0])
    row["recovery_iters"] = outcome.iterations
    row["bcse_mpe"] = float(np.mean(errs)) if errs else nan
    row["bcse_J_mean"] = float(np.mean(Js))
    row["bcse_iters_mean"] = float(np.mean(iters))
    return row


@dataclass
class PipelineRun:
    config: PipelineConfig
    results: list
    status: int
    error: str | None = None
    failed_window: int | None = None

    @property
    def metrics(self) -> list:
        return [r.metrics for r in self.results]

    def metrics_table(self) -> str:
        return format_metrics(self.metrics, self.config)


def process(config: PipelineConfig) -> PipelineRun:
    """Run the rolling-window pipeline in memory.

    Recoveries may run in worker processes; results are merged by window
    index, then the state estimator runs in window order so each window is
    warm-started from the last state of the previous one.
    """
    source = make_source(config)
    feeder = source.feeder
    solver = config.solver_config()
    windows = source.windows()
    loaded = [source.load(i, w) for i, w in enumerate(windows)]
    jobs = [(d.index, d.raw, feeder, solver, config.ablation) for d in loaded]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(_recovery_job, jobs))
    else:
        outcomes = []
        for job in jobs:
            outcomes.append(_recovery_job(job))
            if outcomes[-1][2] is not None:
                break
    run = PipelineRun(config, [], EXIT_OK)
    warm = None
    for data, (index, outcome, exc) in zip(loaded, outcomes):
        try:
            if exc is not None:
                raise exc
            sigma = bcse_sigma(solver, np.stack([o.values for o in data.raw]))
            t = time.perf_counter()
            states, Js, iters, errs = estimate_window(feeder, data, outcome.triple, sigma,
                                                      config.bcse_k_max, warm)
            elapsed = time.perf_counter() - t
        except SOLVER_ERRORS as err:
            run.status, run.failed_window, run.error = EXIT_SOLVER, index, str(WindowFailure(index, err))
            break
        except INPUT_ERRORS as err:
            run.status, run.failed_window, run.error = EXIT_INPUT, index, str(WindowFailure(index, err))
            break
        warm = states[-1]
        metrics = window_metrics(feeder, data, outcome, Js, iters, errs)
        metrics["ablation"] = config.ablation
        run.results.append(WindowResult(data, outcome, states, metrics, elapsed, feeder.bus_ids))
    return run


# -- output -------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _header(name: str, config: PipelineConfig) -> str:
    return f"# schema: smrecover.{name}/{SCHEMA_VERSION}\n# config: {config.config_json()}\n"


def _table(name: str, config: PipelineConfig, columns, rows) -> str:
    buf = io.StringIO()
    buf.write(_header(name, config))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) if isinstance(row, dict) else _fmt(v)
                         for c, v in zip(columns, row if not isinstance(row, dict) else columns)])
    return buf.getvalue()


def format_metrics(rows, config: PipelineConfig) -> str:
    return _table("metrics", config, METRIC_COLUMNS, rows)


def _matrix_text(name, config, A, columns) -> str:
    buf = io.StringIO()
    buf.write(_header(name, config))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in np.asarray(A):
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def error_histograms(results, edges_count=41) -> dict:
    """Per-quantity histograms of entrywise errors (percent of mean |truth|)."""
    out = {}
    for k, tag in enumerate("UPQ"):
        raw_e, rec_e = [], []
        for r in results:
            if r.data.truth is None:
                continue
            truth = r.data.truth[k].values
            scale = np.mean(np.abs(truth))
            raw_e.append(100.0 * (r.data.raw[k].values - truth).ravel() / scale)
            rec_e.append(100.0 * (r.recovery.triple.refined[k] - truth).ravel() / scale)
        if not raw_e:
            continue
        raw_e = np.concatenate(raw_e)
        rec_e = np.concatenate(rec_e)
        a = float(np.max(np.abs(np.concatenate([raw_e, rec_e])))) or 1.0
        edges = np.linspace(-a, a, edges_count)
        out[tag] = (edges, np.histogram(raw_e, edges)[0], np.histogram(rec_e, edges)[0])
    return out


def write_outputs(run: PipelineRun, out_dir) -> Path:
    """Write metrics, per-window artifacts, plot data and the run record."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = run.config
    (out / "metrics.csv").write_text(run.metrics_table())
    timing_rows = [(r.data.index, r.recovery.seconds, r.bcse_seconds) for r in run.results]
    (out / "timings.csv").write_text(_table("timings", cfg, ("window", "recovery_s", "bcse_s"), timing_rows))
    for r in run.results:
        wdir = out / "windows" / f"w{r.data.index:04d}"
        _write_recovery(wdir, cfg, r.data, r.recovery)
        (wdir / "states.csv").write_text(format_states(r, cfg))
    plots = out / "plots"
    plots.mkdir(exist_ok=True)
    for tag, (edges, raw_c, rec_c) in error_histograms(run.results).items():
        rows = zip(edges[:-1], edges[1:], raw_c, rec_c)
        (plots / f"error_hist_{tag}.csv").write_text(
            _table("histogram", cfg, ("bin_left", "bin_right", "count_raw", "count_recovered"), rows))
    rows = [(m["window"], m["distflow_raw"], m["distflow_recovered"], m["distflow_truth"]) for m in run.metrics]
    (plots / "residual_comparison.csv").write_text(
        _table("residuals", cfg, ("window", "distflow_raw", "distflow_recovered", "distflow_truth"), rows))
    rows = []
    for r in run.results:
        var = float(np.var(r.data.offsets)) if r.data.offsets is not None else float("nan")
        rows.append((r.data.index, var, r.metrics["eff_rank_raw_U"], r.metrics["eff_rank_rec_U"]))
    (plots / "rank_by_window.csv").write_text(
        _table("rank", cfg, ("window", "offset_variance_s2", "eff_rank_raw_U", "eff_rank_rec_U"), rows))
    record = {"schema": f"smrecover.run/{SCHEMA_VERSION}", "config": cfg.as_dict(),
              "status": run.status, "windows_completed": len(run.results),
              "failed_window": run.failed_window, "error": run.error}
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    return out


def format_states(result: WindowResult, config: PipelineConfig, delimiter=",") -> str:
    """Estimated branch currents: one line per (row, branch)."""
    buf = io.StringIO()
    buf.write(_header("states", config))
    writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    writer.writerow(("window", "row", "branch", "i_re", "i_im"))
    # branch k feeds bus k, so the bus id doubles as the branch id
    for j, st in enumerate(result.states):
        for b, re, im in zip(result.branch_ids, st.i_re, st.i_im):
            writer.writerow((result.data.index, j, b, _fmt(re), _fmt(im)))
    return buf.getvalue()


def run_pipeline(config: PipelineConfig) -> tuple[int, PipelineRun | None]:
    """Run the pipeline and write artifacts; returns ``(exit_code, run)``."""
    try:
        run = process(config)
    except (ConfigError, FeederError, ObservationError) + INPUT_ERRORS as exc:
        log.error("input error: %s", exc)
        return EXIT_INPUT, None
    except SOLVER_ERRORS as exc:
        log.error("solver failure: %s", exc)
        return EXIT_SOLVER, None
    if config.output_dir:
        write_outputs(run, config.output_dir)
    if run.status != EXIT_OK:
        log.error("%s", run.error)
    return run.status, run


# -- grid search --------------------------------------------------------------

@dataclass(frozen=True)
class GridPoint:
    params: dict
    J: float
    status: int

    def key(self, names):
        return (self.J, tuple(self.params[n] for n in names))


def grid_search(config: PipelineConfig, grid: dict) -> tuple[dict, list]:
    """Pick the solver parameters minimising the mean BCSE weighted residual.

    ``grid`` maps ``SolverConfig`` field names to candidate values. Ties in
    J are broken by the parameter values in lexicographic order of names.
    Returns ``(best_params, ranked_points)``.
    """
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("empty parameter grid")
    names = sorted(grid)
    valid = {f.name for f in dataclasses.fields(SolverConfig)}
    bad = [n for n in names if n not in valid]
    if bad:
        raise ConfigError(f"grid names unknown solver fields {bad}")
    points = []
    for values in itertools.product(*(grid[n] for n in names)):
        params = dict(zip(names, values))
        cfg = replace(config, solver={**config.solver, **params}, output_dir=None)
        run = process(cfg)
        if run.status == EXIT_OK and run.results:
            J = float(np.mean([m["bcse_J_mean"] for m in run.metrics]))
        else:
            J = float("inf")
        points.append(GridPoint(params, J, run.status))
    ranked = sorted(points, key=lambda p: p.key(names))
    return ranked[0].params, ranked


# -- argument parsing -----------------------------------------------------------

def _add_common(p: argparse.ArgumentParser):
    g = p.add_argument_group("data")
    g.add_argument("--config", help="JSON file with PipelineConfig fields")
    g.add_argument("--feeder", help="feeder JSON file (overrides the manifest's)")
    g.add_argument("--manifest", help="meter manifest JSON")
    g.add_argument("--scenario-dir", help="saved scenario bundle")
    g.add_argument("--nodes", type=int, help="synthetic feeder node count")
    g.add_argument("--depth", type=int, help="synthetic feeder depth")
    g.add_argument("--pv", type=float, help="PV penetration fraction")
    g.add_argument("--max-offset", type=float, help="largest meter clock offset (s)")
    g.add_argument("--horizon-windows", type=int, help="length of the synthetic series in windows")
    g.add_argument("--noise", type=float, help="entry noise as a fraction of signal RMS")
    g.add_argument("--seed", type=int)
    w = p.add_argument_group("windows")
    w.add_argument("--window-length", type=float)
    w.add_argument("--stride", type=float)
    w.add_argument("--resolution", type=float)
    w.add_argument("--max-windows", type=int)
    s = p.add_argument_group("solver")
    for tag in "upq":
        s.add_argument(f"--lambda-{tag}", type=float)
        s.add_argument(f"--delta-{tag}", type=float)
    s.add_argument("--omega", type=float, nargs=3)
    s.add_argument("--L", type=float, dest="L")
    s.add_argument("--max-iters", type=int, dest="max_outer_iters")
    s.add_argument("--history-weights", choices=("uniform", "nesterov"))
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--output-dir")
    p.add_argument("--workers", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def config_from_args(args) -> PipelineConfig:
    """Defaults < config file < environment < command-line flags."""
    data = {}
    if args.config:
        data = json.loads(Path(args.config).read_text())
    if os.environ.get(ENV_OUTPUT_DIR):
        data["output_dir"] = os.environ[ENV_OUTPUT_DIR]
    if os.environ.get(ENV_WORKERS):
        data["workers"] = int(os.environ[ENV_WORKERS])
    for name in ("feeder", "manifest", "scenario_dir", "noise", "seed", "window_length", "stride",
                 "resolution", "max_windows", "ablation", "output_dir", "workers"):
        v = getattr(args, name, None)
        if v is not None:
            data[name] = v
    scenario = dict(data.get("scenario", {}))
    for arg, key in (("nodes", "n_nodes"), ("depth", "depth"), ("pv", "pv_penetration"),
                     ("max_offset", "max_offset"), ("horizon_windows", "n_windows")):
        v = getattr(args, arg, None)
        if v is not None:
            scenario[key] = v
    data["scenario"] = scenario
    solver = dict(data.get("solver", {}))
    for name in ("lambda_u", "lambda_p", "lambda_q", "delta_u", "delta_p", "delta_q", "omega", "L",
                 "max_outer_iters", "history_weights"):
        v = getattr(args, name, None)
        if v is not None:
            solver[name] = list(v) if name == "omega" else v
    data["solver"] = solver
    return PipelineConfig.from_dict(data)


def _parse_grid(items) -> dict:
    grid = {}
    for item in items or []:
        name, _, values = item.partition("=")
        if not values:
            raise ConfigError(f"grid entry {item!r} must look like name=v1,v2")
        grid[name.strip().replace("-", "_")] = [float(v) for v in values.split(",")]
    return grid


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smrecover", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", help="generate a scenario bundle and meter files")
    _add_common(p)
    p = sub.add_parser("recover", help="recover one window")
    _add_common(p)
    p.add_argument("--window-index", type=int, default=0)
    p = sub.add_parser("pipeline", help="rolling recover + state estimation")
    _add_common(p)
    p = sub.add_parser("rank-experiment", help="effective rank of raw M_U vs offset variance")
    _add_common(p)
    p.add_argument("--levels", type=float, nargs="+", default=[0.0, 100.0 ** 2, 200.0 ** 2, 300.0 ** 2, 450.0 ** 2])
    p.add_argument("--replicates", type=int, default=20)
    p.add_argument("--source-variation", type=float, default=0.02,
                   help="substation voltage fluctuation (relative std)")
    p = sub.add_parser("grid-search", help="tune solver parameters by BCSE residual")
    _add_common(p)
    p.add_argument("--grid", action="append", metavar="NAME=V1,V2",
                   help="solver field and candidate values; repeatable")
    p.add_argument("--holdout-seed", type=int, help="seed of the held-out scenario (default seed + 1000)")
    return parser


def _cmd_synth(cfg: PipelineConfig) -> int:
    sc = build_scenario(cfg)
    out = Path(cfg.output_dir)
    save_scenario(sc, out / "scenario")
    write_meter_data(sc, out / "meter_data")
    (out / "synth.json").write_text(json.dumps(
        {"schema": f"smrecover.synth/{SCHEMA_VERSION}", "config": cfg.as_dict()}, indent=2, sort_keys=True))
    print(f"scenario bundle: {out / 'scenario'}")
    print(f"meter data:      {out / 'meter_data' / 'manifest.json'}")
    return EXIT_OK


def _write_recovery(wdir: Path, cfg: PipelineConfig, data: WindowData, outcome: RecoveryOutcome):
    wdir.mkdir(parents=True, exist_ok=True)
    meters = list(data.raw[0].meter_ids)
    for k, tag in enumerate("UPQ"):
        (wdir / f"refined_{tag}.csv").write_text(_matrix_text("matrix", cfg, outcome.triple.refined[k], meters))
        (wdir / f"sparse_{tag}.csv").write_text(_matrix_text("matrix", cfg, outcome.triple.sparse_error[k], meters))
    for tag, trace in outcome.traces.items():
        name = f"trace_{tag}.csv" if tag else "trace.csv"
        (wdir / name).write_text(_header("trace", cfg) + format_trace(trace))


def _cmd_recover(cfg: PipelineConfig, index: int) -> int:
    source = make_source(cfg)
    windows = source.windows()
    if not 0 <= index < len(windows):
        raise ConfigError(f"window index {index} outside 0..{len(windows) - 1}")
    data = source.load(index, windows[index])
    outcome = run_recovery(data.raw, source.feeder, cfg.solver_config(), cfg.ablation)
    wdir = Path(cfg.output_dir) / "windows" / f"w{index:04d}"
    _write_recovery(wdir, cfg, data, outcome)
    if data.truth is not None:
        for k, tag in enumerate("UPQ"):
            print(f"{tag}: raw error {wape(data.raw[k].values, data.truth[k].values):.3f}%  "
                  f"recovered {wape(outcome.triple.refined[k], data.truth[k].values):.3f}%")
    print(f"iterations: {outcome.iterations}; output: {wdir}")
    return EXIT_OK


def _cmd_rank(cfg: PipelineConfig, levels, replicates, source_variation) -> int:
    spec = dict(cfg.scenario)
    spec.setdefault("seed", cfg.seed)
    spec.setdefault("source_variation", source_variation)
    cfg = replace(cfg, scenario=spec)
    sc = build_scenario(cfg)
    rows, rho = rank_experiment(sc, levels, replicates, seed=cfg.seed)
    out = Path(cfg.output_dir)
    (out / "plots").mkdir(parents=True, exist_ok=True)
    text = _table("rank_vs_asynchrony", cfg, ("offset_variance_s2", "mean_eff_rank", "std_eff_rank"), rows)
    (out / "plots" / "rank_vs_asynchrony.csv").write_text(text + f"# spearman: {rho!r}\n")
    for level, mean, std in rows:
        print(f"variance {level:10.1f} s^2  mean rank {mean:.3f}  (std {std:.3f})")
    print(f"spearman: {rho:.3f}")
    return EXIT_OK


def _cmd_grid(cfg: PipelineConfig, grid: dict, holdout_seed) -> int:
    seed = cfg.seed + 1000 if holdout_seed is None else holdout_seed
    best, ranked = grid_search(replace(cfg, seed=seed, scenario={**cfg.scenario, "seed": seed}), grid)
    names = sorted(grid)
    rows = [tuple(p.params[n] for n in names) + (p.J, p.status) for p in ranked]
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "grid_report.csv").write_text(_table("grid", cfg, tuple(names) + ("mean_J", "status"), rows))
    for p in ranked:
        print(" ".join(f"{n}={p.params[n]:g}" for n in names), f"J={p.J:.6g}")
    print("best:", json.dumps(best, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = config_from_args(args)
        if args.command == "pipeline":
            code, run = run_pipeline(cfg)
            if run is not None:
                sys.stdout.write(run.metrics_table())
            return code
        if args.command == "synth":
            return _cmd_synth(cfg)
        if args.command == "recover":
            return _cmd_recover(cfg, args.window_index)
        if args.command == "rank-experiment":
            return _cmd_rank(cfg, args.levels, args.replicates, args.source_variation)
        return _cmd_grid(cfg, _parse_grid(args.grid), args.holdout_seed)
    except SOLVER_ERRORS as exc:
        log.error("solver failure: %s", exc)
        return EXIT_SOLVER
    except (ConfigError, FeederError, ObservationError) + INPUT_ERRORS as exc:
        log.error("input error: %s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
