"""
Reproduction runs of the two opinion-dynamics tests, the particle-to-mean-field convergence study
and the validation suite.

Every entry point takes an `ExperimentConfig`, writes CSV and JSON artifacts under
``cfg.outputs.directory`` and records them in a MANIFEST.json together with the config hash.
"""

import math
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
import numpy.typing as npt
import pandas as pd
from pydantic import BaseModel
from scipy.signal import find_peaks

from mflead._internal.export import ArtifactWriter
from mflead._internal.metrics import SimMetrics
from mflead._internal.state import _GLOBAL_STATE
from mflead.audit import AuditReport, assumption_audit
from mflead.config import ExperimentConfig, MpcConfig
from mflead.exceptions import InvalidState, MfleadError
from mflead.ingredients import (
    activation_field,
    follower_barycenter,
    full_transition,
    mass_fractions,
    rate_field,
    resolve_normalizers,
    split_weights,
)
from mflead.meanfield import FvState, cfl_dt, fv_step, simulate_pde
from mflead.model_spec import ModelSpec
from mflead.mpc import MpcController, project_to_K, solve_step
from mflead.particles import Controller, simulate, support_ratio, zero_controller
from mflead.state_space import (
    GridAxes,
    GridDensity,
    GridView,
    MeasureView,
    ParticleView,
    grid_from_density,
    sample_from_grid,
    total_mass,
)
from mflead.transport import DiscreteMeasure, label_coordinate_measure, w1_1d, w1_exact_small, x_marginal_measure

FloatArray = npt.NDArray[np.float64]

Regime = Literal["off", "on"]

TIME_MATCH = 1e-9
VALIDATION_HORIZON = 0.1


@dataclass(frozen=True)
class PreparedExperiment:
    model: ModelSpec
    axes: GridAxes
    psi0: GridDensity


def prepare(cfg: ExperimentConfig) -> PreparedExperiment:
    """
    Resolve the config's model against its grid.

    Unset kernel widths become one x-cell. Unset concentration normalizers are fitted to the grid
    initial datum and then shared by both backends.
    """
    if cfg.model.dim != 1:
        raise ValueError(f"experiments run on a one-dimensional opinion space, got dim={cfg.model.dim}")
    axes = GridAxes(cfg.grid, cfg.model.label_space.n_free)
    model = cfg.model.with_epsilon(axes.dx)
    psi0 = grid_from_density(cfg.initial, axes)
    if model.transition.normalizers is None:
        model = model.with_normalizers(resolve_normalizers(model, psi0.view()))
    return PreparedExperiment(model=model, axes=axes, psi0=psi0)


class Check(BaseModel):
    """A derived run check: `observed <comparison> threshold`."""

    name: str
    observed: float
    comparison: Literal["<=", ">=", "<", ">"]
    threshold: float
    passed: bool

    @staticmethod
    def of(name: str, observed: float, comparison: Literal["<=", ">=", "<", ">"], threshold: float) -> "Check":
        passed = {
            "<=": observed <= threshold,
            ">=": observed >= threshold,
            "<": observed < threshold,
            ">": observed > threshold,
        }[comparison]
        return Check(name=name, observed=observed, comparison=comparison, threshold=threshold, passed=bool(passed))


class RunSummary(BaseModel):
    backend: Literal["pde", "particle"]
    regime: Regime
    T: float
    n_steps: int
    cost: float
    max_fraction_sum_drift: float
    final_fractions: dict[str, float]
    probe_time: float
    clusters: int
    barycenter: float
    mass_near: dict[str, float]
    max_mass_drift: float | None = None
    min_cell: float | None = None
    masked_mass: float | None = None
    mpc_unconverged: int | None = None
    n_agents: int | None = None
    seed: int | None = None


class RunBundle(BaseModel):
    name: str
    experiment: str
    out_dir: str
    config_hash: str
    runs: list[RunSummary]
    checks: list[Check]
    manifest: str

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def count_clusters(density: FloatArray, peak_fraction: float) -> int:
    """
    Separated local maxima of a 1-D density.

    A peak counts when it reaches `peak_fraction` of the maximum both in height and in prominence.
    The profile is zero-padded so boundary maxima are detected.
    """
    top = float(np.max(density, initial=0.0))
    if top <= 0:
        return 0
    padded = np.pad(np.asarray(density, dtype=float), 1)
    peaks, _ = find_peaks(padded, height=peak_fraction * top, prominence=peak_fraction * top)
    return int(peaks.size)


def _on(t: float, times: Iterable[float]) -> bool:
    return any(abs(t - s) <= TIME_MATCH for s in times)


def _time_tag(t: float) -> str:
    return f"t{t:g}"


def _spatial_frame(model: ModelSpec, view: MeasureView, axes: GridAxes) -> pd.DataFrame:
    """Marginal densities of every label on the grid x-cells."""
    ls = model.label_space
    w = split_weights(ls, model.marginal_split, view.lam)
    edges = np.linspace(axes.spec.x_min, axes.spec.x_max, axes.spec.n_x + 1)
    data: dict[str, FloatArray] = {"x": axes.x_centers}
    total = np.zeros(axes.spec.n_x)
    for j, label in enumerate(ls.labels):
        density = np.histogram(view.x[:, 0], bins=edges, weights=view.weights * w[:, j])[0] / axes.dx
        data[f"mu_{label}"] = density
        total += density
    data["mu_total"] = total
    return pd.DataFrame(data)


def _label_frame(model: ModelSpec, view: MeasureView, axes: GridAxes) -> pd.DataFrame:
    """Label-space marginal densities on the cells of the label grid inside the simplex."""
    ls = model.label_space
    w = split_weights(ls, model.marginal_split, view.lam)
    n = axes.spec.n_lambda
    keep = axes.label_mask
    mesh = np.meshgrid(*([axes.lam_centers] * axes.n_free), indexing="ij")
    data: dict[str, FloatArray] = {f"lambda_{label}": m[keep] for label, m in zip(ls.free_labels, mesh, strict=True)}
    data["nu"] = view.label_collapse(view.weights, n)[keep]
    for j, label in enumerate(ls.labels):
        data[f"nu_{label}"] = view.label_collapse(view.weights * w[:, j], n)[keep]
    return pd.DataFrame(data)


def _density_frame(model: ModelSpec, g: GridDensity) -> pd.DataFrame:
    axes = g.axes
    data: dict[str, FloatArray] = {"x": axes.atom_x[:, 0]}
    for c, label in enumerate(model.label_space.free_labels):
        data[f"lambda_{label}"] = axes.atom_lam[:, c]
    data["psi"] = g.values.reshape(-1)[axes.active]
    return pd.DataFrame(data)


def _mass_near(model: ModelSpec, view: MeasureView, center: float, radius: float) -> float:
    ls = model.label_space
    g = split_weights(ls, model.marginal_split, view.lam)[:, ls.index(model.follower)]
    near = np.abs(view.x[:, 0] - center) <= radius
    return float(view.weights[near] @ g[near])


class _Recorder:
    """Collects fractions, rasters, snapshots and probe statistics of one run as states stream by."""

    def __init__(self, cfg: ExperimentConfig, prepared: PreparedExperiment):
        self.cfg = cfg
        self.model = prepared.model
        self.axes = prepared.axes
        self.output_times = cfg.time.output_times()
        self.probe_time = min(cfg.checks.probe_time, cfg.time.T)
        self.fractions: list[dict[str, float]] = []
        self.raster: list[pd.DataFrame] = []
        self.snapshots: dict[float, list[tuple[str, pd.DataFrame]]] = {}
        self.probe: dict[str, Any] = {}
        self.min_cell = math.inf
        self.masked_mass = 0.0

    @property
    def times(self) -> list[float]:
        return sorted(set(self.output_times) | {self.probe_time})

    def __call__(self, t: float, view: MeasureView, density: GridDensity | None = None) -> None:
        model = self.model
        fractions = mass_fractions(model, view)
        self.fractions.append(
            {"t": t, **{f"fraction_{k}": v for k, v in fractions.items()}, "fraction_sum": sum(fractions.values())}
        )
        if density is not None:
            self.min_cell = min(self.min_cell, float(density.values.min()))
            masked = density.values[~density.axes.mask]
            self.masked_mass = max(self.masked_mass, float(masked.sum()) * density.axes.cell_volume)

        spatial = None
        if _on(t, self.output_times):
            spatial = _spatial_frame(model, view, self.axes)
            self.raster.append(spatial.assign(t=t)[["t"] + list(spatial.columns)])
        if _on(t, self.cfg.time.snapshot_times):
            spatial = spatial if spatial is not None else _spatial_frame(model, view, self.axes)
            frames = [("marginals", spatial), ("label_marginals", _label_frame(model, view, self.axes))]
            if density is not None and self.cfg.outputs.density_snapshots:
                frames.append(("density", _density_frame(model, density)))
            self.snapshots[t] = frames
        if _on(t, [self.probe_time]):
            self.record_probe(view, spatial)

    def record_probe(self, view: MeasureView, spatial: pd.DataFrame | None = None) -> None:
        model, checks = self.model, self.cfg.checks
        if spatial is None:
            spatial = _spatial_frame(model, view, self.axes)
        near = {name: _mass_near(model, view, x, checks.target_radius) for name, x in checks.targets.items()}
        self.probe = {
            "clusters": count_clusters(spatial["mu_total"].to_numpy(), checks.cluster_peak_fraction),
            "barycenter": float(follower_barycenter(model, view)[1][0]),
            "mass_near": near,
        }

    def export(self, writer: ArtifactWriter, prefix: str, regime: Regime) -> None:
        experiment = self.cfg.experiment
        evolution = f"{experiment} {'controlled' if regime == 'on' else 'uncontrolled'} evolution"
        writer.write_frame(
            f"{prefix}/fractions.csv",
            pd.DataFrame(self.fractions),
            figure=f"{experiment} population fractions",
            description="Follower and leader mass fractions over time",
        )
        writer.write_frame(
            f"{prefix}/marginals_raster.csv",
            pd.concat(self.raster, ignore_index=True),
            figure=evolution,
            description="Space-time raster of the spatial marginals",
        )
        for t, frames in sorted(self.snapshots.items()):
            for kind, frame in frames:
                writer.write_frame(f"{prefix}/{kind}_{_time_tag(t)}.csv", frame, figure=evolution)

    def series_drift(self) -> float:
        return max((abs(row["fraction_sum"] - 1.0) for row in self.fractions), default=0.0)


def _controller(prepared: PreparedExperiment, cfg: ExperimentConfig, regime: Regime) -> Controller:
    return MpcController(prepared.model, cfg.mpc) if regime == "on" else zero_controller


def _regimes(cfg: ExperimentConfig) -> list[Regime]:
    return ["off", "on"] if cfg.controlled == "both" else [cfg.controlled]


def _backends(cfg: ExperimentConfig) -> list[Literal["pde", "particle"]]:
    return ["pde", "particle"] if cfg.backend == "both" else [cfg.backend]


def _unconverged(controller: Controller) -> int | None:
    if isinstance(controller, MpcController):
        return sum(1 for row in controller.diagnostics if not row["converged"])
    return None


def _run_pde(prepared: PreparedExperiment, cfg: ExperimentConfig, regime: Regime, writer: ArtifactWriter) -> RunSummary:
    recorder = _Recorder(cfg, prepared)
    controller = _controller(prepared, cfg, regime)
    run = simulate_pde(
        prepared.model,
        prepared.psi0,
        controller,
        T=cfg.time.T,
        dt_max=cfg.time.dt_max,
        safety=cfg.time.cfl_safety,
        fixed_dt=cfg.time.dt,
        output_times=recorder.times,
        keep_states=False,
        observer=lambda s: recorder(s.t, s.density.view(), s.density),
    )
    prefix = f"pde/{regime}"
    recorder.export(writer, prefix, regime)
    if isinstance(controller, MpcController):
        writer.write_frame(f"{prefix}/mpc_diagnostics.csv", controller.diagnostics_frame())
    return RunSummary(
        backend="pde",
        regime=regime,
        T=cfg.time.T,
        n_steps=run.n_steps,
        cost=run.cost,
        max_fraction_sum_drift=recorder.series_drift(),
        final_fractions={k: v for k, v in recorder.fractions[-1].items() if k.startswith("fraction_")},
        probe_time=recorder.probe_time,
        max_mass_drift=run.max_mass_drift,
        min_cell=recorder.min_cell,
        masked_mass=recorder.masked_mass,
        mpc_unconverged=_unconverged(controller),
        **recorder.probe,
    )


def _run_particles(
    prepared: PreparedExperiment, cfg: ExperimentConfig, regime: Regime, writer: ArtifactWriter
) -> RunSummary:
    n, seed = max(cfg.particle.n_agents), cfg.particle.seeds[0]
    y0 = sample_from_grid(prepared.psi0, n, np.random.default_rng(seed))
    controller = _controller(prepared, cfg, regime)
    traj = simulate(
        prepared.model,
        y0,
        controller,
        T=cfg.time.T,
        dt=cfg.particle.dt,
        scheme=cfg.particle.integrator,
        record_every=cfg.particle.export_every,
    )
    recorder = _Recorder(cfg, prepared)
    for r, t in enumerate(traj.times):
        recorder(float(t), ParticleView(traj.x[r], traj.lam[r]))
    if not recorder.probe:
        r = traj.index_at(recorder.probe_time)
        recorder.record_probe(ParticleView(traj.x[r], traj.lam[r]))

    prefix = f"particle/{regime}"
    recorder.export(writer, prefix, regime)
    writer.write_frame(
        f"{prefix}/trajectory.csv", traj.to_frame(), description=f"Agent trajectories, N={n}, seed={seed}"
    )
    if isinstance(controller, MpcController):
        writer.write_frame(f"{prefix}/mpc_diagnostics.csv", controller.diagnostics_frame())
    return RunSummary(
        backend="particle",
        regime=regime,
        T=cfg.time.T,
        n_steps=len(traj.step_times) - 1,
        cost=traj.cost,
        max_fraction_sum_drift=recorder.series_drift(),
        final_fractions={k: v for k, v in recorder.fractions[-1].items() if k.startswith("fraction_")},
        probe_time=recorder.probe_time,
        mpc_unconverged=_unconverged(controller),
        n_agents=n,
        seed=seed,
        **recorder.probe,
    )


def _run_checks(cfg: ExperimentConfig, model: ModelSpec, runs: Sequence[RunSummary]) -> list[Check]:
    thresholds = cfg.checks
    x_bar = model.lagrangian.x_bar[0]
    checks = []
    for backend in _backends(cfg):
        by_regime = {run.regime: run for run in runs if run.backend == backend}
        for regime, run in by_regime.items():
            name = f"{backend}_{regime}"
            drift = run.max_fraction_sum_drift
            checks.append(Check.of(f"{name}_fraction_sum_drift", drift, "<=", thresholds.fraction_tolerance))
            if run.max_mass_drift is not None:
                checks.append(Check.of(f"{name}_mass_drift", run.max_mass_drift, "<=", thresholds.mass_tolerance))
                checks.append(Check.of(f"{name}_min_cell", run.min_cell or 0.0, ">=", 0.0))
                checks.append(Check.of(f"{name}_masked_mass", run.masked_mass or 0.0, "<=", 0.0))

        off, on = by_regime.get("off"), by_regime.get("on")
        if cfg.experiment == "test1":
            if off is not None:
                checks.append(Check.of(f"{backend}_off_clusters", off.clusters, ">=", thresholds.min_clusters))
                gap = abs(off.barycenter - x_bar)
                checks.append(Check.of(f"{backend}_off_barycenter_gap", gap, ">", thresholds.uncontrolled_gap))
            if on is not None:
                gap = abs(on.barycenter - x_bar)
                checks.append(Check.of(f"{backend}_on_barycenter_gap", gap, "<=", thresholds.barycenter_tolerance))
        elif cfg.experiment == "test2":
            if off is not None and {"populist", "x_bar"} <= off.mass_near.keys():
                lead = off.mass_near["populist"] - off.mass_near["x_bar"]
                checks.append(Check.of(f"{backend}_off_populist_over_target", lead, ">", 0.0))
            if off is not None and on is not None and "x_bar" in on.mass_near:
                gain = on.mass_near["x_bar"] - off.mass_near["x_bar"]
                checks.append(Check.of(f"{backend}_on_target_gain", gain, ">", 0.0))
        if off is not None and on is not None:
            checks.append(Check.of(f"{backend}_cost_on_minus_off", on.cost - off.cost, "<=", 0.0))
    return checks


def _run_experiment(cfg: ExperimentConfig, arity: int) -> RunBundle:
    if cfg.model.label_space.arity != arity:
        raise ValueError(f"{cfg.name} needs a {arity}-label model, got {cfg.model.label_space.arity} labels")
    prepared = prepare(cfg)
    writer = ArtifactWriter(cfg.outputs.directory, cfg.config_hash(), cfg.outputs.formats)
    _GLOBAL_STATE.logger.info(
        "Running %s (%s): backends %s, regimes %s, T=%g",
        cfg.name,
        cfg.experiment,
        _backends(cfg),
        _regimes(cfg),
        cfg.time.T,
    )

    initial = prepared.psi0.view()
    initial_figure = f"{cfg.experiment} initial data"
    writer.write_frame(
        "initial/marginals.csv", _spatial_frame(prepared.model, initial, prepared.axes), figure=initial_figure
    )
    writer.write_frame(
        "initial/label_marginals.csv", _label_frame(prepared.model, initial, prepared.axes), figure=initial_figure
    )
    if cfg.outputs.density_snapshots:
        writer.write_frame("initial/density.csv", _density_frame(prepared.model, prepared.psi0), figure=initial_figure)

    runs = []
    for backend in _backends(cfg):
        for regime in _regimes(cfg):
            if backend == "pde":
                runs.append(_run_pde(prepared, cfg, regime, writer))
            else:
                runs.append(_run_particles(prepared, cfg, regime, writer))

    checks = _run_checks(cfg, prepared.model, runs)
    for check in checks:
        log = _GLOBAL_STATE.logger.info if check.passed else _GLOBAL_STATE.logger.warning
        log("Check %s: %.6g %s %.6g -> %s", check.name, check.observed, check.comparison, check.threshold, check.passed)

    summary = {
        "name": cfg.name,
        "experiment": cfg.experiment,
        "normalizers": prepared.model.transition.normalizers,
        "thresholds": cfg.checks,
        "runs": runs,
        "checks": checks,
        "notes": cfg.notes,
    }
    writer.write_json("summary.json", summary, description="Run summaries and derived checks")
    writer.write_json("config.json", cfg.model_dump(mode="json"), description="Config that produced this bundle")
    manifest = writer.write_manifest({"name": cfg.name, "checks": checks})
    return RunBundle(
        name=cfg.name,
        experiment=cfg.experiment,
        out_dir=str(writer.out_dir),
        config_hash=writer.config_hash,
        runs=runs,
        checks=checks,
        manifest=str(manifest),
    )


def run_test1(cfg: ExperimentConfig) -> RunBundle:
    """
    Opinion dynamics with emerging leaders: uncontrolled and controlled runs of the two-label model.

    Exports spatial and label marginals at the snapshot times, space-time rasters and the follower and
    leader fraction series, and checks cluster formation and barycenter steering at the probe time.
    """
    return _run_experiment(cfg, arity=2)


def run_test2(cfg: ExperimentConfig) -> RunBundle:
    """
    Opinion dynamics with competing leaders: the three-label model, comparing the follower mass near
    the control target and near the populist leaders with and without control.
    """
    return _run_experiment(cfg, arity=3)


@dataclass(frozen=True)
class _ParticleJob:
    model: ModelSpec
    psi0: GridDensity
    regime: Regime
    n_agents: int
    seed: int
    T: float
    dt: float
    scheme: str
    probe_times: tuple[float, ...]
    mpc: MpcConfig


def _run_particle_job(job: _ParticleJob) -> dict[str, Any]:
    rng = np.random.default_rng([job.seed, job.n_agents])
    y0 = sample_from_grid(job.psi0, job.n_agents, rng)
    controller: Controller = MpcController(job.model, job.mpc) if job.regime == "on" else zero_controller
    traj = simulate(job.model, y0, controller, job.T, job.dt, job.scheme)
    probes = {t: traj.index_at(t) for t in job.probe_times}
    return {
        "cost": traj.cost,
        "x": {t: traj.x[r] for t, r in probes.items()},
        "lam": {t: traj.lam[r] for t, r in probes.items()},
    }


@dataclass
class ConvergenceResult:
    """
    Per-(regime, N, seed, probe time) distances between particle and grid marginals.

    `slopes` holds the log-log slope of the median x-marginal W1 against N per regime and probe
    time, keyed ``"<regime>@t=<time>"``.
    """

    table: pd.DataFrame
    medians: pd.DataFrame
    slopes: dict[str, float]
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def _particle_measure(points: FloatArray) -> DiscreteMeasure:
    return DiscreteMeasure(points, np.full(points.shape[0], 1.0 / points.shape[0]))


def convergence_study(cfg: ExperimentConfig) -> ConvergenceResult:
    """
    Compare particle runs of increasing N against one finite-volume reference per regime.

    For every N and seed, agents are drawn i.i.d. from the grid initial datum and simulated to the
    last probe time. W1 is measured between the x-marginals and between the marginals of each free
    label coordinate (summed over coordinates), together with the gap between the particle and
    mean-field costs over the same horizon.
    """
    n_agents = cfg.particle.n_agents
    seeds = cfg.particle.seeds
    if len(n_agents) < 3 or list(n_agents) != sorted(set(n_agents)):
        raise ValueError(f"convergence study needs at least three ascending N, got {n_agents}")
    if len(seeds) < 5:
        raise ValueError(f"convergence study needs at least five seeds, got {len(seeds)}")

    prepared = prepare(cfg)
    model = prepared.model
    probes = tuple(sorted(cfg.particle.probe_times))
    horizon = probes[-1]
    writer = ArtifactWriter(cfg.outputs.directory, cfg.config_hash(), cfg.outputs.formats)
    _GLOBAL_STATE.logger.info(
        "Convergence study %s: N=%s, %d seeds, probes %s, workers=%d",
        cfg.name,
        n_agents,
        len(seeds),
        probes,
        cfg.particle.workers,
    )

    rows = []
    for regime in _regimes(cfg):
        reference = simulate_pde(
            model,
            prepared.psi0,
            _controller(prepared, cfg, regime),
            T=horizon,
            dt_max=cfg.time.dt_max,
            safety=cfg.time.cfl_safety,
            fixed_dt=cfg.time.dt,
            output_times=probes,
        )
        ref_views = {t: reference.state_at(t).density.view() for t in probes}
        jobs = [
            _ParticleJob(
                model=model,
                psi0=prepared.psi0,
                regime=regime,
                n_agents=n,
                seed=seed,
                T=horizon,
                dt=cfg.particle.dt,
                scheme=cfg.particle.integrator,
                probe_times=probes,
                mpc=cfg.mpc,
            )
            for n in n_agents
            for seed in seeds
        ]
        if cfg.particle.workers > 1:
            with ProcessPoolExecutor(max_workers=cfg.particle.workers) as pool:
                results = list(pool.map(_run_particle_job, jobs))
        else:
            results = [_run_particle_job(job) for job in jobs]

        for job, result in zip(jobs, results, strict=True):
            for t in probes:
                ref = ref_views[t]
                lam = result["lam"][t]
                rows.append(
                    {
                        "regime": regime,
                        "n_agents": job.n_agents,
                        "seed": job.seed,
                        "t": t,
                        "w1_x": w1_1d(_particle_measure(result["x"][t]), x_marginal_measure(ref)),
                        "w1_lambda": sum(
                            w1_1d(_particle_measure(lam[:, c : c + 1]), label_coordinate_measure(ref, c))
                            for c in range(lam.shape[1])
                        ),
                        "cost_gap": abs(result["cost"] - reference.cost),
                    }
                )

    table = pd.DataFrame(rows)
    medians = (
        table.drop(columns="seed").groupby(["regime", "t", "n_agents"], as_index=False).median(numeric_only=True)
    )
    slopes = {}
    checks = []
    for (regime, t), group in medians.groupby(["regime", "t"]):
        group = group.sort_values("n_agents")
        key = f"{regime}@t={t:g}"
        slope = float(np.polyfit(np.log(group["n_agents"]), np.log(group["w1_x"]), 1)[0])
        slopes[key] = slope
        w1_steps = np.diff(group["w1_x"].to_numpy())
        gap_steps = np.diff(group["cost_gap"].to_numpy())
        checks.append(Check.of(f"{key}_w1_x_largest_increase", float(w1_steps.max()), "<", 0.0))
        checks.append(Check.of(f"{key}_slope_upper", slope, "<=", -0.3))
        checks.append(Check.of(f"{key}_slope_lower", slope, ">=", -0.7))
        checks.append(Check.of(f"{key}_cost_gap_largest_increase", float(gap_steps.max()), "<", 0.0))

    figure = f"{cfg.experiment} particle to mean-field convergence"
    writer.write_frame("convergence.csv", table, figure=figure, description="W1 distances and cost gaps per run")
    writer.write_frame("convergence_medians.csv", medians, figure=figure, description="Medians over seeds")
    writer.write_json("convergence_summary.json", {"slopes": slopes, "checks": checks, "probe_times": probes})
    writer.write_manifest({"name": cfg.name, "checks": checks})
    _GLOBAL_STATE.logger.info("Convergence study finished: slopes %s", slopes)
    return ConvergenceResult(table=table, medians=medians, slopes=slopes, checks=checks)


def _restrict(fine: FloatArray) -> FloatArray:
    """Average 2^D blocks of a grid array onto the grid with half the cells per axis."""
    shape = []
    for n in fine.shape:
        shape += [n // 2, 2]
    return fine.reshape(shape).mean(axis=tuple(range(1, 2 * fine.ndim, 2)))


@dataclass(frozen=True)
class RefinementReport:
    n_x: list[int]
    errors: list[float]
    """L1 distance between the solutions on consecutive meshes."""

    factors: list[float]
    """Ratios of consecutive errors; about 2 for a first-order scheme."""


def scheme_order_study(cfg: ExperimentConfig, n_x: Sequence[int] = (32, 64, 128), T: float = 1.0) -> RefinementReport:
    """
    L1 self-convergence of the uncontrolled finite-volume solution at time T under mesh halving.

    Each mesh keeps the config's ratio of label cells to x-cells. At least three meshes are needed
    for one factor.
    """
    levels = sorted(n_x)
    if len(levels) < 3 or any(b != 2 * a for a, b in zip(levels, levels[1:], strict=False)):
        raise ValueError(f"mesh levels must double at least twice, got {levels}")
    ratio = cfg.grid.n_lambda / cfg.grid.n_x

    solutions = []
    for n in levels:
        grid = cfg.grid.model_copy(update={"n_x": n, "n_lambda": max(2, round(n * ratio))})
        level_cfg = cfg.model_copy(update={"grid": grid})
        prepared = prepare(level_cfg)
        run = simulate_pde(
            prepared.model,
            prepared.psi0,
            zero_controller,
            T=T,
            dt_max=cfg.time.dt_max,
            safety=cfg.time.cfl_safety,
            keep_states=False,
        )
        solutions.append(run.final.density)  # type: ignore[union-attr]

    errors = []
    for coarse, fine in zip(solutions, solutions[1:], strict=False):
        errors.append(float(np.abs(coarse.values - _restrict(fine.values)).sum()) * coarse.axes.cell_volume)
    factors = [a / b if b > 0 else math.inf for a, b in zip(errors, errors[1:], strict=False)]
    _GLOBAL_STATE.logger.info("Scheme order study: errors %s, factors %s", errors, factors)
    return RefinementReport(n_x=levels, errors=errors, factors=factors)


def support_bound_study(
    cfg: ExperimentConfig, n_agents: Sequence[int] = (10, 100, 1000), T: float = 10.0, seed: int = 0
) -> dict[int, float]:
    """Uncontrolled `support_ratio` per ensemble size, agents drawn from the grid initial datum."""
    prepared = prepare(cfg)
    out = {}
    for n in n_agents:
        y0 = sample_from_grid(prepared.psi0, n, np.random.default_rng([seed, n]))
        traj = simulate(prepared.model, y0, zero_controller, T, cfg.particle.dt, cfg.particle.integrator)
        out[n] = support_ratio(traj)
    _GLOBAL_STATE.logger.info("Support bound ratios: %s", out)
    return out


class ValidationCheck(BaseModel):
    name: str
    passed: bool
    detail: str


class ValidationReport(BaseModel):
    name: str
    checks: list[ValidationCheck]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def _boundary_labels(model: ModelSpec, n: int, rng: np.random.Generator) -> tuple[FloatArray, npt.NDArray[np.intp]]:
    """Random simplex points on the faces {lambda_j = 0}, with j the face label index per row."""
    ls = model.label_space
    full = rng.dirichlet(np.ones(ls.arity), size=n)
    faces = rng.integers(ls.arity, size=n)
    full[np.arange(n), faces] = 0.0
    full /= full.sum(axis=1, keepdims=True)
    lam = full[:, [ls.index(label) for label in ls.free_labels]]
    return lam, faces


def _check_rates(model: ModelSpec, psi0: GridDensity) -> str:
    view = psi0.view()
    rates = rate_field(model, view, view)
    return ", ".join(f"{name} in [{a.min():.3g}, {a.max():.3g}]" for name, a in rates.items()) or "no rates"


def _check_mass(model: ModelSpec, psi0: GridDensity, cfg: ExperimentConfig) -> str:
    # A fixed step is taken at least once so that a step above the positivity bound is reported.
    horizon = min(cfg.time.T, max(VALIDATION_HORIZON, cfg.time.dt or 0.0))
    run = simulate_pde(
        model,
        psi0,
        zero_controller,
        T=horizon,
        dt_max=cfg.time.dt_max,
        safety=cfg.time.cfl_safety,
        fixed_dt=cfg.time.dt,
        keep_states=False,
    )
    final = run.final.density  # type: ignore[union-attr]
    if run.max_mass_drift > cfg.checks.mass_tolerance:
        raise InvalidState(f"mass drift {run.max_mass_drift:.3g} per step")
    if float(final.values.min()) < 0:
        raise InvalidState(f"negative cell {float(final.values.min()):.3g}")
    if np.any(final.values[~final.axes.mask] != 0):
        raise InvalidState("mass in masked cells")
    return (
        f"{run.n_steps} steps to t={horizon:g}, max relative mass drift {run.max_mass_drift:.3g}, "
        f"mass {total_mass(final):.15g}"
    )


def _check_simplex_invariance(model: ModelSpec, psi0: GridDensity, rng: np.random.Generator, n: int = 1000) -> str:
    lam, faces = _boundary_labels(model, n, rng)
    spec = psi0.axes.spec
    x = rng.uniform(spec.x_min, spec.x_max, size=(n, 1))
    drift = full_transition(model, ParticleView(x, lam), psi0.view())
    inward = drift[np.arange(n), faces]
    worst = float(inward.min())
    if worst < -1e-12:
        raise InvalidState(f"transition drift points out of the simplex by {-worst:.3g}")
    return f"{n} boundary states, smallest inward drift {worst:.3g}"


def _check_particle_simplex(
    model: ModelSpec, psi0: GridDensity, cfg: ExperimentConfig, rng: np.random.Generator
) -> str:
    y0 = sample_from_grid(psi0, 200, rng)
    steps = 20
    traj = simulate(model, y0, zero_controller, steps * cfg.particle.dt, cfg.particle.dt, cfg.particle.integrator)
    return f"{steps} {cfg.particle.integrator} steps of 200 agents stayed in the simplex, final t={traj.T:g}"


def _check_control_support(model: ModelSpec, psi0: GridDensity, cfg: ExperimentConfig, rng: np.random.Generator) -> str:
    view: GridView = psi0.view()
    dt = cfl_dt(model, psi0, safety=cfg.time.cfl_safety, horizon=cfg.time.dt_max)
    result = solve_step(model, view, dt, cfg.mpc)
    h = activation_field(model, view)
    idle = h == 0
    if np.any(result.control[idle] != 0):
        raise InvalidState("nonzero control where the activation vanishes")
    dt = min(dt, cfl_dt(model, psi0, result.control, safety=cfg.time.cfl_safety, horizon=dt))

    perturbed = result.control.copy()
    perturbed[idle] = project_to_K(model.control_set, rng.normal(size=(int(idle.sum()), 1)))
    a = fv_step(model, FvState(psi0), result.control, dt)
    b = fv_step(model, FvState(psi0), perturbed, dt)
    deviation = float(np.abs(a.density.values - b.density.values).max())
    if deviation != 0:
        raise InvalidState(f"controls on idle cells moved the density by {deviation:.3g}")
    return f"{int(idle.sum())} idle cells, {result.iterations} MPC iterations, deviation under idle perturbation 0"


def _check_projection(model: ModelSpec, rng: np.random.Generator, n: int = 1000) -> str:
    K = model.control_set
    u = 3.0 * K.u_max * rng.normal(size=(n, K.dim))
    v = 3.0 * K.u_max * rng.normal(size=(n, K.dim))
    pu, pv = project_to_K(K, u), project_to_K(K, v)
    if not np.array_equal(project_to_K(K, pu), pu):
        raise InvalidState("projection onto K is not idempotent")
    gap = np.linalg.norm(pu - pv, axis=1) - np.linalg.norm(u - v, axis=1)
    if float(gap.max()) > 1e-12:
        raise InvalidState(f"projection onto K expands distances by {float(gap.max()):.3g}")
    return f"{n} pairs, idempotent and nonexpansive"


def _check_metric_axioms(rng: np.random.Generator, n: int = 200) -> str:
    def draw() -> DiscreteMeasure:
        return DiscreteMeasure(rng.normal(size=(5, 1)), rng.dirichlet(np.ones(5)))

    worst_exact = 0.0
    for _ in range(n):
        a, b, c = draw(), draw(), draw()
        ab, ba = w1_1d(a, b), w1_1d(b, a)
        if abs(ab - ba) > 1e-12 or w1_1d(a, a) > 1e-9:
            raise InvalidState("W1 is not symmetric or does not vanish on equal measures")
        if w1_1d(a, c) > ab + w1_1d(b, c) + 1e-12:
            raise InvalidState("W1 violates the triangle inequality")
        worst_exact = max(worst_exact, abs(w1_exact_small(a, b) - ab))
    if worst_exact > 1e-9:
        raise InvalidState(f"exact and quantile W1 disagree by {worst_exact:.3g}")
    return f"{n} random triples, exact and quantile W1 agree to {worst_exact:.3g}"


def _check_audit(model: ModelSpec, cfg: ExperimentConfig) -> str:
    report: AuditReport = assumption_audit(model, cfg.audit)
    if not report.finite:
        raise InvalidState(f"audit constants are not finite: {report.constants}")
    if report.sup_h > 1.0:
        raise InvalidState(f"activation exceeds one: {report.sup_h:.6g}")
    return f"constants {report.constants}, flagged {report.flagged}"


def validate(cfg: ExperimentConfig) -> ValidationReport:
    """
    Run the invariant suites of every module against a config and report pass or fail per check.

    Model errors inside a check are caught and reported; if the model cannot be prepared the
    remaining checks are reported as skipped.
    """
    SimMetrics.initialize()
    rng = np.random.default_rng(cfg.particle.seeds[0] if cfg.particle.seeds else 0)
    outcomes: list[ValidationCheck] = []

    def run(name: str, check: Callable[[], str]) -> None:
        try:
            detail = check()
            passed = True
        except MfleadError as exc:
            _GLOBAL_STATE.logger.error("Validation check %s failed", name, exc_info=True)
            detail, passed = f"{type(exc).__name__}: {exc}", False
        SimMetrics.VALIDATION_COUNTER.labels(name, "pass" if passed else "fail").inc()
        outcomes.append(ValidationCheck(name=name, passed=passed, detail=detail))

    prepared: list[PreparedExperiment] = []

    def prepare_check() -> str:
        prepared.append(prepare(cfg))
        return f"grid {prepared[0].axes.shape}, normalizers {prepared[0].model.transition.normalizers}"

    run("prepare", prepare_check)
    names = [
        "rates",
        "mass_conservation",
        "simplex_invariance",
        "particle_simplex",
        "control_support",
        "projection",
        "metric_axioms",
        "audit",
    ]
    if not prepared:
        outcomes += [ValidationCheck(name=name, passed=False, detail="skipped: model not prepared") for name in names]
    else:
        model, psi0 = prepared[0].model, prepared[0].psi0
        run("rates", lambda: _check_rates(model, psi0))
        run("mass_conservation", lambda: _check_mass(model, psi0, cfg))
        run("simplex_invariance", lambda: _check_simplex_invariance(model, psi0, rng))
        run("particle_simplex", lambda: _check_particle_simplex(model, psi0, cfg, rng))
        run("control_support", lambda: _check_control_support(model, psi0, cfg, rng))
        run("projection", lambda: _check_projection(model, rng))
        run("metric_axioms", lambda: _check_metric_axioms(rng))
        run("audit", lambda: _check_audit(model, cfg))

    report = ValidationReport(name=cfg.name, checks=outcomes)
    writer = ArtifactWriter(cfg.outputs.directory, cfg.config_hash(), cfg.outputs.formats)
    writer.write_json("validation_report.json", report.model_dump(mode="json"))
    writer.write_manifest({"name": cfg.name, "passed": report.passed})
    _GLOBAL_STATE.logger.info(
        "Validation of %s: %d/%d checks passed", cfg.name, sum(c.passed for c in outcomes), len(outcomes)
    )
    return report


def run_audit(cfg: ExperimentConfig) -> AuditReport:
    """Audit the config's model with its audit settings and write the report."""
    prepared = prepare(cfg)
    report = assumption_audit(prepared.model, cfg.audit)
    writer = ArtifactWriter(cfg.outputs.directory, cfg.config_hash(), cfg.outputs.formats)
    writer.write_json("audit_report.json", report.model_dump(mode="json"), description="Fitted assumption constants")
    writer.write_manifest({"name": cfg.name, "flagged": report.flagged})
    return report
