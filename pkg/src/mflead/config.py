import hashlib
import json
from importlib.resources import files
from logging import Logger, LoggerAdapter
from pathlib import Path
from typing import Any, Literal

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from mflead._internal.constants import CLUSTER_PEAK_FRACTION, DEFAULT_CFL_SAFETY, DEFAULT_DT_MAX
from mflead.model_spec import ModelSpec

BUILTIN_CONFIGS = ("test1", "test1_verbatim", "test2", "test2_verbatim", "convergence")


class RuntimeSettings(BaseModel):
    """
    Process-wide settings applied by `mflead.configure`.
    """

    logger: Logger | LoggerAdapter | None = None
    """Logger for every mflead component. Defaults to ``logging.getLogger("mflead")``."""

    metrics_prefix: str | None = None
    """Prefix for prometheus metric names. Only honored before the first simulation initializes metrics."""

    model_config = ConfigDict(arbitrary_types_allowed=True)


class GridSpec(BaseModel):
    n_x: int = Field(default=128, ge=2)
    x_min: float = -1.0
    x_max: float = 1.0
    n_lambda: int = Field(default=64, ge=2)
    """Cells per free simplex coordinate."""

    @model_validator(mode="after")
    def check_bounds(self) -> "GridSpec":
        if not self.x_min < self.x_max:
            raise ValueError(f"x_min {self.x_min} must be below x_max {self.x_max}")
        return self

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n_x

    @property
    def dlambda(self) -> float:
        return 1.0 / self.n_lambda


class GaussianBump(BaseModel):
    """One term exp(-|x - x_mean|^2 / x_sigma2 - |lambda - lam_mean|^2 / lam_sigma2) of the initial datum."""

    weight: float = Field(default=1.0, gt=0)
    x_mean: list[float]
    x_sigma2: float = Field(gt=0)
    lam_mean: list[float]
    """Mean in free simplex coordinates. May lie outside the simplex (the verbatim Test 1 datum does)."""

    lam_sigma2: float = Field(gt=0)


class InitialDensity(BaseModel):
    """Unnormalized sum of Gaussian bumps in (x, lambda); the grid constructor normalizes it."""

    bumps: list[GaussianBump] = Field(min_length=1)

    def __call__(self, x: npt.NDArray[np.float64], lam: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
        """
        Evaluate the density at points.

        :param x: Positions of shape (M, d).
        :param lam: Free simplex coordinates of shape (M, k).
        :return: Density values of shape (M,).
        """
        out = np.zeros(x.shape[0])
        for bump in self.bumps:
            dx2 = np.sum((x - np.asarray(bump.x_mean)) ** 2, axis=1)
            dl2 = np.sum((lam - np.asarray(bump.lam_mean)) ** 2, axis=1)
            out += bump.weight * np.exp(-dx2 / bump.x_sigma2 - dl2 / bump.lam_sigma2)
        return out


class TimeConfig(BaseModel):
    T: float = Field(default=50.0, gt=0)
    dt_max: float = Field(default=DEFAULT_DT_MAX, gt=0)
    dt: float | None = Field(default=None, gt=0)
    """Fixed finite-volume step. When set, the CFL bound is checked instead of enforced."""

    cfl_safety: float = Field(default=DEFAULT_CFL_SAFETY, gt=0, le=1)
    snapshot_times: list[float] = [0.5, 2.0, 3.5, 10.0]
    output_cadence: float = Field(default=0.5, gt=0)
    """Spacing of the fraction series and space-time raster rows."""

    @field_validator("snapshot_times")
    @classmethod
    def check_snapshots(cls, value: list[float]) -> list[float]:
        if any(t < 0 for t in value):
            raise ValueError("snapshot times must be nonnegative")
        return sorted(value)

    def output_times(self) -> list[float]:
        """Union of the cadence grid and the snapshot times within [0, T]."""
        n = int(np.floor(self.T / self.output_cadence + 1e-9))
        grid = {round(i * self.output_cadence, 12) for i in range(n + 1)}
        grid |= {t for t in self.snapshot_times if t <= self.T}
        grid.add(self.T)
        return sorted(grid)


class MpcConfig(BaseModel):
    max_iters: int = Field(default=50, ge=1)
    grad_tol: float = Field(default=1e-8, gt=0)
    step_rule: Literal["fixed", "backtracking"] = "backtracking"
    initial_step: float = Field(default=1.0, gt=0)
    finite_diff_eps: float = Field(default=1e-6, gt=0)


class ParticleConfig(BaseModel):
    n_agents: list[int] = [100, 400, 1600, 6400]
    seeds: list[int] = list(range(10))
    integrator: Literal["euler", "rk4"] = "rk4"
    dt: float = Field(default=0.01, gt=0)
    probe_times: list[float] = [1.0, 2.0]
    workers: int = Field(default=1, ge=1)
    export_every: int = Field(default=10, ge=1)
    """Trajectory CSV keeps every n-th step."""

    @field_validator("n_agents")
    @classmethod
    def check_agents(cls, value: list[int]) -> list[int]:
        if not value or any(n < 1 for n in value):
            raise ValueError("n_agents needs positive entries")
        return value


class OutputConfig(BaseModel):
    directory: str = "results"
    formats: list[Literal["csv", "json"]] = ["csv", "json"]
    density_snapshots: bool = True
    """Also export the full grid density (active cell centers and values) at the snapshot times."""


class ChecksConfig(BaseModel):
    """Thresholds of the derived run checks. They are recorded with every run summary."""

    probe_time: float = Field(default=10.0, gt=0)
    """Time of the cluster, barycenter and near-target probes; clipped to T."""

    cluster_peak_fraction: float = Field(default=CLUSTER_PEAK_FRACTION, gt=0, lt=1)
    min_clusters: int = Field(default=2, ge=1)
    barycenter_tolerance: float = Field(default=0.15, gt=0)
    uncontrolled_gap: float = Field(default=0.3, gt=0)
    target_radius: float = Field(default=0.25, gt=0)
    targets: dict[str, float] = {}
    """Named positions where the follower mass within `target_radius` is reported."""

    fraction_tolerance: float = Field(default=1e-12, gt=0)
    mass_tolerance: float = Field(default=1e-13, gt=0)


class AuditConfig(BaseModel):
    radius: float = Field(default=2.0, gt=0)
    n_samples: int = Field(default=10_000, ge=1)
    n_atoms: int = Field(default=8, ge=1)
    """Atoms per randomly drawn measure."""

    scales: list[float] = [1e-2, 1e-3, 1e-4]
    """Perturbation sizes for the Lipschitz quotients, coarse to fine."""

    seed: int = 0
    default_normalizer: float = Field(default=1.0, gt=0)
    """Concentration normalizer used when the model has none resolved."""

    @field_validator("scales")
    @classmethod
    def check_scales(cls, value: list[float]) -> list[float]:
        if len(value) < 2 or any(s <= 0 for s in value):
            raise ValueError("audit needs at least two positive perturbation scales")
        return sorted(value, reverse=True)


class ExperimentConfig(BaseModel):
    name: str
    experiment: Literal["test1", "test2", "convergence"]
    model: ModelSpec
    initial: InitialDensity
    grid: GridSpec = GridSpec()
    time: TimeConfig = TimeConfig()
    mpc: MpcConfig = MpcConfig()
    controlled: Literal["on", "off", "both"] = "both"
    backend: Literal["pde", "particle", "both"] = "pde"
    particle: ParticleConfig = ParticleConfig()
    outputs: OutputConfig = OutputConfig()
    audit: AuditConfig = AuditConfig()
    checks: ChecksConfig = ChecksConfig()
    notes: list[str] = []

    @model_validator(mode="after")
    def check_arity(self) -> "ExperimentConfig":
        k = self.model.label_space.n_free
        for bump in self.initial.bumps:
            if len(bump.lam_mean) != k or len(bump.x_mean) != self.model.dim:
                raise ValueError("initial bumps must match the model's label arity and spatial dimension")
        return self

    def dumps(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2)

    @staticmethod
    def loads(data: str | dict[str, Any]) -> "ExperimentConfig":
        if isinstance(data, str):
            return ExperimentConfig.model_validate(json.loads(data))
        return ExperimentConfig.model_validate(data)

    @staticmethod
    def load_path(path: str | Path) -> "ExperimentConfig":
        return ExperimentConfig.loads(Path(path).read_text())

    @staticmethod
    def builtin(name: str) -> "ExperimentConfig":
        """
        Load one of the configs shipped with the package.

        :param name: One of ``test1``, ``test1_verbatim``, ``test2``, ``test2_verbatim`` or ``convergence``.
        """
        if name not in BUILTIN_CONFIGS:
            raise ValueError(f"unknown builtin config {name}, expected one of {BUILTIN_CONFIGS}")
        return ExperimentConfig.loads(files("mflead").joinpath("configs", f"{name}.json").read_text())

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def with_overrides(
        self,
        seed: int | None = None,
        controlled: str | None = None,
        backend: str | None = None,
        out: str | None = None,
    ) -> "ExperimentConfig":
        """
        Copy with the CLI overrides applied; pydantic re-validates the result.

        :param seed: First particle seed; the seed list keeps its length and counts up from here.
        """
        data = self.model_dump(mode="json")
        if seed is not None:
            data["particle"]["seeds"] = [seed + i for i in range(max(1, len(self.particle.seeds)))]
            data["audit"]["seed"] = seed
        if controlled is not None:
            data["controlled"] = controlled
        if backend is not None:
            data["backend"] = backend
        if out is not None:
            data["outputs"]["directory"] = out
        return ExperimentConfig.loads(data)
