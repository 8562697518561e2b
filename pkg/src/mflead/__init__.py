from mflead._internal.state import _GLOBAL_STATE
from mflead.audit import AuditReport, assumption_audit
from mflead.config import ExperimentConfig, GridSpec, InitialDensity, MpcConfig, RuntimeSettings, TimeConfig
from mflead.experiments import convergence_study, run_test1, run_test2, validate
from mflead.meanfield import cfl_dt, fv_step, simulate_pde
from mflead.model_spec import ModelSpec
from mflead.mpc import MpcController, one_step_objective, project_to_K, solve_step
from mflead.particles import simulate, step
from mflead.state_space import AgentState, EmpiricalEnsemble, GridAxes, GridDensity, grid_from_density, make_empirical
from mflead.transport import DiscreteMeasure, w1_1d, w1_exact_small


def configure(settings: RuntimeSettings) -> None:
    """Apply process-wide settings. Call before the first simulation for the metrics prefix to apply."""
    if settings.logger is not None:
        _GLOBAL_STATE.logger = settings.logger
    if settings.metrics_prefix is not None:
        _GLOBAL_STATE.metrics_prefix = settings.metrics_prefix


__all__ = [
    "AgentState",
    "AuditReport",
    "DiscreteMeasure",
    "EmpiricalEnsemble",
    "ExperimentConfig",
    "GridAxes",
    "GridDensity",
    "GridSpec",
    "InitialDensity",
    "ModelSpec",
    "MpcConfig",
    "MpcController",
    "RuntimeSettings",
    "TimeConfig",
    "assumption_audit",
    "cfl_dt",
    "configure",
    "convergence_study",
    "fv_step",
    "grid_from_density",
    "make_empirical",
    "one_step_objective",
    "project_to_K",
    "run_test1",
    "run_test2",
    "simulate",
    "simulate_pde",
    "solve_step",
    "step",
    "validate",
    "w1_1d",
    "w1_exact_small",
]
