import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from mflead.config import ExperimentConfig
from mflead.experiments import (
    Check,
    convergence_study,
    count_clusters,
    run_audit,
    run_test1,
    run_test2,
    scheme_order_study,
    support_bound_study,
    validate,
)

from . import small_config


def manifest_files(out_dir: str | Path) -> set[str]:
    manifest = json.loads((Path(out_dir) / "MANIFEST.json").read_text())
    return {entry["file"] for entry in manifest["artifacts"]}


def test_count_clusters() -> None:
    x = np.linspace(-1, 1, 201)
    two = np.exp(-((x + 0.5) ** 2) / 0.01) + np.exp(-((x - 0.5) ** 2) / 0.01)
    assert count_clusters(two, 0.1) == 2
    assert count_clusters(np.exp(-(x**2) / 0.01), 0.1) == 1
    assert count_clusters(np.zeros(10), 0.1) == 0
    # A maximum on the boundary still counts.
    assert count_clusters(np.linspace(0, 1, 10), 0.1) == 1
    # A ripple below the prominence threshold does not.
    ripple = np.exp(-(x**2) / 0.01) + 0.01 * np.exp(-((x - 0.7) ** 2) / 0.001)
    assert count_clusters(ripple, 0.1) == 1


def test_check_comparisons() -> None:
    assert Check.of("a", 1.0, "<=", 1.0).passed
    assert not Check.of("a", 1.0, "<", 1.0).passed
    assert Check.of("a", 2.0, ">", 1.0).passed
    assert not Check.of("a", 0.5, ">=", 1.0).passed


def test_run_test1(test1_config: ExperimentConfig) -> None:
    bundle = run_test1(test1_config)
    assert [(r.backend, r.regime) for r in bundle.runs] == [("pde", "off"), ("pde", "on")]
    assert bundle.config_hash == test1_config.config_hash()
    files = manifest_files(bundle.out_dir)
    for name in (
        "initial/marginals.csv",
        "initial/label_marginals.csv",
        "initial/density.csv",
        "pde/off/fractions.csv",
        "pde/off/marginals_raster.csv",
        "pde/off/marginals_t0.1.csv",
        "pde/on/density_t0.2.csv",
        "pde/on/mpc_diagnostics.csv",
        "summary.json",
        "config.json",
    ):
        assert name in files
        assert (Path(bundle.out_dir) / name).exists()

    checks = {c.name: c for c in bundle.checks}
    for name in ("pde_off_mass_drift", "pde_on_mass_drift", "pde_on_min_cell", "pde_on_masked_mass"):
        assert checks[name].passed
    assert "pde_cost_on_minus_off" in checks

    fractions = pd.read_csv(Path(bundle.out_dir) / "pde/off/fractions.csv")
    assert list(fractions.columns) == ["t", "fraction_F", "fraction_L", "fraction_sum"]
    np.testing.assert_allclose(fractions["t"], [0.0, 0.1, 0.2])
    raster = pd.read_csv(Path(bundle.out_dir) / "pde/off/marginals_raster.csv")
    assert len(raster) == 3 * test1_config.grid.n_x

    summary = json.loads((Path(bundle.out_dir) / "summary.json").read_text())
    assert set(summary["normalizers"]) == {"F", "L"}
    assert summary["thresholds"]["probe_time"] == 0.2
    assert summary["runs"][1]["mpc_unconverged"] is not None


def test_run_test2_on_both_backends(test2_config: ExperimentConfig) -> None:
    bundle = run_test2(test2_config.with_overrides(backend="both"))
    assert len(bundle.runs) == 4
    particle = [r for r in bundle.runs if r.backend == "particle"]
    assert {r.n_agents for r in particle} == {80}
    assert {r.seed for r in particle} == {0}
    for run in bundle.runs:
        assert set(run.mass_near) == {"x_bar", "populist"}
        assert set(run.final_fractions) == {"fraction_F", "fraction_L1", "fraction_L2"}
        assert run.max_fraction_sum_drift <= 1e-12
    files = manifest_files(bundle.out_dir)
    assert "particle/on/trajectory.csv" in files
    assert "pde/on/label_marginals_t0.2.csv" in files
    names = {c.name for c in bundle.checks}
    assert {"pde_off_populist_over_target", "particle_on_target_gain"} <= names


def test_experiments_check_the_label_arity(test1_config: ExperimentConfig) -> None:
    with pytest.raises(ValueError, match="3-label"):
        run_test2(test1_config)


def test_validate_passes_on_the_emerging_leaders_model(test1_config: ExperimentConfig) -> None:
    report = validate(test1_config)
    assert [c.name for c in report.checks] == [
        "prepare",
        "rates",
        "mass_conservation",
        "simplex_invariance",
        "particle_simplex",
        "control_support",
        "projection",
        "metric_axioms",
        "audit",
    ]
    assert report.passed, [c for c in report.checks if not c.passed]
    saved = json.loads((Path(test1_config.outputs.directory) / "validation_report.json").read_text())
    assert saved["name"] == "test1"


def test_validate_reports_negative_rates(tmp_path: Path) -> None:
    cfg = small_config("test1", tmp_path)
    data = cfg.model_dump(mode="json")
    data["model"]["transition"]["rates"][0]["base"] = -0.025
    report = validate(ExperimentConfig.loads(data))
    assert not report.passed
    rates = next(c for c in report.checks if c.name == "rates")
    assert not rates.passed
    assert rates.detail.startswith("NegativeRate")


def test_validate_reports_an_oversized_fixed_step(tmp_path: Path) -> None:
    cfg = small_config("test1", tmp_path, time={"T": 10.0, "dt": 10.0})
    report = validate(cfg)
    outcome = {c.name: c for c in report.checks}
    assert not outcome["mass_conservation"].passed
    assert outcome["mass_conservation"].detail.startswith("CflViolation")
    assert outcome["projection"].passed


def test_convergence_study_tables(tmp_path: Path) -> None:
    cfg = small_config("convergence", tmp_path, controlled="off", particle={"probe_times": [0.1, 0.2]})
    result = convergence_study(cfg)
    assert len(result.table) == 3 * 5 * 2
    assert set(result.table.columns) == {"regime", "n_agents", "seed", "t", "w1_x", "w1_lambda", "cost_gap"}
    assert (result.table[["w1_x", "w1_lambda", "cost_gap"]] >= 0).all().all()
    assert len(result.medians) == 3 * 2
    assert set(result.slopes) == {"off@t=0.1", "off@t=0.2"}
    assert len(result.checks) == 8
    assert {"convergence.csv", "convergence_medians.csv", "convergence_summary.json"} <= manifest_files(tmp_path)


def test_convergence_study_needs_enough_runs(tmp_path: Path) -> None:
    with pytest.raises(ValueError, match="three ascending"):
        convergence_study(small_config("convergence", tmp_path, particle={"n_agents": [20, 20, 40]}))
    with pytest.raises(ValueError, match="five seeds"):
        convergence_study(small_config("convergence", tmp_path, particle={"seeds": [0, 1]}))


def test_scheme_order_study(test1_config: ExperimentConfig) -> None:
    report = scheme_order_study(test1_config, n_x=(8, 16, 32), T=0.05)
    assert report.n_x == [8, 16, 32]
    assert len(report.errors) == 2
    assert all(e > 0 for e in report.errors)
    assert len(report.factors) == 1
    with pytest.raises(ValueError, match="double"):
        scheme_order_study(test1_config, n_x=(8, 16, 24))


def test_support_bound_study(test1_config: ExperimentConfig) -> None:
    ratios = support_bound_study(test1_config, n_agents=(5, 20), T=0.2)
    assert set(ratios) == {5, 20}
    assert all(r >= 1.0 for r in ratios.values())


def test_run_audit_writes_the_report(test1_config: ExperimentConfig) -> None:
    report = run_audit(test1_config)
    assert report.finite
    saved = json.loads((Path(test1_config.outputs.directory) / "audit_report.json").read_text())
    assert saved["constants"] == report.constants


@pytest.mark.slow
@pytest.mark.parametrize("name", ["test1", "test2"])
def test_full_horizon_runs(name: str, tmp_path: Path) -> None:
    cfg = ExperimentConfig.builtin(name).with_overrides(out=str(tmp_path))
    bundle = run_test1(cfg) if name == "test1" else run_test2(cfg)
    assert bundle.passed, [c for c in bundle.checks if not c.passed]


@pytest.mark.slow
def test_full_convergence_study(tmp_path: Path) -> None:
    result = convergence_study(ExperimentConfig.builtin("convergence").with_overrides(out=str(tmp_path)))
    assert result.passed, [c for c in result.checks if not c.passed]


@pytest.mark.slow
def test_first_order_under_mesh_halving() -> None:
    report = scheme_order_study(ExperimentConfig.builtin("test1"), n_x=(32, 64, 128), T=1.0)
    assert 1.6 <= report.factors[0] <= 2.4


@pytest.mark.slow
def test_support_bound_is_uniform_in_n() -> None:
    ratios = support_bound_study(ExperimentConfig.builtin("test1"), n_agents=(10, 100, 1000), T=10.0)
    assert max(ratios.values()) / min(ratios.values()) < 1.1
