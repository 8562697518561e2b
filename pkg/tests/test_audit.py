import numpy as np
import pytest

from mflead.audit import AUDIT_KEYS, assumption_audit
from mflead.config import AuditConfig, ExperimentConfig
from mflead.experiments import PreparedExperiment
from mflead.model_spec import Gate

SMALL = AuditConfig(n_samples=200, n_atoms=4)


def test_report_on_prepared_model(test1: PreparedExperiment) -> None:
    report = assumption_audit(test1.model, SMALL)
    assert set(report.constants) == set(AUDIT_KEYS)
    assert report.finite
    assert 0.0 < report.sup_h <= 1.0
    assert report.constants["h1"] == report.sup_h
    assert report.n_samples == 200
    assert report.scales == [1e-2, 1e-3, 1e-4]
    for values in report.quotients.values():
        assert len(values) == 3
        assert all(np.isfinite(values))
    assert set(report.flagged) <= set(report.quotients)


def test_samples_round_up_to_whole_measures(test1: PreparedExperiment) -> None:
    report = assumption_audit(test1.model, AuditConfig(n_samples=150, n_atoms=4))
    assert report.n_samples == 200


def test_unresolved_model_is_audited() -> None:
    model = ExperimentConfig.builtin("test2").model
    assert model.transition.normalizers is None
    report = assumption_audit(model, SMALL)
    assert report.finite
    assert report.constants["v3"] > 0


def test_same_seed_same_report(test1: PreparedExperiment) -> None:
    a = assumption_audit(test1.model, SMALL)
    b = assumption_audit(test1.model, SMALL)
    assert a == b
    c = assumption_audit(test1.model, SMALL.model_copy(update={"seed": 1}))
    assert c.constants != a.constants


def test_constant_activation_has_zero_lipschitz_constant(test1: PreparedExperiment) -> None:
    model = test1.model
    flat = model.model_copy(update={"activation": model.activation.model_copy(update={"gate": Gate.constant(1.0)})})
    report = assumption_audit(flat, SMALL)
    assert report.sup_h == pytest.approx(1.0)
    assert report.constants["h2"] == 0.0
    assert "h2" not in report.flagged


def test_velocity_constants_are_keyed_state_measure_growth(test1: PreparedExperiment) -> None:
    report = assumption_audit(test1.model, SMALL)
    assert set(report.quotients) == {"v1", "v2", "T2", "h2"}
    # v1 comes from moving evaluation points, v2 from moving the measure, v3 from no perturbation.
    assert report.constants["v1"] == max(report.quotients["v1"])
    assert report.constants["v2"] == max(report.quotients["v2"])
    assert "v3" not in report.quotients
    assert report.constants["v3"] > 0
    idle = test1.model.model_copy(
        update={"kernels": {key: k.model_copy(update={"kappa": 0.0}) for key, k in test1.model.kernels.items()}}
    )
    still = assumption_audit(idle, SMALL)
    assert still.constants["v1"] == still.constants["v2"] == still.constants["v3"] == 0.0
