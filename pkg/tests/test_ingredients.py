import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mflead.exceptions import DegenerateFollowerMass, ModelNotFinalized, NegativeRate
from mflead.experiments import PreparedExperiment
from mflead.ingredients import (
    activation,
    concentration,
    concentration_field,
    confidence_indicator,
    control_cost,
    full_transition,
    gate_eval,
    kernel_eval,
    lagrangian,
    marginals,
    mass_fractions,
    rate_field,
    resolve_normalizers,
    sigmoid,
    split_weights,
    transition,
    transition_field,
    velocity,
    velocity_field,
)
from mflead.model_spec import ControlCostSpec, Gate, KernelSpec, ModelSpec, SigmoidParams
from mflead.state_space import AgentState, ParticleView, make_empirical


def agents(pairs: list[tuple[float, float]]) -> ParticleView:
    return make_empirical([AgentState.of(x, lam) for x, lam in pairs]).view()


@given(
    st.floats(1.0, 1000.0),
    st.floats(0.0, 1.0),
    st.floats(-1.0, 1.0),
)
def test_sigmoid_is_symmetric_about_its_center(c: float, center: float, s: float) -> None:
    params = SigmoidParams(C=c, lambda_bar=center)
    total = sigmoid(params, center + s) + sigmoid(params, center - s)
    assert float(total) == pytest.approx(1.0, abs=1e-12)


def test_gate_kinds() -> None:
    params = SigmoidParams(C=20.0, lambda_bar=0.5)
    normalized = Gate(kind="normalized_sigmoid", sigmoid=params)
    np.testing.assert_allclose(gate_eval(normalized, [0.0, 0.5, 1.0]), [0.0, 0.5, 1.0], atol=1e-12)
    steep = SigmoidParams(C=1000.0, lambda_bar=0.5)
    assert float(gate_eval(Gate(kind="sigmoid", sigmoid=steep), 1.0)) == 1.0
    assert float(gate_eval(Gate(kind="one_minus_sigmoid", sigmoid=steep), 1.0)) < 1e-200
    np.testing.assert_allclose(gate_eval(Gate(kind="one_minus_identity"), [0.25]), [0.75])
    np.testing.assert_allclose(gate_eval(Gate.constant(0.3), [0.1, 0.9]), [0.3, 0.3])


def test_confidence_indicator_ramp() -> None:
    r = np.array([0.0, 0.2, 0.25, 0.3, 0.5])
    np.testing.assert_allclose(confidence_indicator(r, 0.25, 0.05), [1.0, 1.0, 0.5, 0.0, 0.0])
    np.testing.assert_array_equal(confidence_indicator(r, 0.25, 0.0), [1.0, 1.0, 1.0, 0.0, 0.0])
    np.testing.assert_array_equal(confidence_indicator(r, 0.0, 0.05), np.zeros(5))


def test_kernel_needs_a_resolved_width() -> None:
    with pytest.raises(ModelNotFinalized):
        kernel_eval(KernelSpec(kappa=0.5), 0.0, 0.1)
    k = KernelSpec(kappa=0.5, epsilon=0.01)
    np.testing.assert_allclose(kernel_eval(k, 0.0, 0.3), [0.3])
    np.testing.assert_allclose(kernel_eval(k, 0.0, 0.9), [0.0])
    np.testing.assert_allclose(kernel_eval(k.model_copy(update={"attraction": "indicator"}), 0.0, 0.3), [1.0])


def test_single_agent_feels_no_self_interaction(test1: PreparedExperiment) -> None:
    y = AgentState.of(0.4, 0.8)
    np.testing.assert_allclose(velocity(test1.model, y, agents([(0.4, 0.8)])), [0.0], atol=1e-15)


def brute_force_velocity(model: ModelSpec, view: ParticleView) -> np.ndarray:
    ls = model.label_space
    mix = split_weights(ls, model.target_split, view.lam)
    src = split_weights(ls, model.source_split, view.lam)
    out = np.zeros(view.x.shape)
    for i in range(view.n_atoms):
        for j in range(view.n_atoms):
            for a, star in enumerate(ls.labels):
                for b, bullet in enumerate(ls.labels):
                    k = model.kernel(star, bullet)
                    if k is None:
                        continue
                    out[i] += mix[i, a] * view.weights[j] * src[j, b] * kernel_eval(k, view.x[i], view.x[j])
    return out


@pytest.mark.parametrize("which", ["test1", "test2"])
def test_velocity_matches_pairwise_sum(which: str, request: pytest.FixtureRequest) -> None:
    model = request.getfixturevalue(which).model
    rng = np.random.default_rng(3)
    k = model.label_space.n_free
    lam = rng.dirichlet(np.ones(k + 1), size=12)[:, :k]
    view = ParticleView(rng.uniform(-1, 1, size=(12, 1)), lam)
    np.testing.assert_allclose(velocity_field(model, view, view), brute_force_velocity(model, view), atol=1e-12)


@pytest.mark.parametrize("which", ["test1", "test2"])
def test_fields_are_affine_in_the_measure(which: str, request: pytest.FixtureRequest) -> None:
    prepared = request.getfixturevalue(which)
    # Small normalizers keep every concentration inside [0, 1] so no clamp is hit.
    model = prepared.model.with_normalizers({"F": 0.01, "L": 0.01})
    rng = np.random.default_rng(11)
    k = model.label_space.n_free
    target = ParticleView(rng.uniform(-1, 1, size=(7, 1)), rng.dirichlet(np.ones(k + 1), size=7)[:, :k])
    mu = ParticleView(rng.uniform(-1, 1, size=(10, 1)), rng.dirichlet(np.ones(k + 1), size=10)[:, :k])
    nu = ParticleView(rng.uniform(-1, 1, size=(6, 1)), rng.dirichlet(np.ones(k + 1), size=6)[:, :k])
    half = ParticleView.mixture([mu, nu], [0.5, 0.5])
    for field in (velocity_field, transition_field):
        expected = 0.5 * (field(model, target, mu) + field(model, target, nu))
        np.testing.assert_allclose(field(model, target, half), expected, rtol=0, atol=1e-12)


def test_grid_and_particle_paths_agree(test2: PreparedExperiment) -> None:
    grid_view = test2.psi0.view()
    atoms = ParticleView(grid_view.x, grid_view.lam, grid_view.weights)
    np.testing.assert_allclose(
        velocity_field(test2.model, grid_view, grid_view), velocity_field(test2.model, atoms, atoms), atol=1e-12
    )
    grid_drift = full_transition(test2.model, grid_view, grid_view)
    np.testing.assert_allclose(grid_drift, full_transition(test2.model, atoms, atoms), atol=1e-12)


def test_concentrations_need_normalizers(test1: PreparedExperiment) -> None:
    bare = test1.model.model_copy(
        update={"transition": test1.model.transition.model_copy(update={"normalizers": None})}
    )
    view = test1.psi0.view()
    with pytest.raises(ModelNotFinalized):
        concentration_field(bare, view, view)


def test_resolved_normalizers_scale_initial_peak_to_one(test1: PreparedExperiment) -> None:
    view = test1.psi0.view()
    assert test1.model.transition.normalizers == resolve_normalizers(test1.model, view)
    d = concentration_field(test1.model, view, view)
    for which in ("F", "L"):
        assert float(d[which].max()) == pytest.approx(1.0)
        assert float(d[which].min()) >= 0.0
    assert 0.0 <= concentration(test1.model, 5.0, view, "F") < 1e-6


def test_negative_base_rate_is_reported(test1: PreparedExperiment) -> None:
    rates = [r.model_copy(update={"base": -0.025}) if r.name == "a_F" else r for r in test1.model.transition.rates]
    model = test1.model.model_copy(
        update={"transition": test1.model.transition.model_copy(update={"rates": rates})}
    )
    view = test1.psi0.view()
    with pytest.raises(NegativeRate, match="a_F"):
        rate_field(model, view, view)


@pytest.mark.parametrize("which", ["test1", "test2"])
def test_transition_rows_sum_to_zero(which: str, request: pytest.FixtureRequest) -> None:
    prepared = request.getfixturevalue(which)
    view = prepared.psi0.view()
    drift = full_transition(prepared.model, view, view)
    np.testing.assert_allclose(drift.sum(axis=1), 0.0, atol=1e-15)


def test_transition_points_into_the_simplex_at_the_vertices(test1: PreparedExperiment) -> None:
    mu = test1.psi0.view()
    assert transition(test1.model, AgentState.of(0.0, 0.0), mu)[0] >= 0.0
    assert transition(test1.model, AgentState.of(0.0, 1.0), mu)[0] <= 0.0


def test_activation_vanishes_on_followers(test1: PreparedExperiment, test2: PreparedExperiment) -> None:
    assert activation(test1.model, AgentState.of(0.0, 0.9)) == 0.0
    assert activation(test1.model, AgentState.of(0.0, 0.1)) == pytest.approx(1.0)
    assert activation(test2.model, AgentState.of(0.0, [0.9, 0.05])) == pytest.approx(1.0)
    assert activation(test2.model, AgentState.of(0.0, [0.05, 0.9])) == 0.0
    assert activation(test2.model, AgentState.of(0.0, [0.1, 0.1])) == 0.0


def test_three_label_weights_are_a_partition_of_unity(test2: PreparedExperiment) -> None:
    ls = test2.model.label_space
    lam = np.array([[0.0, 0.0], [0.9, 0.05], [0.05, 0.9], [0.2, 0.2], [0.5, 0.5]])
    f = split_weights(ls, test2.model.target_split, lam)
    assert np.all(f >= 0.0)
    np.testing.assert_allclose(f.sum(axis=1), 1.0, atol=1e-15)
    assert f[0, ls.index("F")] == pytest.approx(1.0)
    assert f[1, ls.index("L1")] == pytest.approx(1.0)
    assert f[2, ls.index("L2")] == pytest.approx(1.0)


def test_lagrangian_closed_form(test1: PreparedExperiment) -> None:
    mu = agents([(0.2, 0.9), (0.6, 0.1)])
    leader = AgentState.of(0.6, 0.1)
    expected = 0.35 * (0.6 + 0.5) ** 2 + 0.65 * (0.6 - 0.2) ** 2
    assert lagrangian(test1.model, leader, mu) == pytest.approx(expected, abs=1e-12)
    assert lagrangian(test1.model, AgentState.of(0.2, 0.9), mu) == pytest.approx(0.0, abs=1e-12)


def test_lagrangian_needs_followers(test1: PreparedExperiment) -> None:
    mu = agents([(0.2, 0.1), (0.6, 0.0)])
    with pytest.raises(DegenerateFollowerMass):
        lagrangian(test1.model, AgentState.of(0.6, 0.1), mu)


def test_control_cost() -> None:
    assert control_cost(ControlCostSpec(p=2.0, gamma=2.0), 3.0) == pytest.approx(9.0)
    assert control_cost(ControlCostSpec(p=3.0, gamma=3.0), [-2.0]) == pytest.approx(8.0)


@pytest.mark.parametrize("which", ["test1", "test2"])
def test_marginals_split_the_mass(which: str, request: pytest.FixtureRequest) -> None:
    prepared = request.getfixturevalue(which)
    view = prepared.psi0.view()
    fractions = mass_fractions(prepared.model, view)
    assert sum(fractions.values()) == pytest.approx(1.0, abs=1e-12)
    m = marginals(prepared.model, view, prepared.axes.spec.n_lambda)
    assert sum(m.masses().values()) == pytest.approx(1.0, abs=1e-12)
    assert m.label_total is not None
    assert m.masses() == pytest.approx(fractions)
