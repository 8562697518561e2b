from collections.abc import Generator

import numpy as np
import pytest
from prometheus_client import generate_latest

from mflead.config import MpcConfig
from mflead.exceptions import InvalidState, SimplexOvershoot
from mflead.experiments import PreparedExperiment
from mflead.ingredients import activation_field
from mflead.mpc import MpcController
from mflead.particles import cost_EN, particle_rhs, simulate, step, support_ratio, zero_controller
from mflead.state_space import (
    AgentState,
    EmpiricalEnsemble,
    MeasureView,
    make_empirical,
    sample_from_grid,
    simplex_overshoot,
)


def get_func_metric(name: str) -> float:
    metrics = generate_latest().decode("utf-8")
    for line in metrics.split("\n"):
        if line.startswith(name):
            return float(line.split(" ")[-1])
    return 0


@pytest.fixture
def ensemble(test1: PreparedExperiment) -> EmpiricalEnsemble:
    return sample_from_grid(test1.psi0, 60, np.random.default_rng(7))


def test_far_apart_followers_do_not_move(test1: PreparedExperiment) -> None:
    y0 = make_empirical([AgentState.of(-0.8, 1.0), AgentState.of(0.8, 1.0)])
    dx, _ = particle_rhs(test1.model, y0, np.zeros((2, 1)))
    np.testing.assert_array_equal(dx, 0.0)


def test_controls_only_move_active_agents(test1: PreparedExperiment) -> None:
    y0 = make_empirical([AgentState.of(0.0, 0.95), AgentState.of(0.1, 0.05)])
    base_x, base_l = particle_rhs(test1.model, y0, np.zeros((2, 1)))
    pushed_x, pushed_l = particle_rhs(test1.model, y0, np.array([[1.5], [1.5]]))
    assert pushed_x[0, 0] == base_x[0, 0]
    assert pushed_x[1, 0] == pytest.approx(base_x[1, 0] + 1.5)
    np.testing.assert_array_equal(pushed_l, base_l)


@pytest.mark.parametrize("scheme", ["euler", "rk4"])
def test_idle_agent_ignores_its_control_over_a_whole_step(scheme: str, test1: PreparedExperiment) -> None:
    # h is below the activation floor here but rises above it inside the step.
    y0 = make_empirical([AgentState.of(0.0, 0.5323)])
    assert activation_field(test1.model, y0.view())[0] == 0.0
    still = step(test1.model, y0, np.array([[0.0]]), 1.0, scheme=scheme)
    pushed = step(test1.model, y0, np.array([[2.0]]), 1.0, scheme=scheme)
    np.testing.assert_array_equal(pushed.x, still.x)
    np.testing.assert_array_equal(pushed.lam, still.lam)


def test_step_argument_errors(test1: PreparedExperiment, ensemble: EmpiricalEnsemble) -> None:
    controls = np.zeros((ensemble.n, 1))
    with pytest.raises(ValueError):
        step(test1.model, ensemble, controls, 0.0)
    with pytest.raises(ValueError, match="integrator"):
        step(test1.model, ensemble, controls, 0.1, scheme="midpoint")


def test_large_step_overshoots_the_simplex(test1: PreparedExperiment) -> None:
    y0 = make_empirical([AgentState.of(0.0, 0.999), AgentState.of(0.3, 0.99)])
    with pytest.raises(SimplexOvershoot):
        step(test1.model, y0, np.zeros((2, 1)), 100.0, scheme="euler")


def test_controller_must_return_finite_controls(test1: PreparedExperiment, ensemble: EmpiricalEnsemble) -> None:
    def broken(view: MeasureView, t: float, dt: float) -> np.ndarray:
        return np.full((view.n_atoms, 1), np.nan)

    with pytest.raises(InvalidState, match="non-finite"):
        simulate(test1.model, ensemble, broken, T=0.1, dt=0.05)


@pytest.mark.parametrize("scheme", ["euler", "rk4"])
def test_simulate_stays_in_the_simplex(scheme: str, test2: PreparedExperiment) -> None:
    y0 = sample_from_grid(test2.psi0, 50, np.random.default_rng(1))
    traj = simulate(test2.model, y0, zero_controller, T=1.0, dt=0.1, scheme=scheme)
    assert traj.x.shape == (11, 50, 1)
    assert traj.lam.shape == (11, 50, 2)
    assert max(simplex_overshoot(lam) for lam in traj.lam) <= 1e-15


def test_last_step_is_shortened_to_end_at_T(test1: PreparedExperiment, ensemble: EmpiricalEnsemble) -> None:
    traj = simulate(test1.model, ensemble, zero_controller, T=0.25, dt=0.1)
    np.testing.assert_allclose(traj.step_times, [0.0, 0.1, 0.2, 0.25])
    assert traj.T == 0.25


def test_thinned_recording(test1: PreparedExperiment, ensemble: EmpiricalEnsemble) -> None:
    traj = simulate(test1.model, ensemble, zero_controller, T=0.5, dt=0.05, record_every=4)
    np.testing.assert_allclose(traj.times, [0.0, 0.2, 0.4, 0.5])
    assert traj.controls.shape == (3, ensemble.n, 1)
    assert traj.running.shape == (10,)
    assert traj.index_at(0.3) == 1
    assert traj.index_at(0.5) == 3
    np.testing.assert_array_equal(traj.ensemble(0).x, ensemble.x)


def test_trajectory_frame(test1: PreparedExperiment, ensemble: EmpiricalEnsemble) -> None:
    traj = simulate(test1.model, ensemble, zero_controller, T=0.1, dt=0.05)
    frame = traj.to_frame()
    assert list(frame.columns) == ["t", "agent_id", "x", "lambda_F", "u", "h"]
    assert len(frame) == 3 * ensemble.n
    assert frame.loc[frame["t"] == 0.1, "u"].isna().all()


def test_cost_matches_snapshot_quadrature(test1: PreparedExperiment, ensemble: EmpiricalEnsemble) -> None:
    controller = MpcController(test1.model, MpcConfig(max_iters=20))
    traj = simulate(test1.model, ensemble, controller, T=0.3, dt=0.1)
    assert traj.cost == pytest.approx(cost_EN(test1.model, traj), rel=1e-12)
    assert len(controller.diagnostics) == 3
    idle = traj.h[:-1] == 0
    assert np.all(traj.controls[idle] == 0)
    assert np.all(np.abs(traj.controls) <= test1.model.control_set.u_max)


def test_uncontrolled_support_stays_bounded(test1: PreparedExperiment, ensemble: EmpiricalEnsemble) -> None:
    traj = simulate(test1.model, ensemble, zero_controller, T=2.0, dt=0.1)
    ratio = support_ratio(traj)
    assert 1.0 <= ratio <= 1.5


def test_step_counter(
    test1: PreparedExperiment, ensemble: EmpiricalEnsemble, reset_prometheus_registry: Generator
) -> None:
    simulate(test1.model, ensemble, zero_controller, T=0.3, dt=0.1, scheme="euler")
    assert get_func_metric('mflead_particle_step_counter_total{scheme="euler"}') == 3


def test_controls_on_idle_agents_leave_the_trajectory_unchanged(
    test1: PreparedExperiment, ensemble: EmpiricalEnsemble
) -> None:
    def wasteful(view: MeasureView, t: float, dt: float) -> np.ndarray:
        idle = activation_field(test1.model, view) == 0
        return np.where(idle[:, None], 3.0, 0.0)

    assert np.any(activation_field(test1.model, ensemble.view()) == 0)
    plain = simulate(test1.model, ensemble, zero_controller, T=0.5, dt=0.1)
    wasted = simulate(test1.model, ensemble, wasteful, T=0.5, dt=0.1)
    np.testing.assert_array_equal(wasted.x, plain.x)
    np.testing.assert_array_equal(wasted.lam, plain.lam)


def test_relabelling_agents_permutes_the_trajectory(test1: PreparedExperiment, ensemble: EmpiricalEnsemble) -> None:
    perm = np.random.default_rng(3).permutation(ensemble.n)
    shuffled = EmpiricalEnsemble(x=ensemble.x[perm], lam=ensemble.lam[perm])
    traj = simulate(test1.model, ensemble, zero_controller, T=0.5, dt=0.1)
    again = simulate(test1.model, shuffled, zero_controller, T=0.5, dt=0.1)
    np.testing.assert_allclose(again.x, traj.x[:, perm], rtol=0, atol=1e-12)
    np.testing.assert_allclose(again.lam, traj.lam[:, perm], rtol=0, atol=1e-12)
    assert cost_EN(test1.model, again) == pytest.approx(cost_EN(test1.model, traj), rel=1e-12)
