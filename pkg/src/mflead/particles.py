import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
import pandas as pd

from mflead._internal.constants import SIMPLEX_CLAMP_TOLERANCE
from mflead._internal.metrics import SimMetrics
from mflead._internal.state import _GLOBAL_STATE
from mflead.exceptions import InvalidState, NonFiniteState, SimplexOvershoot
from mflead.ingredients import (
    activation_field,
    control_cost_field,
    lagrangian_field,
    transition_field,
    velocity_field,
)
from mflead.model_spec import ModelSpec
from mflead.state_space import (
    ControlField,
    EmpiricalEnsemble,
    MeasureView,
    ParticleView,
    clamp_to_simplex,
    simplex_overshoot,
)

FloatArray = npt.NDArray[np.float64]

Controller = Callable[[MeasureView, float, float], ControlField]
"""Closed-loop policy: (current measure view, time, step size) -> one control row per atom."""


def zero_controller(view: MeasureView, t: float, dt: float) -> ControlField:
    return np.zeros((view.n_atoms, view.x.shape[1]))


def _rhs(model: ModelSpec, x: FloatArray, lam: FloatArray, pushed: FloatArray) -> tuple[FloatArray, FloatArray]:
    view = ParticleView(x, lam)
    return velocity_field(model, view, view) + pushed, transition_field(model, view, view)


def _pushed(model: ModelSpec, x: FloatArray, lam: FloatArray, controls: ControlField) -> FloatArray:
    return activation_field(model, ParticleView(x, lam))[:, None] * controls


def particle_rhs(
    model: ModelSpec, ensemble: EmpiricalEnsemble, controls: ControlField
) -> tuple[FloatArray, FloatArray]:
    """
    Right-hand side of the controlled particle system.

    :param controls: One control row per agent, shape (N, d).
    :return: (dx/dt, dlambda/dt) with shapes (N, d) and (N, k). The control enters the positions only,
        scaled by the activation of each agent.
    """
    controls = np.asarray(controls, dtype=float).reshape(ensemble.x.shape)
    return _rhs(model, ensemble.x, ensemble.lam, _pushed(model, ensemble.x, ensemble.lam, controls))


def step(
    model: ModelSpec,
    ensemble: EmpiricalEnsemble,
    controls: ControlField,
    dt: float,
    scheme: str = "rk4",
) -> EmpiricalEnsemble:
    """
    Advance the ensemble by `dt` with the controls frozen over the step.

    The activation is taken at the start of the step and held with the controls, so an agent with
    h = 0 at the start is not moved by its control in any stage.

    :raises SimplexOvershoot: When label coordinates leave the simplex by more than roundoff.
    :raises NonFiniteState: When the step produces NaN or infinity.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    SimMetrics.initialize()
    x0, l0 = ensemble.x, ensemble.lam
    controls = np.asarray(controls, dtype=float).reshape(x0.shape)
    pushed = _pushed(model, x0, l0, controls)

    with SimMetrics.STEP_TIMER.labels("particle").time():
        if scheme == "euler":
            dx, dl = _rhs(model, x0, l0, pushed)
            x1, l1 = x0 + dt * dx, l0 + dt * dl
        elif scheme == "rk4":
            k1x, k1l = _rhs(model, x0, l0, pushed)
            k2x, k2l = _rhs(model, x0 + 0.5 * dt * k1x, l0 + 0.5 * dt * k1l, pushed)
            k3x, k3l = _rhs(model, x0 + 0.5 * dt * k2x, l0 + 0.5 * dt * k2l, pushed)
            k4x, k4l = _rhs(model, x0 + dt * k3x, l0 + dt * k3l, pushed)
            x1 = x0 + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
            l1 = l0 + dt / 6.0 * (k1l + 2 * k2l + 2 * k3l + k4l)
        else:
            raise ValueError(f"unknown integrator {scheme}")

    if not (np.all(np.isfinite(x1)) and np.all(np.isfinite(l1))):
        raise NonFiniteState(f"{scheme} particle step")
    overshoot = simplex_overshoot(l1)
    if overshoot > SIMPLEX_CLAMP_TOLERANCE:
        raise SimplexOvershoot(overshoot, SIMPLEX_CLAMP_TOLERANCE)
    SimMetrics.PARTICLE_STEP_COUNTER.labels(scheme).inc()
    return EmpiricalEnsemble(x=x1, lam=clamp_to_simplex(l1))


@dataclass(frozen=True)
class ParticleTrajectory:
    """
    Recorded states of a particle run.

    Snapshots are kept every `record_every` steps (and at T). `controls[r]` is the control applied on
    [times[r], times[r] + step) and `h[r]` the activation at times[r]. The per-step cost integrands of
    every step are kept in `running` and `effort` regardless of the recording cadence.
    """

    times: FloatArray
    x: FloatArray
    lam: FloatArray
    controls: FloatArray
    h: FloatArray
    step_times: FloatArray
    running: FloatArray
    effort: FloatArray
    lam_labels: list[str]
    record_every: int = 1

    @property
    def T(self) -> float:
        return float(self.step_times[-1])

    def ensemble(self, r: int) -> EmpiricalEnsemble:
        return EmpiricalEnsemble(x=self.x[r].copy(), lam=self.lam[r].copy())

    def index_at(self, t: float) -> int:
        """Recorded index of the last snapshot at or before `t`."""
        return int(np.searchsorted(self.times, t + 1e-9, side="right") - 1)

    @property
    def cost(self) -> float:
        """Time-averaged left-endpoint cost of every simulated step."""
        widths = np.diff(self.step_times)
        return float(widths @ (self.running + self.effort) / self.T)

    def to_frame(self, every: int = 1) -> pd.DataFrame:
        """Long table with one row per (recorded time, agent): t, agent_id, x, lambda, u, h."""
        rows = range(0, len(self.times), every)
        n, d = self.x.shape[1], self.x.shape[2]
        frames = []
        for r in rows:
            data: dict[str, npt.ArrayLike] = {"t": np.full(n, self.times[r]), "agent_id": np.arange(n)}
            for j in range(d):
                data["x" if d == 1 else f"x_{j}"] = self.x[r, :, j]
            for j, label in enumerate(self.lam_labels):
                data[f"lambda_{label}"] = self.lam[r, :, j]
            u = self.controls[r] if r < len(self.controls) else np.full((n, d), np.nan)
            for j in range(d):
                data["u" if d == 1 else f"u_{j}"] = u[:, j]
            data["h"] = self.h[r]
            frames.append(pd.DataFrame(data))
        return pd.concat(frames, ignore_index=True)


def simulate(
    model: ModelSpec,
    y0: EmpiricalEnsemble,
    controller: Controller,
    T: float,
    dt: float,
    scheme: str = "rk4",
    record_every: int = 1,
) -> ParticleTrajectory:
    """
    Closed-loop particle run over ceil(T / dt) steps; the last step is shortened to end at T.

    The controller is called once per step with the current ensemble and must return admissible
    controls; they are used as given.
    """
    if T <= 0 or dt <= 0:
        raise ValueError(f"T and dt must be positive, got T={T}, dt={dt}")
    SimMetrics.initialize()
    n_steps = math.ceil(T / dt - 1e-12)
    step_times = np.minimum(dt * np.arange(n_steps + 1), T)
    record = [n for n in range(n_steps + 1) if n % record_every == 0 or n == n_steps]
    recorded = set(record)
    _GLOBAL_STATE.logger.info(
        "Particle run: N=%d, T=%g, dt=%g, %d steps, scheme=%s", y0.n, T, dt, n_steps, scheme
    )

    xs, lams, us, hs = [], [], [], []
    running = np.empty(n_steps)
    effort = np.empty(n_steps)
    ensemble = y0
    for n in range(n_steps + 1):
        view = ensemble.view()
        h = activation_field(model, view)
        if n == n_steps:
            xs.append(ensemble.x)
            lams.append(ensemble.lam)
            hs.append(h)
            break
        t, h_step = float(step_times[n]), float(step_times[n + 1] - step_times[n])
        u = np.asarray(controller(view, t, h_step), dtype=float).reshape(ensemble.x.shape)
        if not np.all(np.isfinite(u)):
            raise InvalidState(f"controller returned non-finite controls at t={t:.6g}")
        running[n] = float(view.weights @ lagrangian_field(model, view, view))
        effort[n] = float(view.weights @ control_cost_field(model.control_cost, u))
        if n in recorded:
            xs.append(ensemble.x)
            lams.append(ensemble.lam)
            us.append(u)
            hs.append(h)
        _GLOBAL_STATE.logger.debug("Particle step %d at t=%.6g", n, t)
        ensemble = step(model, ensemble, u, h_step, scheme)

    return ParticleTrajectory(
        times=step_times[record],
        x=np.stack(xs),
        lam=np.stack(lams),
        controls=np.stack(us) if us else np.zeros((0,) + y0.x.shape),
        h=np.stack(hs),
        step_times=step_times,
        running=running,
        effort=effort,
        lam_labels=model.label_space.free_labels,
        record_every=record_every,
    )


def cost_EN(model: ModelSpec, traj: ParticleTrajectory) -> float:
    """
    N-particle cost from the recorded snapshots, time-averaged with left-endpoint quadrature.

    The Lagrangian is evaluated on the empirical measure of each snapshot. With `record_every=1`
    this equals `traj.cost`; thinned trajectories integrate on their recorded grid.
    """
    total = 0.0
    for r in range(len(traj.times) - 1):
        view = ParticleView(traj.x[r], traj.lam[r])
        integrand = view.weights @ lagrangian_field(model, view, view)
        integrand += view.weights @ control_cost_field(model.control_cost, traj.controls[r])
        total += (traj.times[r + 1] - traj.times[r]) * float(integrand)
    return total / traj.T


def support_ratio(traj: ParticleTrajectory) -> float:
    """
    sup_t max_i |y_i(t)| / max_i |y_i(0)| over the recorded snapshots.

    |y| is the cityblock norm |x|_1 + |lambda|_1 on Y; the full probability vector has unit l1 norm.
    """
    norms = np.abs(traj.x).sum(axis=2) + 1.0
    return float(norms.max() / norms[0].max())
