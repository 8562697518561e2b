import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

from mflead._internal.constants import CFL_TOLERANCE, DEFAULT_CFL_SAFETY, DEFAULT_DT_MAX, NEGATIVE_CELL_TOLERANCE
from mflead._internal.metrics import SimMetrics
from mflead._internal.state import _GLOBAL_STATE
from mflead.exceptions import CflViolation, InvalidState, NegativeCell
from mflead.ingredients import (
    activation_field,
    control_cost_field,
    lagrangian_field,
    transition_field,
    velocity_field,
)
from mflead.model_spec import ModelSpec
from mflead.particles import Controller
from mflead.state_space import ControlField, GridDensity, GridView, total_mass

FloatArray = npt.NDArray[np.float64]


@dataclass(frozen=True)
class FvState:
    density: GridDensity
    t: float = 0.0
    dt: float = 0.0
    """Step that produced this state; 0 for the initial datum."""


@dataclass(frozen=True)
class CellFields:
    """Cell-centered model fields of one density, on the full grid shape (zero on masked cells)."""

    v: FloatArray
    h: FloatArray
    T: list[FloatArray]


@dataclass(frozen=True)
class FaceVelocities:
    """
    Normal velocities on cell interfaces.

    `x` has n_x + 1 faces along axis 0; `lam[c]` has n_lambda + 1 faces along axis c + 1.
    Outer faces and label faces touching a masked cell are zero.
    """

    x: FloatArray
    lam: list[FloatArray]


def cell_fields(model: ModelSpec, g: GridDensity) -> CellFields:
    view = g.view()
    v = velocity_field(model, view, view)[:, 0]
    h = activation_field(model, view)
    trans = transition_field(model, view, view)
    return CellFields(
        v=view.scatter(v),
        h=view.scatter(h),
        T=[view.scatter(trans[:, c]) for c in range(trans.shape[1])],
    )


def _faces_from_cells(g: GridDensity, cells: CellFields, w: ControlField | None) -> FaceVelocities:
    axes = g.axes
    a_x = cells.v if w is None else cells.v + cells.h * g.view().scatter(np.asarray(w, dtype=float)[:, 0])

    x_faces = np.zeros((axes.shape[0] + 1,) + axes.shape[1:])
    x_faces[1:-1] = 0.5 * (a_x[1:] + a_x[:-1])

    lam_faces = []
    mask = axes.mask
    for c, tc in enumerate(cells.T):
        axis = c + 1
        moved = np.moveaxis(tc, axis, 0)
        moved_mask = np.moveaxis(mask, axis, 0)
        faces = np.zeros((moved.shape[0] + 1,) + moved.shape[1:])
        faces[1:-1] = np.where(moved_mask[1:] & moved_mask[:-1], 0.5 * (moved[1:] + moved[:-1]), 0.0)
        lam_faces.append(np.moveaxis(faces, 0, axis))
    return FaceVelocities(x=x_faces, lam=lam_faces)


def interface_velocities(model: ModelSpec, g: GridDensity, w: ControlField | None = None) -> FaceVelocities:
    """
    Face velocities for the split upwind scheme.

    x-faces carry the mean of v + h w over their two cells, label faces the mean of the transition
    drift; the nonlocal integrals use midpoint quadrature over the grid itself.

    :param w: Controls per active cell, shape (M, 1), as returned by a controller for `g.view()`.
    """
    return _faces_from_cells(g, cell_fields(model, g), w)


def _positivity_bound(faces: FloatArray, axis: int, spacing: float) -> float:
    moved = np.moveaxis(faces, axis, 0)
    outflow = np.maximum(moved[1:], 0.0) - np.minimum(moved[:-1], 0.0)
    peak = float(outflow.max(initial=0.0))
    return math.inf if peak == 0 else spacing / peak


def _sweep(psi: FloatArray, faces: FloatArray, axis: int, dt: float, spacing: float) -> FloatArray:
    p = np.moveaxis(psi, axis, 0)
    a = np.moveaxis(faces, axis, 0)
    flux = np.zeros_like(a)
    flux[1:-1] = np.maximum(a[1:-1], 0.0) * p[:-1] + np.minimum(a[1:-1], 0.0) * p[1:]
    out = p - dt / spacing * (flux[1:] - flux[:-1])
    return np.moveaxis(out, 0, axis)


def clip_roundoff(psi: FloatArray) -> FloatArray:
    """Zero the roundoff-negative cells and rescale the rest to the mass before clipping."""
    if float(psi.min(initial=0.0)) >= 0.0:
        return psi
    total = float(psi.sum())
    clipped = np.maximum(psi, 0.0)
    kept = float(clipped.sum())
    return clipped * (total / kept) if kept > 0 else clipped


def fv_step(
    model: ModelSpec,
    s: FvState,
    w: ControlField | None,
    dt: float,
    faces: FaceVelocities | None = None,
) -> FvState:
    """
    One split upwind step: label sweeps first, then the x sweep.

    :param faces: Precomputed face velocities for (s.density, w); computed when omitted.
    :raises CflViolation: When dt exceeds the upwind positivity bound of a sweep.
    :raises NegativeCell: When a cell goes negative beyond roundoff.
    """
    SimMetrics.initialize()
    g = s.density
    axes = g.axes
    if faces is None:
        faces = interface_velocities(model, g, w)

    sweeps = [(faces.lam[c], c + 1, axes.dl) for c in range(axes.n_free)] + [(faces.x, 0, axes.dx)]
    with SimMetrics.STEP_TIMER.labels("pde").time():
        psi = np.array(g.values)
        for face, axis, spacing in sweeps:
            limit = _positivity_bound(face, axis, spacing)
            if dt > limit * (1.0 + CFL_TOLERANCE):
                raise CflViolation(dt, limit)
            psi = _sweep(psi, face, axis, dt, spacing)

    peak = float(psi.max(initial=0.0))
    low = float(psi.min(initial=0.0))
    if low < -NEGATIVE_CELL_TOLERANCE * max(peak, 1.0):
        raise NegativeCell(low)
    psi = clip_roundoff(psi)
    SimMetrics.FV_STEP_COUNTER.inc()
    return FvState(density=GridDensity(axes, psi), t=s.t + dt, dt=dt)


def _cfl_from_faces(g: GridDensity, faces: FaceVelocities, safety: float, horizon: float) -> float:
    bounds = []
    vx = float(np.abs(faces.x).max(initial=0.0))
    if vx > 0:
        bounds.append(g.axes.dx / vx)
    for face in faces.lam:
        vl = float(np.abs(face).max(initial=0.0))
        if vl > 0:
            bounds.append(g.axes.dl / vl)
    return horizon if not bounds else min(horizon, safety * min(bounds))


def cfl_dt(
    model: ModelSpec,
    g: GridDensity,
    w: ControlField | None = None,
    safety: float = DEFAULT_CFL_SAFETY,
    horizon: float = math.inf,
) -> float:
    """
    safety * min(dx / max|x-face velocity|, dlambda / max|label-face velocity|), capped at `horizon`.

    Returns `horizon` when every face velocity vanishes.
    """
    if not 0 < safety <= 1:
        raise ValueError(f"CFL safety must lie in (0, 1], got {safety}")
    return _cfl_from_faces(g, interface_velocities(model, g, w), safety, horizon)


@dataclass
class PdeRun:
    """
    Closed-loop finite-volume run.

    `times`, `dts`, `running` and `effort` have one entry per step: the step's start time and size
    and its left-endpoint cost integrands. `states` holds the output-time states.
    """

    T: float
    times: list[float] = field(default_factory=list)
    dts: list[float] = field(default_factory=list)
    running: list[float] = field(default_factory=list)
    effort: list[float] = field(default_factory=list)
    states: list[FvState] = field(default_factory=list)
    final: FvState | None = None
    max_mass_drift: float = 0.0
    """Largest relative mass change of a single step."""

    @property
    def cost(self) -> float:
        dts = np.asarray(self.dts)
        return float(dts @ (np.asarray(self.running) + np.asarray(self.effort)) / self.T)

    @property
    def n_steps(self) -> int:
        return len(self.dts)

    def state_at(self, t: float) -> FvState:
        for state in self.states:
            if abs(state.t - t) <= 1e-9:
                return state
        raise KeyError(f"no stored state at t={t}")


Observer = Callable[[FvState], None]


def simulate_pde(
    model: ModelSpec,
    psi0: GridDensity,
    controller: Controller,
    T: float,
    dt_max: float = DEFAULT_DT_MAX,
    safety: float = DEFAULT_CFL_SAFETY,
    fixed_dt: float | None = None,
    output_times: Sequence[float] | None = None,
    keep_states: bool = True,
    observer: Observer | None = None,
) -> PdeRun:
    """
    March the finite-volume scheme to T under a closed-loop controller.

    Each step uses dt = min(dt_max, CFL bound without control, time to the next output), calls the
    controller with that dt and shrinks dt to the CFL bound of the controlled field if needed. With
    `fixed_dt` the step is never adapted and the positivity bound is only checked by `fv_step`.

    :param output_times: Times at which states are kept and `observer` is called. T is always one.
    """
    if T <= 0:
        raise ValueError(f"T must be positive, got {T}")
    SimMetrics.initialize()
    outputs = sorted({float(t) for t in (output_times or []) if 0 <= t <= T} | {float(T)})
    run = PdeRun(T=T)
    state = FvState(density=psi0, t=0.0, dt=0.0)
    mass = total_mass(psi0)
    _GLOBAL_STATE.logger.info(
        "Finite-volume run: grid %s, T=%g, dt_max=%g, outputs=%d", psi0.axes.shape, T, dt_max, len(outputs)
    )

    def emit(s: FvState) -> None:
        if keep_states:
            run.states.append(s)
        if observer is not None:
            observer(s)

    if outputs[0] == 0.0:
        emit(state)
        outputs = outputs[1:]

    out_idx = 0
    while out_idx < len(outputs):
        t = state.t
        target = outputs[out_idx]
        g = state.density
        view: GridView = g.view()
        cells = cell_fields(model, g)

        if fixed_dt is not None:
            dt = min(fixed_dt, target - t)
        else:
            dt = min(dt_max, _cfl_from_faces(g, _faces_from_cells(g, cells, None), safety, math.inf), target - t)
        w = np.asarray(controller(view, t, dt), dtype=float).reshape(view.n_atoms, 1)
        if not np.all(np.isfinite(w)):
            raise InvalidState(f"controller returned non-finite controls at t={t:.6g}")
        faces = _faces_from_cells(g, cells, w)
        if fixed_dt is None:
            dt = min(dt, _cfl_from_faces(g, faces, safety, math.inf))

        run.times.append(t)
        run.dts.append(dt)
        run.running.append(float(view.weights @ lagrangian_field(model, view, view)))
        run.effort.append(float(view.weights @ control_cost_field(model.control_cost, w)))

        state = fv_step(model, state, w, dt, faces=faces)
        new_mass = total_mass(state.density)
        run.max_mass_drift = max(run.max_mass_drift, abs(new_mass - mass) / mass)
        mass = new_mass
        _GLOBAL_STATE.logger.debug("Finite-volume step to t=%.6g with dt=%.3g", state.t, dt)

        if abs(state.t - target) <= 1e-12 * max(1.0, target):
            state = FvState(density=state.density, t=target, dt=state.dt)
            emit(state)
            out_idx += 1

    run.final = state
    _GLOBAL_STATE.logger.info("Finite-volume run finished: %d steps, cost %.6g", run.n_steps, run.cost)
    return run


def cost_meanfield(model: ModelSpec, states: Sequence[FvState], controls: Sequence[ControlField]) -> float:
    """
    Time-averaged grid quadrature of the running cost plus the control cost of explicit controls.

    `controls[n]` is applied on [states[n].t, states[n + 1].t); left-endpoint rule in time.
    """
    if len(states) < 2 or len(controls) < len(states) - 1:
        raise ValueError("need at least two states and one control per interval")
    horizon = states[-1].t - states[0].t
    total = 0.0
    for s, s_next, w in zip(states[:-1], states[1:], controls, strict=False):
        view = s.density.view()
        integrand = view.weights @ lagrangian_field(model, view, view)
        integrand += view.weights @ control_cost_field(model.control_cost, np.asarray(w, dtype=float).reshape(-1, 1))
        total += (s_next.t - s.t) * float(integrand)
    return total / horizon
