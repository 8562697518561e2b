"""
Instantaneous model predictive control: prediction and control horizons both equal one step.

At every step the controller minimizes the one-step objective

    J(w) = sum_c m_c L(y'_c, Psi') + dt * sum_c m_c phi(w_c)

over controls in K, where y'_c is the explicit Euler characteristic step of atom c and Psi' the
measure carried by the stepped atoms. The same solver serves the particle backend (atoms are
agents) and the grid backend (atoms are cells, m_c the cell mass).
"""

from dataclasses import dataclass
from typing import Any

import numpy as np
import numpy.typing as npt
import pandas as pd

from mflead._internal.constants import ARMIJO_C, ARMIJO_MAX_HALVINGS, ARMIJO_SHRINK, FOLLOWER_MASS_FLOOR
from mflead._internal.metrics import SimMetrics
from mflead._internal.state import _GLOBAL_STATE
from mflead.config import MpcConfig
from mflead.exceptions import DegenerateFollowerMass
from mflead.ingredients import (
    activation_field,
    control_cost_field,
    gated_coordinate,
    split_weights,
    transition_field,
    velocity_field,
)
from mflead.meanfield import FvState
from mflead.model_spec import AdmissibleControlSet, ControlCostSpec, ModelSpec
from mflead.state_space import ControlField, EmpiricalEnsemble, GridView, MeasureView

FloatArray = npt.NDArray[np.float64]


def project_to_K(control_set: AdmissibleControlSet, u: npt.ArrayLike) -> FloatArray:
    """Euclidean projection onto K: coordinate clamp for a box, radial scaling for a ball."""
    u = np.asarray(u, dtype=float)
    if control_set.shape == "box":
        return np.clip(u, -control_set.u_max, control_set.u_max)
    norm = np.linalg.norm(u, axis=-1, keepdims=True)
    scale = np.minimum(1.0, control_set.u_max / np.maximum(norm, np.finfo(float).tiny))
    return u * scale


def _as_view(state: EmpiricalEnsemble | FvState | MeasureView) -> MeasureView:
    if isinstance(state, EmpiricalEnsemble):
        return state.view()
    if isinstance(state, FvState):
        return state.density.view()
    return state


class OneStepProblem:
    """
    The one-step objective of a fixed state, with the control-independent parts evaluated once.

    Values are reported as J; `value` and `gradient` work on J / dt, the gradient taken in the
    L^2(mu) sense (the Euclidean gradient divided by atom mass).
    """

    def __init__(self, model: ModelSpec, view: MeasureView, dt: float, finite_diff_eps: float = 1e-6):
        self.model = model
        self.view = view
        self.dt = dt
        self.finite_diff_eps = finite_diff_eps
        self.m = view.weights
        self.h = activation_field(model, view)
        self.x_drift = view.x + dt * velocity_field(model, view, view)
        lam_next = view.lam + dt * transition_field(model, view, view)

        spec = model.lagrangian
        self.alpha = spec.alpha
        self.x_bar = np.asarray(spec.x_bar)
        self.theta = gated_coordinate(model, spec.theta, spec.theta_label, lam_next)
        ls = model.label_space
        self.g = split_weights(ls, model.marginal_split, lam_next)[:, ls.index(model.follower)]
        self.follower_mass = float(self.m @ self.g)
        if self.alpha < 1.0 and self.follower_mass < FOLLOWER_MASS_FLOOR:
            raise DegenerateFollowerMass(self.follower_mass)

    def positions(self, w: ControlField) -> FloatArray:
        return self.x_drift + self.dt * self.h[:, None] * w

    def _barycenter(self, x: FloatArray) -> FloatArray:
        return (self.m * self.g) @ x / self.follower_mass

    def objective(self, w: ControlField) -> float:
        """J(w)."""
        x = self.positions(w)
        running = self.alpha * self.theta * np.sum((x - self.x_bar) ** 2, axis=1)
        if self.alpha < 1.0:
            running = running + (1.0 - self.alpha) * self.theta * np.sum((x - self._barycenter(x)) ** 2, axis=1)
        return float(self.m @ running + self.dt * (self.m @ control_cost_field(self.model.control_cost, w)))

    def value(self, w: ControlField) -> float:
        return self.objective(w) / self.dt

    def gradient(self, w: ControlField) -> FloatArray:
        """L^2(mu) gradient of J / dt, zero on atoms with h = 0."""
        x = self.positions(w)
        dl = 2.0 * self.alpha * self.theta[:, None] * (x - self.x_bar)
        if self.alpha < 1.0:
            bary = self._barycenter(x)
            spread = (self.m * self.theta) @ (x - bary)
            dl += (1.0 - self.alpha) * (
                2.0 * self.theta[:, None] * (x - bary) - 2.0 * (self.g / self.follower_mass)[:, None] * spread
            )
        grad = self.h[:, None] * dl + control_cost_gradient(self.model.control_cost, w, self.finite_diff_eps)
        grad[self.h == 0] = 0.0
        return grad

    def mu_norm(self, v: FloatArray) -> float:
        return float(np.sqrt(self.m @ np.sum(v**2, axis=1)))

    def mu_inner(self, a: FloatArray, b: FloatArray) -> float:
        return float(self.m @ np.sum(a * b, axis=1))


def control_cost_gradient(spec: ControlCostSpec, w: ControlField, eps: float) -> FloatArray:
    """phi'(w) per row: analytic for p = 2, central differences otherwise."""
    if spec.p == 2.0:
        return spec.gamma * w
    grad = np.empty_like(w)
    for j in range(w.shape[1]):
        e = np.zeros(w.shape[1])
        e[j] = eps
        grad[:, j] = (control_cost_field(spec, w + e) - control_cost_field(spec, w - e)) / (2.0 * eps)
    return grad


def one_step_objective(
    model: ModelSpec, state: EmpiricalEnsemble | FvState | MeasureView, w: ControlField, dt: float
) -> float:
    """
    One-step MPC objective J(w) of a particle or grid state.

    :param w: Controls per atom, shape (M, d).
    """
    view = _as_view(state)
    return OneStepProblem(model, view, dt).objective(np.asarray(w, dtype=float).reshape(view.x.shape))


@dataclass(frozen=True)
class MpcResult:
    control: ControlField
    iterations: int
    grad_norm: float
    objective_before: float
    objective_after: float
    converged: bool


def solve_step(
    model: ModelSpec, state: EmpiricalEnsemble | FvState | MeasureView, dt: float, cfg: MpcConfig
) -> MpcResult:
    """
    Projected-gradient descent on the one-step objective, started from w = 0.

    Stops when the mu-norm of the projected-gradient step is at most `cfg.grad_tol` or after
    `cfg.max_iters` accepted steps. `iterations` counts accepted steps and `grad_norm` is measured at
    the returned control. The returned control lies in K and is exactly zero where h = 0;
    on non-convergence it is the best iterate seen, flagged `converged=False`.
    """
    SimMetrics.initialize()
    view = _as_view(state)
    backend = "pde" if isinstance(view, GridView) else "particle"
    problem = OneStepProblem(model, view, dt, cfg.finite_diff_eps)
    K = model.control_set

    w = np.zeros(view.x.shape)
    if not np.any(problem.h > 0):
        j0 = problem.objective(w)
        SimMetrics.MPC_SOLVE_COUNTER.labels(backend, "True").inc()
        SimMetrics.MPC_ITERATIONS.labels(backend).observe(0)
        return MpcResult(w, 0, 0.0, j0, j0, True)

    f = problem.value(w)
    f0 = f
    converged = False
    iterations = 0
    while True:
        grad = problem.gradient(w)
        grad_norm = problem.mu_norm(w - project_to_K(K, w - grad))
        if grad_norm <= cfg.grad_tol:
            converged = True
            break
        if iterations == cfg.max_iters:
            break

        step_size = cfg.initial_step
        candidate = project_to_K(K, w - step_size * grad)
        f_candidate = problem.value(candidate)
        if cfg.step_rule == "backtracking":
            accepted = False
            for _ in range(ARMIJO_MAX_HALVINGS):
                decrease = problem.mu_inner(grad, candidate - w)
                if decrease < 0 and f_candidate <= f + ARMIJO_C * decrease:
                    accepted = True
                    break
                step_size *= ARMIJO_SHRINK
                candidate = project_to_K(K, w - step_size * grad)
                f_candidate = problem.value(candidate)
            if not accepted:
                break
        elif f_candidate > f:
            break
        w, f = candidate, f_candidate
        iterations += 1

    w = project_to_K(K, w)
    w[problem.h == 0] = 0.0
    result = MpcResult(
        control=w,
        iterations=iterations,
        grad_norm=float(grad_norm),
        objective_before=f0 * dt,
        objective_after=problem.objective(w),
        converged=converged,
    )
    SimMetrics.MPC_SOLVE_COUNTER.labels(backend, str(converged)).inc()
    SimMetrics.MPC_ITERATIONS.labels(backend).observe(iterations)
    if not converged:
        _GLOBAL_STATE.logger.warning(
            "MPC step did not converge after %d iterations (projected gradient norm %.3g > %.3g)",
            iterations,
            grad_norm,
            cfg.grad_tol,
        )
    return result


def single_particle_control(h: float, x: float, v: float, x_bar: float, gamma: float, dt: float, u_max: float) -> float:
    """Closed-form minimizer of |x + dt (v + h w) - x_bar|^2 + dt gamma / 2 |w|^2 over [-u_max, u_max]."""
    return float(np.clip(2.0 * h * (x_bar - x - dt * v) / (gamma + 2.0 * dt * h**2), -u_max, u_max))


class MpcController:
    """
    Controller adapter around `solve_step` for both simulators.

    Each call appends a diagnostics row (time, iterations, gradient norm, J before and after,
    converged) available through `diagnostics_frame`.
    """

    def __init__(self, model: ModelSpec, cfg: MpcConfig):
        self.model = model
        self.cfg = cfg
        self.diagnostics: list[dict[str, Any]] = []

    def __call__(self, view: MeasureView, t: float, dt: float) -> ControlField:
        result = solve_step(self.model, view, dt, self.cfg)
        self.diagnostics.append(
            {
                "t": t,
                "dt": dt,
                "iterations": result.iterations,
                "grad_norm": result.grad_norm,
                "objective_before": result.objective_before,
                "objective_after": result.objective_after,
                "converged": result.converged,
                "max_abs_control": float(np.abs(result.control).max(initial=0.0)),
            }
        )
        return result.control

    def diagnostics_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.diagnostics)
