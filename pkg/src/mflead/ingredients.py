"""
Model ingredients evaluated against measure views.

Every field function takes a `target` view, whose atoms are the evaluation points, and a `source`
view, the measure the nonlocal integrals run over. Passing the same view twice evaluates the model
on its own state; wrapping a single agent in a `ParticleView` gives the pointwise forms.
"""

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
from scipy.spatial.distance import cdist
from scipy.special import expit

from mflead._internal.constants import (
    ACTIVATION_FLOOR,
    FOLLOWER_MASS_FLOOR,
    INTERACTION_CHUNK,
)
from mflead._internal.kernel_cache import _INTERACTION_CACHE
from mflead._internal.state import _GLOBAL_STATE
from mflead.exceptions import DegenerateFollowerMass, ModelNotFinalized, NegativeRate
from mflead.model_spec import ControlCostSpec, Gate, KernelSpec, LabelSpace, LabelSplit, ModelSpec, SigmoidParams
from mflead.state_space import AgentState, MeasureView, ParticleView

FloatArray = npt.NDArray[np.float64]


def sigmoid(s: SigmoidParams, lam: npt.ArrayLike) -> FloatArray:
    """Logistic gate e^{C(lam - lambda_bar)} / (1 + e^{C(lam - lambda_bar)}), overflow-safe for large C."""
    return expit(s.C * (np.asarray(lam, dtype=float) - s.lambda_bar))


def gate_eval(gate: Gate, s: npt.ArrayLike) -> FloatArray:
    s = np.asarray(s, dtype=float)
    match gate.kind:
        case "sigmoid":
            return sigmoid(gate.sigmoid, s)  # type: ignore[arg-type]
        case "one_minus_sigmoid":
            p = gate.sigmoid
            return expit(-p.C * (s - p.lambda_bar))  # type: ignore[union-attr]
        case "normalized_sigmoid":
            lo, hi = sigmoid(gate.sigmoid, 0.0), sigmoid(gate.sigmoid, 1.0)  # type: ignore[arg-type]
            return (sigmoid(gate.sigmoid, s) - lo) / (hi - lo)  # type: ignore[arg-type]
        case "identity":
            return s.copy()
        case "one_minus_identity":
            return 1.0 - s
        case "constant":
            return np.full(s.shape, gate.value)
    raise ValueError(f"unknown gate kind {gate.kind}")


def split_weights(label_space: LabelSpace, split: LabelSplit, lam: FloatArray) -> FloatArray:
    """
    Per-label weights of a split at each row of free coordinates.

    :return: Array (M, |U|) in label order; rows sum to one.
    """
    full = label_space.full(lam)
    out = np.empty_like(full)
    comp = label_space.index(split.complement)
    rest = np.zeros(full.shape[0])
    for label, gate in split.gates.items():
        j = label_space.index(label)
        out[:, j] = gate_eval(gate, full[:, j])
        rest += out[:, j]
    out[:, comp] = 1.0 - rest
    return out


def confidence_indicator(r: FloatArray, kappa: float, epsilon: float) -> FloatArray:
    """Piecewise-linear regularized indicator of {r <= kappa}: 1 below kappa - eps, 0 above kappa + eps."""
    if kappa == 0:
        return np.zeros_like(r)
    if epsilon == 0:
        return (r <= kappa).astype(float)
    return np.clip((kappa + epsilon - r) / (2.0 * epsilon), 0.0, 1.0)


def kernel_eval(k: KernelSpec, x: npt.ArrayLike, x_prime: npt.ArrayLike) -> FloatArray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x_prime = np.atleast_1d(np.asarray(x_prime, dtype=float))
    chi = float(confidence_indicator(np.asarray(np.linalg.norm(x_prime - x)), k.kappa, _epsilon(k)))
    if k.attraction == "difference":
        return chi * (x_prime - x)
    return np.full(x.shape, chi)


def _epsilon(k: KernelSpec) -> float:
    if k.epsilon is None:
        raise ModelNotFinalized("kernel regularization width epsilon")
    return k.epsilon


def _apply_radial(
    kind: str,
    params: tuple,
    profile: Callable[[FloatArray], FloatArray],
    target: MeasureView,
    source: MeasureView,
    columns: FloatArray,
) -> FloatArray:
    """
    Multiply the matrix profile(|target node - source node|) by `columns` (Q, c).

    Grid-to-grid products reuse a cached matrix; everything else is evaluated in row blocks.
    """
    targets, sources = target.nodes, source.nodes
    if target.cache_key is not None and source.cache_key is not None:
        key = _INTERACTION_CACHE.key(kind, params, target.cache_key, source.cache_key)
        matrix = _INTERACTION_CACHE.get(key, lambda: profile(cdist(targets, sources)))
        return matrix @ columns
    out = np.empty((targets.shape[0], columns.shape[1]))
    for start in range(0, targets.shape[0], INTERACTION_CHUNK):
        stop = start + INTERACTION_CHUNK
        out[start:stop] = profile(cdist(targets[start:stop], sources)) @ columns
    return out


def _kernel_action(k: KernelSpec, target: MeasureView, source: MeasureView, mass: FloatArray) -> FloatArray:
    """Integral of K(x, x') against the node masses `mass` (Q,), at every target node. Shape (P, d)."""
    epsilon = _epsilon(k)

    def profile(r: FloatArray) -> FloatArray:
        return confidence_indicator(r, k.kappa, epsilon)

    params = (k.kappa, epsilon)
    if k.attraction == "difference":
        columns = np.column_stack([mass, mass[:, None] * source.nodes])
        acted = _apply_radial("confidence", params, profile, target, source, columns)
        return acted[:, 1:] - acted[:, :1] * target.nodes
    acted = _apply_radial("confidence", params, profile, target, source, mass[:, None])
    return np.repeat(acted, target.nodes.shape[1], axis=1)


def velocity_field(model: ModelSpec, target: MeasureView, source: MeasureView) -> FloatArray:
    """
    Nonlocal velocity v_Psi at every target atom, shape (M, d).

    The source measure is split into label groups by the source weights (g_2 / f), each group is
    integrated against the kernel of every target label, and the result is mixed by the target
    weights (g_1 / f) of the evaluation point.
    """
    ls = model.label_space
    groups = source.collapse(source.weights[:, None] * split_weights(ls, model.source_split, source.lam))
    mix = split_weights(ls, model.target_split, target.lam)

    out = np.zeros((target.n_atoms, target.nodes.shape[1]))
    for a, star in enumerate(ls.labels):
        field = np.zeros((target.nodes.shape[0], target.nodes.shape[1]))
        active = False
        for b, bullet in enumerate(ls.labels):
            k = model.kernel(star, bullet)
            if k is None or k.kappa == 0 or not np.any(groups[:, b]):
                continue
            field += _kernel_action(k, target, source, groups[:, b])
            active = True
        if active:
            out += mix[:, a : a + 1] * target.expand(field)
    return out


@dataclass(frozen=True)
class Concentrations:
    """Follower and leader concentrations at the target nodes, each of shape (P,)."""

    F: FloatArray
    L: FloatArray

    def __getitem__(self, which: str) -> FloatArray:
        return self.F if which == "F" else self.L


def _raw_concentrations(model: ModelSpec, target: MeasureView, source: MeasureView) -> dict[str, FloatArray]:
    ls = model.label_space
    follower = ls.index(model.follower)
    g_follower = split_weights(ls, model.transition.concentration_split, source.lam)[:, follower]
    masses = {
        "F": source.collapse(source.weights * g_follower),
        "L": source.collapse(source.weights * (1.0 - g_follower)),
    }
    out = {}
    for which, mass in masses.items():
        sigma = model.transition.sigma[which]

        def profile(r: FloatArray, sigma: float = sigma) -> FloatArray:
            return np.exp(-(r**2) / sigma**2)

        out[which] = _apply_radial("gaussian", (sigma,), profile, target, source, mass[:, None])[:, 0]
    return out


def concentration_field(model: ModelSpec, target: MeasureView, source: MeasureView) -> Concentrations:
    """
    Normalized concentrations D_F, D_L at the target nodes.

    :raises ModelNotFinalized: When the normalizers have not been resolved.
    """
    normalizers = model.transition.normalizers
    if normalizers is None:
        raise ModelNotFinalized("concentration normalizers S_F, S_L")
    raw = _raw_concentrations(model, target, source)
    clamped = {}
    for which, values in raw.items():
        scaled = normalizers[which] * values
        peak = float(scaled.max(initial=0.0))
        if peak > 1.0 + 1e-12:
            _GLOBAL_STATE.logger.debug("Concentration D_%s reached %.6g; clamping to [0, 1]", which, peak)
        clamped[which] = np.clip(scaled, 0.0, 1.0)
    return Concentrations(F=clamped["F"], L=clamped["L"])


def resolve_normalizers(model: ModelSpec, view: MeasureView) -> dict[str, float]:
    """S_F, S_L = 1 / sup of the unnormalized concentrations over the nodes of `view`."""
    raw = _raw_concentrations(model, view, view)
    out = {}
    for which, values in raw.items():
        peak = float(values.max(initial=0.0))
        out[which] = 1.0 / peak if peak > 0 else 1.0
    return out


def rate_field(model: ModelSpec, target: MeasureView, source: MeasureView) -> dict[str, FloatArray]:
    """
    Switching rates alpha at the target nodes, keyed by rate name.

    :raises NegativeRate: When a rate evaluates below zero anywhere.
    """
    rates = model.transition.rates
    damping = (
        concentration_field(model, target, source) if any(r.damped_by is not None for r in rates) else None
    )
    out = {}
    for rate in rates:
        if rate.damped_by is None or damping is None:
            alpha = np.full(target.nodes.shape[0], rate.base)
        else:
            alpha = rate.base * (1.0 - damping[rate.damped_by])
        low = float(alpha.min(initial=0.0))
        if low < 0:
            raise NegativeRate(rate.name, low)
        out[rate.name] = alpha
    return out


def full_transition(model: ModelSpec, target: MeasureView, source: MeasureView) -> FloatArray:
    """
    Rate-matrix drift of the full probability vector at every target atom, shape (M, |U|).

    Each rate moves probability from its source label to its target label at speed alpha times the
    source entry of the g-vector, so every row sums to zero.
    """
    ls = model.label_space
    g = split_weights(ls, model.transition.rate_gates, target.lam)
    drift = np.zeros_like(g)
    alphas = rate_field(model, target, source)
    for rate in model.transition.rates:
        src, dst = ls.index(rate.source), ls.index(rate.target)
        flow = target.expand(alphas[rate.name]) * g[:, src]
        drift[:, dst] += flow
        drift[:, src] -= flow
    return drift


def transition_field(model: ModelSpec, target: MeasureView, source: MeasureView) -> FloatArray:
    """Drift of the free simplex coordinates at every target atom, shape (M, k)."""
    ls = model.label_space
    drift = full_transition(model, target, source)
    return drift[:, [ls.index(label) for label in ls.free_labels]]


def gated_coordinate(model: ModelSpec, gate: Gate, label: str, lam: FloatArray) -> FloatArray:
    return np.clip(gate_eval(gate, lam[:, model.label_space.coordinate(label)]), 0.0, 1.0)


def activation_field(model: ModelSpec, target: MeasureView) -> FloatArray:
    """Control activation h at every target atom, exactly zero below the activation floor."""
    h = gated_coordinate(model, model.activation.gate, model.activation.label, target.lam)
    h[h < ACTIVATION_FLOOR] = 0.0
    return h


def follower_barycenter(model: ModelSpec, source: MeasureView) -> tuple[float, FloatArray]:
    """Follower mass and barycenter of the marginal split of `source`."""
    ls = model.label_space
    g = split_weights(ls, model.marginal_split, source.lam)[:, ls.index(model.follower)]
    mass_per_atom = source.weights * g
    mass = float(mass_per_atom.sum())
    if mass <= 0:
        return mass, np.zeros(source.x.shape[1])
    return mass, (mass_per_atom @ source.x) / mass


def lagrangian_field(model: ModelSpec, target: MeasureView, source: MeasureView) -> FloatArray:
    """
    Running cost alpha * theta |x - x_bar|^2 + (1 - alpha) * theta |x - B|^2, B the follower barycenter.

    :raises DegenerateFollowerMass: When the barycenter term is weighted but the follower mass vanishes.
    """
    spec = model.lagrangian
    theta = gated_coordinate(model, spec.theta, spec.theta_label, target.lam)
    out = spec.alpha * theta * np.sum((target.x - np.asarray(spec.x_bar)) ** 2, axis=1)
    if spec.alpha < 1.0:
        mass, bary = follower_barycenter(model, source)
        if mass < FOLLOWER_MASS_FLOOR:
            raise DegenerateFollowerMass(mass)
        out = out + (1.0 - spec.alpha) * theta * np.sum((target.x - bary) ** 2, axis=1)
    return out


def control_cost(spec: ControlCostSpec, u: npt.ArrayLike) -> float:
    """phi(u) = gamma / p * |u|^p."""
    return float(spec.gamma / spec.p * np.linalg.norm(np.atleast_1d(np.asarray(u, dtype=float))) ** spec.p)


def control_cost_field(spec: ControlCostSpec, w: FloatArray) -> FloatArray:
    return spec.gamma / spec.p * np.linalg.norm(w, axis=1) ** spec.p


@dataclass(frozen=True)
class Marginals:
    """
    Label-split marginals of a measure.

    `spatial` maps each label to its mass at the view's spatial nodes; `label_density` maps each label
    to its density on the uniform label grid, with `label_total` the unsplit label marginal.
    """

    labels: list[str]
    nodes: FloatArray
    spatial: dict[str, FloatArray]
    label_density: dict[str, FloatArray] | None = None
    label_total: FloatArray | None = None

    def masses(self) -> dict[str, float]:
        return {label: float(values.sum()) for label, values in self.spatial.items()}


def marginals(model: ModelSpec, mu: MeasureView, n_lambda: int | None = None) -> Marginals:
    """
    Follower and leader marginals mu^F, mu^L (or mu^F, mu^L1, mu^L2) and, when `n_lambda` is given,
    the corresponding label-space densities on an n_lambda grid.
    """
    ls = model.label_space
    w = split_weights(ls, model.marginal_split, mu.lam)
    per_label = {label: mu.weights * w[:, j] for j, label in enumerate(ls.labels)}
    spatial = {label: mu.collapse(mass) for label, mass in per_label.items()}
    if n_lambda is None:
        return Marginals(labels=list(ls.labels), nodes=mu.nodes, spatial=spatial)
    return Marginals(
        labels=list(ls.labels),
        nodes=mu.nodes,
        spatial=spatial,
        label_density={label: mu.label_collapse(mass, n_lambda) for label, mass in per_label.items()},
        label_total=mu.label_collapse(mu.weights, n_lambda),
    )


def mass_fractions(model: ModelSpec, mu: MeasureView) -> dict[str, float]:
    ls = model.label_space
    w = split_weights(ls, model.marginal_split, mu.lam)
    totals = mu.weights @ w
    return {label: float(totals[j] / mu.total_mass) for j, label in enumerate(ls.labels)}


def point_view(y: AgentState) -> ParticleView:
    return ParticleView(np.asarray(y.x)[None, :], np.asarray(y.lam.coords)[None, :])


def velocity(model: ModelSpec, y: AgentState, mu: MeasureView) -> FloatArray:
    return velocity_field(model, point_view(y), mu)[0]


def concentration(model: ModelSpec, x: npt.ArrayLike, mu: MeasureView, which: str) -> float:
    """D_which at the position x; the label coordinates of the probe are irrelevant."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    probe = ParticleView(x[None, :], np.zeros((1, model.label_space.n_free)))
    return float(concentration_field(model, probe, mu)[which][0])


def transition(model: ModelSpec, y: AgentState, mu: MeasureView) -> FloatArray:
    return transition_field(model, point_view(y), mu)[0]


def activation(model: ModelSpec, y: AgentState) -> float:
    return float(activation_field(model, point_view(y))[0])


def lagrangian(model: ModelSpec, y: AgentState, mu: MeasureView) -> float:
    return float(lagrangian_field(model, point_view(y), mu)[0])
