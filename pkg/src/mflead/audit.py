"""
Randomized audit of the structural assumptions on the model ingredients.

Random measures and evaluation points are drawn in the ball of radius R. Growth bounds are fitted
as sup |field| / (1 + |y| + first moment), Lipschitz bounds as difference quotients under
perturbations of decreasing size. A constant whose quotient keeps growing as the perturbation
shrinks is flagged: the ingredient is not Lipschitz at the sampled scale.
"""

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel

from mflead._internal.constants import AUDIT_GROWTH_THRESHOLD
from mflead._internal.state import _GLOBAL_STATE
from mflead.config import AuditConfig, GridSpec
from mflead.ingredients import activation_field, transition_field, velocity_field
from mflead.model_spec import ModelSpec
from mflead.state_space import ParticleView
from mflead.transport import DiscreteMeasure, first_moment, w1_exact_small

FloatArray = npt.NDArray[np.float64]

POINTS_PER_MEASURE = 100

AUDIT_KEYS = ("v1", "v2", "v3", "T1", "T2", "h1", "h2")
"""
v1 is the velocity Lipschitz constant in the state, v2 its Lipschitz constant in the measure under W1 and
v3 its growth bound. T1 is the growth bound of the transition drift and T2 the larger of its Lipschitz
constants in the state and in the measure. h1 is the sup of the activation and h2 its Lipschitz constant.
"""


class AuditReport(BaseModel):
    radius: float
    n_samples: int
    scales: list[float]
    constants: dict[str, float]
    quotients: dict[str, list[float]]
    """Lipschitz quotient per perturbation scale, coarse to fine."""

    flagged: list[str]
    sup_h: float

    @property
    def finite(self) -> bool:
        return all(np.isfinite(v) for v in self.constants.values())


def _prepare(model: ModelSpec, cfg: AuditConfig) -> ModelSpec:
    model = model.with_epsilon(GridSpec().dx)
    if model.transition.normalizers is None:
        model = model.with_normalizers({"F": cfg.default_normalizer, "L": cfg.default_normalizer})
    return model


def _random_labels(rng: np.random.Generator, n: int, n_free: int) -> FloatArray:
    return rng.dirichlet(np.ones(n_free + 1), size=n)[:, :n_free]


def _norm_y(model: ModelSpec, x: FloatArray, lam: FloatArray) -> FloatArray:
    return np.abs(x).sum(axis=1) + np.abs(model.label_space.full(lam)).sum(axis=1)


def _perturb(
    directions: tuple[FloatArray, FloatArray], x: FloatArray, lam: FloatArray, delta: float
) -> tuple[FloatArray, FloatArray]:
    """Move x by delta along a fixed direction and mix lambda toward a fixed simplex point."""
    x_dir, lam_target = directions
    return x + delta * x_dir, (1.0 - delta) * lam + delta * lam_target


def _distance(model: ModelSpec, x: FloatArray, lam: FloatArray, x2: FloatArray, lam2: FloatArray) -> FloatArray:
    ls = model.label_space
    return np.abs(x2 - x).sum(axis=1) + np.abs(ls.full(lam2) - ls.full(lam)).sum(axis=1)


def _as_measure(model: ModelSpec, x: FloatArray, lam: FloatArray, weights: FloatArray) -> DiscreteMeasure:
    return DiscreteMeasure(np.hstack([x, model.label_space.full(lam)]), weights, "cityblock")


def _ratio(num: FloatArray, den: FloatArray) -> float:
    keep = den > 0
    if not np.any(keep):
        return 0.0
    return float(np.max(num[keep] / den[keep], initial=0.0))


def assumption_audit(model: ModelSpec, cfg: AuditConfig | None = None) -> AuditReport:
    """
    Fit growth and Lipschitz constants of v, T and h from random states and measures in B_R.

    Unresolved kernel widths default to one cell of the default grid and unresolved concentration
    normalizers to `cfg.default_normalizer`. The report never raises for a bad model: unbounded
    quotients show up in `flagged`.
    """
    cfg = cfg or AuditConfig()
    model = _prepare(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    d, k = model.dim, model.label_space.n_free
    n_measures = max(1, -(-cfg.n_samples // POINTS_PER_MEASURE))

    growth = {"v3": 0.0, "T1": 0.0}
    sup_h = 0.0
    per_scale = {key: np.zeros(len(cfg.scales)) for key in ("v1", "v2", "T2", "h2")}

    for _ in range(n_measures):
        atoms_x = rng.uniform(-cfg.radius, cfg.radius, size=(cfg.n_atoms, d))
        atoms_lam = _random_labels(rng, cfg.n_atoms, k)
        weights = rng.dirichlet(np.ones(cfg.n_atoms))
        psi = ParticleView(atoms_x, atoms_lam, weights)
        base = _as_measure(model, atoms_x, atoms_lam, weights)
        moment = first_moment(base)

        px = rng.uniform(-cfg.radius, cfg.radius, size=(POINTS_PER_MEASURE, d))
        plam = _random_labels(rng, POINTS_PER_MEASURE, k)
        points = ParticleView(px, plam)
        v = velocity_field(model, points, psi)
        trans = transition_field(model, points, psi)
        h = activation_field(model, points)

        scale = 1.0 + _norm_y(model, px, plam) + moment
        growth["v3"] = max(growth["v3"], float(np.max(np.abs(v).sum(axis=1) / scale)))
        growth["T1"] = max(growth["T1"], float(np.max(np.abs(trans).sum(axis=1) / scale)))
        sup_h = max(sup_h, float(h.max(initial=0.0)))

        point_dirs = (rng.choice([-1.0, 1.0], size=(POINTS_PER_MEASURE, d)), _random_labels(rng, POINTS_PER_MEASURE, k))
        atom_dirs = (rng.choice([-1.0, 1.0], size=(cfg.n_atoms, d)), _random_labels(rng, cfg.n_atoms, k))
        for s, delta in enumerate(cfg.scales):
            qx, qlam = _perturb(point_dirs, px, plam, delta)
            moved = ParticleView(qx, qlam)
            dist = _distance(model, px, plam, qx, qlam)
            per_scale["v1"][s] = max(
                per_scale["v1"][s], _ratio(np.abs(velocity_field(model, moved, psi) - v).sum(axis=1), dist)
            )
            per_scale["T2"][s] = max(
                per_scale["T2"][s], _ratio(np.abs(transition_field(model, moved, psi) - trans).sum(axis=1), dist)
            )
            per_scale["h2"][s] = max(per_scale["h2"][s], _ratio(np.abs(activation_field(model, moved) - h), dist))

            ax, alam = _perturb(atom_dirs, atoms_x, atoms_lam, delta)
            psi_moved = ParticleView(ax, alam, weights)
            w1 = w1_exact_small(base, _as_measure(model, ax, alam, weights))
            if w1 > 0:
                dv = float(np.max(np.abs(velocity_field(model, points, psi_moved) - v).sum(axis=1)))
                dT = float(np.max(np.abs(transition_field(model, points, psi_moved) - trans).sum(axis=1)))
                per_scale["v2"][s] = max(per_scale["v2"][s], dv / w1)
                per_scale["T2"][s] = max(per_scale["T2"][s], dT / w1)

    quotients = {key: [float(q) for q in values] for key, values in per_scale.items()}
    constants = {
        "v1": max(quotients["v1"]),
        "v2": max(quotients["v2"]),
        "v3": growth["v3"],
        "T1": growth["T1"],
        "T2": max(quotients["T2"]),
        "h1": sup_h,
        "h2": max(quotients["h2"]),
    }
    flagged = []
    for key, values in quotients.items():
        coarse, fine = values[-2], values[-1]
        if (coarse > 0 and fine > AUDIT_GROWTH_THRESHOLD * coarse) or (coarse == 0 and fine > 1e-9):
            flagged.append(key)

    report = AuditReport(
        radius=cfg.radius,
        n_samples=n_measures * POINTS_PER_MEASURE,
        scales=list(cfg.scales),
        constants=constants,
        quotients=quotients,
        flagged=sorted(flagged),
        sup_h=sup_h,
    )
    _GLOBAL_STATE.logger.info("Assumption audit: constants %s, flagged %s", constants, report.flagged)
    return report
