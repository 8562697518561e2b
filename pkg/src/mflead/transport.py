from dataclasses import dataclass
from typing import Literal

import numpy as np
import numpy.typing as npt
import ot
from scipy.spatial.distance import cdist
from scipy.stats import wasserstein_distance

from mflead._internal.constants import MASS_TOLERANCE, W1_EMD_MAX_ITER, W1_EXACT_MAX_SUPPORT
from mflead.exceptions import DimensionMismatch, InvalidState, SupportTooLarge
from mflead.model_spec import ModelSpec
from mflead.state_space import EmpiricalEnsemble, GridDensity, MeasureView

FloatArray = npt.NDArray[np.float64]

Metric = Literal["euclidean", "cityblock"]


@dataclass(frozen=True)
class DiscreteMeasure:
    """
    Finitely supported probability measure.

    Points on Y are stored as (x, full simplex vector) rows with the cityblock metric, which gives
    |x - x'| + |lambda - lambda'|_1.
    """

    points: FloatArray
    weights: FloatArray
    metric: Metric = "euclidean"

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        weights = np.asarray(self.weights, dtype=float)
        if points.shape[0] != weights.shape[0] or points.shape[0] == 0:
            raise InvalidState(f"{points.shape[0]} points and {weights.shape[0]} weights")
        if np.any(weights < 0) or abs(float(weights.sum()) - 1.0) > MASS_TOLERANCE:
            raise InvalidState(f"measure weights must be nonnegative and sum to one, got {float(weights.sum())!r}")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @property
    def dim(self) -> int:
        return int(self.points.shape[1])

    @property
    def size(self) -> int:
        return int(self.points.shape[0])

    @staticmethod
    def normalized(points: npt.ArrayLike, masses: npt.ArrayLike, metric: Metric = "euclidean") -> "DiscreteMeasure":
        """Build from nonnegative masses, dropping empty atoms and rescaling to unit total."""
        points = np.asarray(points, dtype=float)
        masses = np.asarray(masses, dtype=float)
        keep = masses > 0
        total = float(masses[keep].sum())
        if total <= 0:
            raise InvalidState("measure has no mass")
        return DiscreteMeasure(points[keep], masses[keep] / total, metric)


def w1_1d(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    """W1 on the real line through the quantile coupling."""
    for m in (mu, nu):
        if m.dim != 1:
            raise DimensionMismatch(1, m.dim)
    return float(wasserstein_distance(mu.points[:, 0], nu.points[:, 0], mu.weights, nu.weights))


def w1_exact_small(mu: DiscreteMeasure, nu: DiscreteMeasure, metric: Metric | None = None) -> float:
    """
    Exact W1 by network-simplex min-cost flow on the pairwise ground cost.

    :param metric: Ground metric; defaults to the metric of `mu`.
    :raises SupportTooLarge: When either support exceeds the exact-solver cap.
    """
    for m in (mu, nu):
        if m.size > W1_EXACT_MAX_SUPPORT:
            raise SupportTooLarge(m.size, W1_EXACT_MAX_SUPPORT)
    if mu.dim != nu.dim:
        raise DimensionMismatch(mu.dim, nu.dim)
    cost = cdist(mu.points, nu.points, metric=metric or mu.metric)
    return float(ot.emd2(mu.weights, nu.weights, cost, numItermax=W1_EMD_MAX_ITER))


def first_moment(mu: DiscreteMeasure) -> float:
    """Mean distance to the origin in the measure's own metric."""
    order = 1 if mu.metric == "cityblock" else 2
    return float(mu.weights @ np.linalg.norm(mu.points, ord=order, axis=1))


def measure_from_ensemble(model: ModelSpec, ensemble: EmpiricalEnsemble) -> DiscreteMeasure:
    """The empirical measure on Y with (x, full simplex vector) points."""
    points = np.hstack([ensemble.x, model.label_space.full(ensemble.lam)])
    return DiscreteMeasure(points, ensemble.weights, "cityblock")


def measure_from_view(model: ModelSpec, view: MeasureView) -> DiscreteMeasure:
    points = np.hstack([view.x, model.label_space.full(view.lam)])
    return DiscreteMeasure.normalized(points, view.weights, "cityblock")


def measure_from_grid(model: ModelSpec, g: GridDensity) -> DiscreteMeasure:
    """Grid density as atoms at the centers of its nonempty cells."""
    return measure_from_view(model, g.view())


def x_marginal_measure(view: MeasureView) -> DiscreteMeasure:
    return DiscreteMeasure.normalized(view.nodes, view.collapse(view.weights))


def label_coordinate_measure(view: MeasureView, coordinate: int) -> DiscreteMeasure:
    """Law of one free simplex coordinate under the view's measure."""
    return DiscreteMeasure.normalized(view.lam[:, coordinate : coordinate + 1], view.weights)
