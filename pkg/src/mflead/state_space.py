"""
State types on Y = R^d x P(U) and the two measure containers: empirical ensembles and grid densities.

Both containers expose a `MeasureView`, a weighted list of atoms (x, lambda) grouped by spatial node.
Every model ingredient is written once against that view, so the particle and finite-volume backends
integrate the same model.
"""

import math
from abc import ABC, abstractmethod
from collections.abc import Callable, Hashable, Sequence
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import numpy.typing as npt

from mflead._internal.constants import MASS_TOLERANCE, SIMPLEX_TOLERANCE
from mflead.config import GridSpec
from mflead.exceptions import EmptyEnsemble, InvalidState, ZeroMass

FloatArray = npt.NDArray[np.float64]

ControlField = FloatArray
"""Control values of shape (M, d), one row per atom of a measure view."""


def simplex_overshoot(lam: FloatArray) -> float:
    """Largest violation of lam >= 0 and sum(lam) <= 1 over rows of free coordinates."""
    lam = np.atleast_2d(lam)
    if lam.size == 0:
        return 0.0
    below = float(np.max(-lam))
    above = float(np.max(lam.sum(axis=1) - 1.0))
    return max(below, above, 0.0)


def clamp_to_simplex(lam: FloatArray) -> FloatArray:
    """Clip free coordinates into the simplex; only meant for roundoff-sized violations."""
    out = np.clip(lam, 0.0, 1.0)
    total = out.sum(axis=1, keepdims=True)
    return np.where(total > 1.0, out / np.maximum(total, 1.0), out)


@dataclass(frozen=True, slots=True)
class SimplexPoint:
    coords: tuple[float, ...]

    def __post_init__(self) -> None:
        lam = np.asarray(self.coords, dtype=float)
        if lam.ndim != 1 or lam.size == 0:
            raise InvalidState("a simplex point needs at least one free coordinate")
        if not np.all(np.isfinite(lam)):
            raise InvalidState(f"non-finite label coordinates {self.coords}")
        overshoot = simplex_overshoot(lam)
        if overshoot > SIMPLEX_TOLERANCE:
            raise InvalidState(f"label coordinates {self.coords} leave the simplex by {overshoot:.3g}")
        object.__setattr__(self, "coords", tuple(float(v) for v in clamp_to_simplex(lam[None, :])[0]))


@dataclass(frozen=True, slots=True)
class AgentState:
    x: tuple[float, ...]
    lam: SimplexPoint

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in self.x):
            raise InvalidState(f"non-finite position {self.x}")

    @staticmethod
    def of(x: float | Sequence[float], lam: float | Sequence[float]) -> "AgentState":
        """Build from plain numbers, e.g. ``AgentState.of(0.0, 0.5)``."""
        xs = (float(x),) if np.isscalar(x) else tuple(float(v) for v in x)  # type: ignore[arg-type, union-attr]
        ls = (float(lam),) if np.isscalar(lam) else tuple(float(v) for v in lam)  # type: ignore[arg-type, union-attr]
        return AgentState(x=xs, lam=SimplexPoint(ls))


class MeasureView(ABC):
    """
    Read-only weighted atoms of a probability measure on Y, grouped by spatial node.

    Atom i sits at (x[i], lam[i]) with mass weights[i]. Several atoms may share a spatial node
    (the cells of one x-column of a grid); `collapse` sums per-atom values over each node and
    `expand` broadcasts per-node values back to the atoms.
    """

    x: FloatArray
    lam: FloatArray
    weights: FloatArray
    nodes: FloatArray
    node_of: npt.NDArray[np.intp]

    @property
    @abstractmethod
    def cache_key(self) -> Hashable | None:
        """Identifies the node set for interaction-matrix caching. None disables caching."""

    @abstractmethod
    def collapse(self, values: FloatArray) -> FloatArray:
        pass

    def expand(self, node_values: FloatArray) -> FloatArray:
        return node_values[self.node_of]

    @abstractmethod
    def label_collapse(self, values: FloatArray, n_lambda: int) -> FloatArray:
        """
        Density on the uniform label grid of `values`-weighted atoms.

        :param values: Per-atom masses of shape (M,).
        :param n_lambda: Cells per free coordinate of the target label grid.
        :return: Array of shape (n_lambda,) * k integrating to the total of `values`.
        """

    @property
    def n_atoms(self) -> int:
        return int(self.weights.shape[0])

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())


class ParticleView(MeasureView):
    def __init__(self, x: FloatArray, lam: FloatArray, weights: FloatArray | None = None):
        self.x = np.atleast_2d(np.asarray(x, dtype=float))
        self.lam = np.atleast_2d(np.asarray(lam, dtype=float))
        n = self.x.shape[0]
        self.weights = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
        self.nodes = self.x
        self.node_of = np.arange(n)

    @property
    def cache_key(self) -> Hashable | None:
        return None

    def collapse(self, values: FloatArray) -> FloatArray:
        return values

    def expand(self, node_values: FloatArray) -> FloatArray:
        return node_values

    def label_collapse(self, values: FloatArray, n_lambda: int) -> FloatArray:
        k = self.lam.shape[1]
        hist, _ = np.histogramdd(self.lam, bins=[n_lambda] * k, range=[(0.0, 1.0)] * k, weights=values)
        return hist / (1.0 / n_lambda) ** k

    @staticmethod
    def mixture(views: Sequence["ParticleView"], coefficients: Sequence[float]) -> "ParticleView":
        """Convex combination of particle measures as one weighted atom list."""
        return ParticleView(
            np.concatenate([v.x for v in views]),
            np.concatenate([v.lam for v in views]),
            np.concatenate([c * v.weights for v, c in zip(views, coefficients, strict=True)]),
        )


@dataclass(frozen=True)
class EmpiricalEnsemble:
    """N agents with uniform weights 1/N, stored as arrays x (N, d) and lam (N, k)."""

    x: FloatArray
    lam: FloatArray

    def __post_init__(self) -> None:
        if self.x.ndim != 2 or self.lam.ndim != 2 or self.x.shape[0] != self.lam.shape[0]:
            raise InvalidState(f"positions {self.x.shape} and labels {self.lam.shape} are inconsistent")
        if self.x.shape[0] == 0:
            raise EmptyEnsemble()
        self.x.setflags(write=False)
        self.lam.setflags(write=False)

    @staticmethod
    def from_arrays(x: FloatArray, lam: FloatArray) -> "EmpiricalEnsemble":
        """Validated construction from raw arrays, with the same checks as `make_empirical`."""
        x = np.array(x, dtype=float, ndmin=2)
        lam = np.array(lam, dtype=float, ndmin=2)
        if x.shape[0] == 0:
            raise EmptyEnsemble()
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(lam)):
            raise InvalidState("non-finite agent coordinates")
        overshoot = simplex_overshoot(lam)
        if overshoot > SIMPLEX_TOLERANCE:
            raise InvalidState(f"label coordinates leave the simplex by {overshoot:.3g}")
        return EmpiricalEnsemble(x=x, lam=clamp_to_simplex(lam))

    @property
    def n(self) -> int:
        return int(self.x.shape[0])

    @property
    def weights(self) -> FloatArray:
        return np.full(self.n, 1.0 / self.n)

    @property
    def states(self) -> list[AgentState]:
        return [AgentState(x=tuple(xi), lam=SimplexPoint(tuple(li))) for xi, li in zip(self.x, self.lam, strict=True)]

    def view(self) -> ParticleView:
        return ParticleView(self.x, self.lam)


def make_empirical(states: Sequence[AgentState]) -> EmpiricalEnsemble:
    """
    Collect agent states into an empirical measure with weights 1/N, preserving order.

    :raises EmptyEnsemble: When `states` is empty.
    :raises InvalidState: When the states do not share dimensions.
    """
    if len(states) == 0:
        raise EmptyEnsemble()
    dims = {(len(s.x), len(s.lam.coords)) for s in states}
    if len(dims) != 1:
        raise InvalidState(f"agents disagree on dimensions: {sorted(dims)}")
    x = np.array([s.x for s in states], dtype=float)
    lam = np.array([s.lam.coords for s in states], dtype=float)
    return EmpiricalEnsemble(x=x, lam=lam)


@dataclass(frozen=True)
class GridAxes:
    """
    Uniform cell-centered tensor grid over [x_min, x_max] x [0, 1]^k.

    For k >= 2 the label square is masked to the simplex: a cell is active when the coordinates of
    its center sum to at most one.
    """

    spec: GridSpec
    n_free: int

    x_centers: FloatArray = field(init=False)
    lam_centers: FloatArray = field(init=False)
    label_mask: npt.NDArray[np.bool_] = field(init=False)

    def __post_init__(self) -> None:
        dx, dl = self.spec.dx, self.spec.dlambda
        object.__setattr__(self, "x_centers", self.spec.x_min + dx * (np.arange(self.spec.n_x) + 0.5))
        object.__setattr__(self, "lam_centers", dl * (np.arange(self.spec.n_lambda) + 0.5))
        mesh = np.meshgrid(*([self.lam_centers] * self.n_free), indexing="ij")
        object.__setattr__(self, "label_mask", sum(mesh) <= 1.0 + 1e-12)

    @property
    def dx(self) -> float:
        return self.spec.dx

    @property
    def dl(self) -> float:
        return self.spec.dlambda

    @property
    def cell_volume(self) -> float:
        return self.dx * self.dl**self.n_free

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.spec.n_x,) + (self.spec.n_lambda,) * self.n_free

    @cached_property
    def mask(self) -> npt.NDArray[np.bool_]:
        """Active cells over the full grid shape."""
        return np.broadcast_to(self.label_mask, self.shape)

    @cached_property
    def active(self) -> npt.NDArray[np.intp]:
        """Flat C-order indices of active cells; x is the slowest axis."""
        return np.flatnonzero(self.mask)

    @cached_property
    def atom_x(self) -> FloatArray:
        ix = np.unravel_index(self.active, self.shape)[0]
        return self.x_centers[ix][:, None]

    @cached_property
    def atom_lam(self) -> FloatArray:
        idx = np.unravel_index(self.active, self.shape)
        return np.stack([self.lam_centers[i] for i in idx[1:]], axis=1)

    @cached_property
    def atom_node(self) -> npt.NDArray[np.intp]:
        return np.unravel_index(self.active, self.shape)[0].astype(np.intp)

    @cached_property
    def atom_label_cell(self) -> npt.NDArray[np.intp]:
        """Flat index of each active atom's cell in the label grid."""
        return (self.active % int(np.prod(self.shape[1:]))).astype(np.intp)

    @property
    def key(self) -> Hashable:
        s = self.spec
        return ("grid", s.n_x, s.x_min, s.x_max, s.n_lambda, self.n_free)


class GridView(MeasureView):
    def __init__(self, axes: GridAxes, values: FloatArray):
        self.axes = axes
        self.x = axes.atom_x
        self.lam = axes.atom_lam
        self.weights = values.reshape(-1)[axes.active] * axes.cell_volume
        self.nodes = axes.x_centers[:, None]
        self.node_of = axes.atom_node
        # Atoms are sorted by node and every x-column has the active cell at lambda = 0.
        self._starts = np.searchsorted(self.node_of, np.arange(axes.spec.n_x))

    @property
    def cache_key(self) -> Hashable | None:
        return self.axes.key

    def collapse(self, values: FloatArray) -> FloatArray:
        return np.add.reduceat(values, self._starts, axis=0)

    def label_collapse(self, values: FloatArray, n_lambda: int) -> FloatArray:
        if n_lambda != self.axes.spec.n_lambda:
            raise ValueError(f"grid view only collapses onto its own label grid of {self.axes.spec.n_lambda} cells")
        label_shape = self.axes.shape[1:]
        flat = np.bincount(self.axes.atom_label_cell, weights=values, minlength=int(np.prod(label_shape)))
        return flat.reshape(label_shape) / self.axes.dl**self.axes.n_free

    def scatter(self, atom_values: FloatArray) -> FloatArray:
        """Place per-atom values back on the full grid shape, zero on masked cells."""
        out = np.zeros((int(np.prod(self.axes.shape)),) + atom_values.shape[1:])
        out[self.axes.active] = atom_values
        return out.reshape(self.axes.shape + atom_values.shape[1:])


@dataclass(frozen=True)
class GridDensity:
    """Cell averages of a density on `axes`; values has shape axes.shape and is zero on masked cells."""

    axes: GridAxes
    values: FloatArray

    def __post_init__(self) -> None:
        if self.values.shape != self.axes.shape:
            raise InvalidState(f"grid values have shape {self.values.shape}, expected {self.axes.shape}")
        if np.any(self.values < 0):
            raise InvalidState(f"negative cell value {float(self.values.min()):.3g}")
        if np.any(self.values[~self.axes.mask] != 0):
            raise InvalidState("masked cells outside the simplex carry mass")
        self.values.setflags(write=False)

    def view(self) -> GridView:
        return GridView(self.axes, self.values)

    def scaled(self, factor: float) -> "GridDensity":
        return GridDensity(self.axes, self.values * factor)

    def x_marginal(self) -> FloatArray:
        """Density of the first marginal on the x centers."""
        return self.values.reshape(self.axes.spec.n_x, -1).sum(axis=1) * self.axes.dl**self.axes.n_free


def grid_from_density(f: Callable[[FloatArray, FloatArray], FloatArray], axes: GridAxes) -> GridDensity:
    """
    Sample a closed-form density at active cell centers and normalize to unit mass.

    :param f: Callable taking positions (M, d) and free label coordinates (M, k), returning (M,) values >= 0.
    :raises ZeroMass: When `f` vanishes on every active cell center.
    """
    samples = np.asarray(f(axes.atom_x, axes.atom_lam), dtype=float)
    if np.any(samples < 0) or not np.all(np.isfinite(samples)):
        raise InvalidState("initial density must be finite and nonnegative at cell centers")
    mass = float(samples.sum()) * axes.cell_volume
    if not mass > 0:
        raise ZeroMass()
    values = np.zeros(int(np.prod(axes.shape)))
    values[axes.active] = samples / mass
    grid = GridDensity(axes, values.reshape(axes.shape))
    # One rescale removes the residual of the first division.
    residual = total_mass(grid)
    if abs(residual - 1.0) > MASS_TOLERANCE:
        grid = grid.scaled(1.0 / residual)
    return grid


def total_mass(g: GridDensity) -> float:
    return float(g.values.sum()) * g.axes.cell_volume


def sample_from_grid(g: GridDensity, n: int, rng: np.random.Generator) -> EmpiricalEnsemble:
    """
    Draw `n` i.i.d. agents from a grid density: a cell by mass, then a uniform point in the cell.

    Points of the diagonal cells that fall outside the triangle are reflected back across the
    diagonal, so the sampled law stays the cell-average density restricted to the simplex.
    """
    axes = g.axes
    probs = g.values.reshape(-1)[axes.active]
    probs = probs / probs.sum()
    cells = axes.active[rng.choice(probs.size, size=n, p=probs)]
    idx = np.unravel_index(cells, axes.shape)

    x = axes.x_centers[idx[0]] + axes.dx * (rng.random(n) - 0.5)
    lam = np.stack([axes.lam_centers[i] for i in idx[1:]], axis=1) + axes.dl * (rng.random((n, axes.n_free)) - 0.5)
    if axes.n_free == 2:
        outside = lam.sum(axis=1) > 1.0
        lam[outside] = 1.0 - lam[outside][:, ::-1]
    lam = clamp_to_simplex(lam)
    return EmpiricalEnsemble(x=x[:, None], lam=lam)
