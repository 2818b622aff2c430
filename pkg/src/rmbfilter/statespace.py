"""State spaces, priors and weighted measures over atoms.

States are represented as follows throughout the package:

* continuum spaces: float arrays of shape ``(n,)``; a collection of ``m``
  states is an array of shape ``(m, n)``.
* finite spaces: integer indices ``0..k-1``; ``StateSpace.points`` holds the
  label of each index, and labels are what user functions ``f`` receive.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss

from .errors import ConstructionError, DomainError, NumericError

CONTINUUM = "continuum"
FINITE = "finite"

NORMALIZATION_TOL = 1e-12


@dataclass(frozen=True)
class StateSpace:
    """The space E together with its reference measure m.

    Lebesgue measure for a continuum box in R^n, counting measure for a
    finite set of labeled points.
    """

    dimension: int = 1
    kind: str = CONTINUUM
    points: tuple = ()
    box: Optional[tuple] = None

    def __post_init__(self):
        if int(self.dimension) != self.dimension or self.dimension < 1:
            raise ConstructionError(f"dimension must be a positive integer, got {self.dimension}")
        if self.kind not in (CONTINUUM, FINITE):
            raise ConstructionError(f"unknown state space kind {self.kind!r}")
        if self.kind == FINITE:
            if self.dimension != 1:
                raise ConstructionError("finite state spaces have dimension 1")
            if len(self.points) < 2:
                raise ConstructionError("a finite state space needs at least 2 points")
            if len(set(self.points)) != len(self.points):
                raise ConstructionError("finite state space points must be distinct")
        if self.box is not None:
            box = tuple((float(lo), float(hi)) for lo, hi in self.box)
            if len(box) != self.dimension or any(lo >= hi for lo, hi in box):
                raise ConstructionError(f"invalid box {self.box!r} for dimension {self.dimension}")
            object.__setattr__(self, "box", box)

    @classmethod
    def continuum(cls, dimension: int = 1, box=None) -> "StateSpace":
        return cls(dimension=dimension, kind=CONTINUUM, box=box)

    @classmethod
    def finite(cls, points) -> "StateSpace":
        if isinstance(points, (int, np.integer)):
            points = range(int(points))
        return cls(dimension=1, kind=FINITE, points=tuple(points))

    @property
    def is_finite(self) -> bool:
        return self.kind == FINITE

    @property
    def reference_measure(self) -> str:
        return "counting" if self.is_finite else "lebesgue"

    @property
    def size(self) -> int:
        return len(self.points)

    def as_state(self, value) -> np.ndarray:
        """Coerce one state to the canonical representation."""
        if self.is_finite:
            idx = int(value)
            if idx != value or not 0 <= idx < self.size:
                raise DomainError(f"{value!r} is not a state index of a {self.size}-point space")
            return np.asarray(idx)
        arr = np.asarray(value, dtype=float).reshape(-1)
        if arr.shape != (self.dimension,):
            raise DomainError(f"state {value!r} does not have dimension {self.dimension}")
        return arr

    def as_states(self, values) -> np.ndarray:
        """Coerce a list of states to ``(m,)`` indices or an ``(m, n)`` array."""
        if self.is_finite:
            arr = np.asarray(values)
            idx = arr.astype(int).reshape(-1)
            if np.any(idx != arr.reshape(-1)) or np.any((idx < 0) | (idx >= self.size)):
                raise DomainError(f"{values!r} are not state indices of a {self.size}-point space")
            return idx
        arr = np.asarray(values, dtype=float)
        if self.dimension == 1:
            arr = arr.reshape(-1, 1)
        elif arr.ndim == 1 and arr.shape[0] == self.dimension:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2 or arr.shape[1] != self.dimension:
            raise DomainError(f"states of shape {arr.shape} do not match dimension {self.dimension}")
        return arr

    def label(self, state):
        """The value a user function receives for `state`."""
        if self.is_finite:
            return self.points[int(state)]
        state = np.asarray(state, dtype=float).reshape(-1)
        return float(state[0]) if self.dimension == 1 else state


def _check_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=float).reshape(-1)
    for i, wi in enumerate(w):
        if not np.isfinite(wi):
            raise ConstructionError(f"weight at index {i} is not finite: {wi}", index=i)
        if wi < 0:
            raise ConstructionError(f"negative weight at index {i}: {wi}", index=i)
    return w


def _check_distinct(support: np.ndarray):
    keys = support.reshape(len(support), -1)
    seen = {}
    for i, row in enumerate(keys):
        key = row.tobytes()
        if key in seen:
            raise ConstructionError(
                f"duplicate support point at index {i} (same as index {seen[key]})", index=i
            )
        seen[key] = i


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class WeightedMeasure:
    """A finite nonnegative measure sum_i w_i delta_{z_i}, not necessarily normalized."""

    support: np.ndarray
    weights: np.ndarray
    space: StateSpace = field(default_factory=StateSpace)

    def __post_init__(self):
        support = self.space.as_states(self.support)
        weights = _check_weights(self.weights)
        if len(support) != len(weights):
            raise ConstructionError(
                f"support has {len(support)} points but {len(weights)} weights were given"
            )
        if len(support) == 0:
            raise ConstructionError("a measure needs at least one support point")
        object.__setattr__(self, "support", _freeze(support))
        object.__setattr__(self, "weights", _freeze(weights))

    def __len__(self):
        return len(self.weights)

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.weights))

    def normalize(self) -> "Posterior":
        mass = self.total_mass
        if not mass > 0:
            raise NumericError("cannot normalize a measure with zero total mass")
        return Posterior(self.support, self.weights / mass, self.space)

    def labels(self) -> list:
        return [self.space.label(s) for s in self.support]


@dataclass(frozen=True, eq=False)
class Posterior(WeightedMeasure):
    """A probability measure over finitely many atoms."""

    def __post_init__(self):
        super().__post_init__()
        total = float(np.sum(self.weights))
        if abs(total - 1.0) > NORMALIZATION_TOL:
            # renormalize tiny drift, reject anything else
            if abs(total - 1.0) > 1e-8:
                raise ConstructionError(f"probability weights sum to {total}, not 1")
            object.__setattr__(self, "weights", _freeze(self.weights / total))
        if np.any(self.weights > 1.0):
            raise ConstructionError("probability weights must lie in [0, 1]")

    def mass_at(self, state) -> float:
        """Probability of the atom equal to `state` (0 if it is not an atom)."""
        target = self.space.as_state(state)
        hits = np.all(self.support.reshape(len(self), -1) == target.reshape(1, -1), axis=1)
        return float(self.weights[hits].sum())

    @property
    def mean(self):
        if self.space.is_finite:
            return expectation(self, lambda x: x)
        return self.weights @ self.support


@dataclass(frozen=True, eq=False)
class Prior(Posterior):
    """The law of the hidden variable X."""

    representation: str = "atomic"

    def __post_init__(self):
        super().__post_init__()
        if self.representation not in ("atomic", "quadrature"):
            raise ConstructionError(f"unknown prior representation {self.representation!r}")
        _check_distinct(self.support)

    @property
    def is_degenerate(self) -> bool:
        return int(np.count_nonzero(self.weights)) == 1

    def diameter(self) -> float:
        if self.space.is_finite:
            return float(len(self))
        pts = self.support
        if len(pts) < 2:
            return 0.0
        return float(np.max(np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)))


def make_atomic_prior(points, weights=None, space: Optional[StateSpace] = None) -> Prior:
    """Build a normalized atomic prior from points and nonnegative weights."""
    if space is None:
        first = np.asarray(points[0], dtype=float) if len(points) else np.zeros(1)
        space = StateSpace.continuum(max(1, first.size))
    support = space.as_states(points)
    if weights is None:
        weights = np.ones(len(support))
    w = _check_weights(weights)
    if len(w) != len(support):
        raise ConstructionError(f"{len(support)} points but {len(w)} weights")
    _check_distinct(support)
    total = w.sum()
    if not total > 0:
        raise ConstructionError("prior weights have zero total mass", index=0)
    return Prior(support, w / total, space, representation="atomic")


def gauss_legendre_box(nodes: int, box) -> tuple[np.ndarray, np.ndarray]:
    """Tensor-product Gauss-Legendre rule on a box; returns (points (N, n), weights (N,))."""
    x, w = leggauss(int(nodes))
    axes_x, axes_w = [], []
    for lo, hi in box:
        half = 0.5 * (hi - lo)
        axes_x.append(0.5 * (hi + lo) + half * x)
        axes_w.append(half * w)
    if len(box) == 1:
        return axes_x[0].reshape(-1, 1), axes_w[0]
    pts = np.array(list(itertools.product(*axes_x)))
    wts = np.array([np.prod(c) for c in itertools.product(*axes_w)])
    return pts, wts


def make_density_prior(density: Callable, nodes: int, box: Sequence) -> Prior:
    """Discretize nu(dz) = g(z) dz on a box with Gauss-Legendre nodes.

    The node weights are folded into the prior weights, so expectations under
    the returned prior are Gauss-Legendre approximations of integrals against
    the (renormalized) density restricted to the box.
    """
    if int(nodes) != nodes or nodes < 2:
        raise ConstructionError(f"nodes must be an integer >= 2, got {nodes}")
    if np.ndim(box) == 1:
        box = [box]
    box = [(float(lo), float(hi)) for lo, hi in box]
    space = StateSpace.continuum(len(box))
    pts, qw = gauss_legendre_box(int(nodes), box)
    dens = np.empty(len(pts))
    for i, p in enumerate(pts):
        g = float(density(space.label(p)))
        if not np.isfinite(g) or g < 0:
            raise ConstructionError(f"density is negative or non-finite at node {i} ({p}): {g}", index=i)
        dens[i] = g
    w = qw * dens
    total = w.sum()
    if not total >= 1e-300:
        raise ConstructionError(f"density has total mass {total} on the box")
    return Prior(pts, w / total, space, representation="quadrature")


def _function_values(measure: WeightedMeasure, f: Callable) -> np.ndarray:
    values = []
    for z in measure.support:
        label = measure.space.label(z)
        v = np.asarray(f(label), dtype=float)
        if not np.all(np.isfinite(v)):
            raise NumericError(f"f is not finite at support point {label!r}")
        values.append(v)
    return np.array(values)


def expectation(measure: WeightedMeasure, f: Callable):
    """Integral of f against the measure: sum_i f(z_i) w_i."""
    values = _function_values(measure, f)
    out = np.tensordot(measure.weights, values, axes=1)
    return float(out) if np.ndim(out) == 0 else out


def total_variation(a: WeightedMeasure, b: WeightedMeasure) -> float:
    """Half the l1 distance between two probability vectors on a common support."""
    if a.support.shape != b.support.shape or not np.array_equal(a.support, b.support):
        raise DomainError("total_variation needs measures on the same support in the same order")
    return float(0.5 * np.abs(a.weights - b.weights).sum())
