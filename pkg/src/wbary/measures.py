"""Probability measures on a box: point clouds, grid densities, quantile tables."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .constants import GRID_MASS_TOL, MASS_TOL, SUPPORT_TOL


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class BoxDomain:
    """Axis-aligned box ``[lower_0, upper_0] x ... x [lower_{d-1}, upper_{d-1}]``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = _frozen(np.atleast_1d(self.lower))
        upper = _frozen(np.atleast_1d(self.upper))
        if lower.ndim != 1 or lower.shape != upper.shape:
            raise ValueError("lower and upper must be vectors of the same length")
        if not np.all(lower < upper):
            raise ValueError(f"degenerate box: lower={lower.tolist()} upper={upper.tolist()}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def unit(cls, dim: int = 1) -> "BoxDomain":
        return cls(np.zeros(dim), np.ones(dim))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def volume(self) -> float:
        return float(np.prod(self.upper - self.lower))

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.upper - self.lower))

    def contains(self, points, tol: float = SUPPORT_TOL) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(-1, self.dim)
        return np.all((points >= self.lower - tol) & (points <= self.upper + tol), axis=1)

    def __eq__(self, other):
        if not isinstance(other, BoxDomain):
            return NotImplemented
        return np.array_equal(self.lower, other.lower) and np.array_equal(self.upper, other.upper)

    def __hash__(self):
        return hash((self.lower.tobytes(), self.upper.tobytes()))


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Weighted point cloud ``sum_k weights[k] * delta_{points[k]}``.

    ``points`` is stored as an ``(m, d)`` array. Invariants (unit mass,
    containment) are checked by :func:`validate`, not here.
    """

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.asarray(self.weights, dtype=float).ravel()
        if pts.ndim != 2 or pts.shape[0] != w.shape[0]:
            raise ValueError(f"{pts.shape[0]} points but {w.shape[0]} weights")
        if w.shape[0] == 0:
            raise ValueError("a discrete measure needs at least one atom")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "weights", _frozen(w))

    @classmethod
    def uniform(cls, points) -> "DiscreteMeasure":
        pts = np.asarray(points, dtype=float)
        m = pts.shape[0]
        return cls(pts, np.full(m, 1.0 / m))

    @classmethod
    def dirac(cls, point) -> "DiscreteMeasure":
        return cls(np.atleast_1d(np.asarray(point, dtype=float))[None, :], [1.0])

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def mean(self) -> np.ndarray:
        return self.weights @ self.points


@dataclass(frozen=True, eq=False)
class GridDensity:
    """Piecewise-constant density on a regular grid over ``domain``.

    ``values`` has shape ``shape`` (row-major, first axis = first coordinate)
    and is a density per unit volume. ``floor`` optionally tags the lower
    bound the density is meant to respect.
    """

    domain: BoxDomain
    values: np.ndarray
    floor: float | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != self.domain.dim:
            raise ValueError(f"values have {vals.ndim} axes, domain has dim {self.domain.dim}")
        object.__setattr__(self, "values", _frozen(vals))

    @classmethod
    def uniform(cls, domain: BoxDomain, shape: Sequence[int] | int, floor=None) -> "GridDensity":
        shape = _as_shape(shape, domain.dim)
        return cls(domain, np.full(shape, 1.0 / domain.volume), floor)

    @classmethod
    def from_masses(cls, domain: BoxDomain, masses, floor=None) -> "GridDensity":
        masses = np.asarray(masses, dtype=float)
        cv = domain.volume / masses.size
        return cls(domain, masses / cv, floor)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def cell_widths(self) -> np.ndarray:
        return (self.domain.upper - self.domain.lower) / np.asarray(self.shape)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.cell_widths))

    def masses(self) -> np.ndarray:
        return self.values * self.cell_volume

    def edges(self, axis: int = 0) -> np.ndarray:
        return np.linspace(self.domain.lower[axis], self.domain.upper[axis], self.shape[axis] + 1)

    def centers(self) -> np.ndarray:
        """Cell centres as an ``(N, d)`` array in row-major cell order."""
        return grid_centers(self.domain, self.shape)

    def with_values(self, values) -> "GridDensity":
        return GridDensity(self.domain, np.asarray(values, dtype=float).reshape(self.shape), self.floor)


Measure = Union[DiscreteMeasure, GridDensity]


def _as_shape(shape, dim: int) -> tuple[int, ...]:
    if np.isscalar(shape):
        return (int(shape),) * dim
    shape = tuple(int(s) for s in shape)
    if len(shape) != dim:
        raise ValueError(f"grid shape {shape} does not match dimension {dim}")
    return shape


def grid_centers(domain: BoxDomain, shape) -> np.ndarray:
    shape = _as_shape(shape, domain.dim)
    axes = [
        domain.lower[a] + (np.arange(n) + 0.5) * (domain.upper[a] - domain.lower[a]) / n
        for a, n in enumerate(shape)
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass(frozen=True)
class ValidationResult:
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate(measure: Measure, domain: BoxDomain | None = None) -> ValidationResult:
    """Check the measure invariants and report every violation found.

    Never raises on an invalid measure; the caller decides what to do.
    """
    problems: list[str] = []
    if isinstance(measure, DiscreteMeasure):
        w = measure.weights
        if not np.all(np.isfinite(w)) or not np.all(np.isfinite(measure.points)):
            problems.append("non-finite points or weights")
        if np.any(w < 0):
            problems.append(f"negative weights at indices {np.flatnonzero(w < 0).tolist()}")
        total = float(w.sum())
        if abs(total - 1.0) > MASS_TOL:
            problems.append(f"weights sum to {total:.12g}")
        if domain is not None:
            if domain.dim != measure.dim:
                problems.append(f"dimension {measure.dim} does not match domain dimension {domain.dim}")
            else:
                outside = ~domain.contains(measure.points)
                if np.any(outside):
                    problems.append(f"support outside Ω at indices {np.flatnonzero(outside).tolist()}")
    elif isinstance(measure, GridDensity):
        v = measure.values
        if not np.all(np.isfinite(v)):
            problems.append("non-finite density values")
        if np.any(v < 0):
            problems.append(f"negative density values at {int(np.sum(v < 0))} cells")
        if measure.floor is not None and np.any(v < measure.floor):
            problems.append(f"density below floor {measure.floor:g} at {int(np.sum(v < measure.floor))} cells")
        total = float(v.sum() * measure.cell_volume)
        if abs(total - 1.0) > GRID_MASS_TOL:
            problems.append(f"total mass is {total:.12g}")
        if domain is not None and domain != measure.domain:
            problems.append("grid domain differs from Ω")
    else:
        problems.append(f"unsupported measure type {type(measure).__name__}")
    return ValidationResult(tuple(problems))


def grid_to_discrete(density: GridDensity) -> DiscreteMeasure:
    """Collapse each cell's mass onto its centre."""
    return DiscreteMeasure(density.centers(), density.masses().ravel())


@dataclass(frozen=True, eq=False)
class QuantileTable:
    """Left-continuous generalized inverse of a 1-D distribution function.

    On the piece ``(breakpoints[k], breakpoints[k+1]]`` the quantile moves
    linearly from ``start[k]`` to ``end[k]``; discrete measures give
    ``start == end`` (piecewise constant), grid densities give the cell
    edges (piecewise linear).
    """

    breakpoints: np.ndarray
    start: np.ndarray
    end: np.ndarray = field(default=None)

    def __post_init__(self):
        b = np.asarray(self.breakpoints, dtype=float)
        s = np.asarray(self.start, dtype=float)
        e = s if self.end is None else np.asarray(self.end, dtype=float)
        if b.ndim != 1 or s.shape != (b.size - 1,) or e.shape != s.shape:
            raise ValueError("need K+1 breakpoints and K start/end values")
        if b[0] != 0.0 or b[-1] != 1.0 or np.any(np.diff(b) <= 0):
            raise ValueError("breakpoints must increase strictly from 0 to 1")
        if np.any(e < s) or np.any(s[1:] < e[:-1]):
            raise ValueError("quantile values must be nondecreasing")
        object.__setattr__(self, "breakpoints", _frozen(b))
        object.__setattr__(self, "start", _frozen(s))
        object.__setattr__(self, "end", _frozen(e))

    @property
    def is_piecewise_constant(self) -> bool:
        return bool(np.array_equal(self.start, self.end))

    @property
    def values(self) -> np.ndarray:
        """Distinct quantile levels ``start[0], end[0], end[1], ...``."""
        return np.concatenate([self.start[:1], self.end])

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        b = self.breakpoints
        k = np.clip(np.searchsorted(b, t, side="left") - 1, 0, b.size - 2)
        frac = np.clip((t - b[k]) / (b[k + 1] - b[k]), 0.0, 1.0)
        return self.start[k] + (self.end[k] - self.start[k]) * frac

    def cdf(self, x) -> np.ndarray:
        """Right-continuous distribution function ``F(x) = sup{t : F^-(t) <= x}``."""
        x = np.asarray(x, dtype=float)
        xs = x[..., None]
        b0, b1 = self.breakpoints[:-1], self.breakpoints[1:]
        width = self.end - self.start
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(width > 0, (xs - self.start) / np.where(width > 0, width, 1.0), 1.0)
        frac = np.clip(frac, 0.0, 1.0)
        # frac == 1 must give b1 exactly; b0 + (b1 - b0) can overshoot by an ulp
        level = np.where(frac >= 1.0, b1, b0 + frac * (b1 - b0))
        reached = np.where(xs >= self.start, level, 0.0)
        return reached.max(axis=-1)

    def mean(self) -> float:
        lengths = np.diff(self.breakpoints)
        return float(np.sum(lengths * 0.5 * (self.start + self.end)))

    def to_discrete(self) -> DiscreteMeasure:
        if not self.is_piecewise_constant:
            raise ValueError("only piecewise-constant quantile tables are discrete measures")
        return DiscreteMeasure(self.start[:, None], np.diff(self.breakpoints))

    def to_grid(self, domain: BoxDomain, shape, floor=None) -> GridDensity:
        """Histogram of the represented measure on a 1-D grid (cells ``(e_k, e_{k+1}]``)."""
        if domain.dim != 1:
            raise ValueError("quantile tables are one-dimensional")
        (n,) = _as_shape(shape, 1)
        edges = np.linspace(domain.lower[0], domain.upper[0], n + 1)
        cdf = self.cdf(edges)
        cdf[0] = 0.0
        cdf[-1] = 1.0
        masses = np.maximum(np.diff(cdf), 0.0)
        masses /= masses.sum()
        return GridDensity.from_masses(domain, masses, floor)


def quantile_table(measure: Measure | QuantileTable) -> QuantileTable:
    """Quantile function of a one-dimensional measure."""
    if isinstance(measure, QuantileTable):
        return measure
    if isinstance(measure, DiscreteMeasure):
        if measure.dim != 1:
            raise ValueError(f"quantile tables need d = 1, got d = {measure.dim}")
        order = np.argsort(measure.points[:, 0], kind="stable")
        x = measure.points[order, 0]
        w = measure.weights[order]
        keep = w > 0
        x, w = x[keep], w[keep]
        cum = np.cumsum(w) / w.sum()
        b = np.concatenate([[0.0], cum])
        b[-1] = 1.0
        # drop pieces that rounding collapsed to zero length
        ok = np.diff(b) > 0
        return QuantileTable(np.concatenate([[0.0], b[1:][ok]]), x[ok])
    if isinstance(measure, GridDensity):
        if measure.domain.dim != 1:
            raise ValueError(f"quantile tables need d = 1, got d = {measure.domain.dim}")
        edges = measure.edges()
        m = measure.masses()
        keep = m > 0
        cum = np.cumsum(m) / m.sum()
        b = np.concatenate([[0.0], cum[keep]])
        b[-1] = 1.0
        lo, hi = edges[:-1][keep], edges[1:][keep]
        ok = np.diff(b) > 0
        return QuantileTable(np.concatenate([[0.0], b[1:][ok]]), lo[ok], hi[ok])
    raise TypeError(f"cannot build a quantile table from {type(measure).__name__}")
