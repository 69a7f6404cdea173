"""Penalized Wasserstein barycenters on a grid.

The objective over grid densities ``f`` is

    J(f) = (1/n) sum_i W_2^2(f, nu_i) + gamma * E(f)

and is minimised by projected subgradient descent: the transport part of the
subgradient is the average of the Kantorovich potentials on the grid side,
the penalty part is ``gamma * grad E(f)``. Every iterate is projected back
onto ``{f >= floor, int f = 1}``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .constants import MAX_HALVINGS
from .measures import BoxDomain, DiscreteMeasure, GridDensity, QuantileTable, grid_centers, quantile_table
from .parallel import parallel_map
from .penalties import Penalty
from .transport import TransportCertificate, matched_brackets, potential_from_matches, staircase_1d, w2_exact

log = logging.getLogger(__name__)

# near-tie tolerances for the face-restricted step tried before declaring convergence
RIDGE_TOLS = (1e-9, 1e-6)
# cumulative-mass gap below which the public subgradient treats a kink as active
CENTRAL_TIE_TOL = 1e-7


@dataclass(frozen=True, eq=False)
class BarycenterProblem:
    measures: tuple[DiscreteMeasure, ...]
    gamma: float
    penalty: Penalty
    domain: BoxDomain
    shape: tuple[int, ...]

    def __post_init__(self):
        measures = tuple(self.measures)
        if not measures:
            raise ValueError("need at least one measure")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        shape = (int(self.shape),) * self.domain.dim if np.isscalar(self.shape) else tuple(int(s) for s in self.shape)
        if len(shape) != self.domain.dim:
            raise ValueError(f"grid shape {shape} does not match a {self.domain.dim}-d domain")
        for nu in measures:
            if nu.dim != self.domain.dim:
                raise ValueError(f"measure of dimension {nu.dim} on a {self.domain.dim}-d grid")
        object.__setattr__(self, "measures", measures)
        object.__setattr__(self, "shape", shape)

    @property
    def cell_volume(self) -> float:
        return self.domain.volume / float(np.prod(self.shape))

    @property
    def floor(self) -> float:
        return self.penalty.floor(self.domain)

    def uniform(self) -> GridDensity:
        return GridDensity.uniform(self.domain, self.shape, self.floor)


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 2000
    step_rule: str = "fixed"  # "fixed": step0; "decaying": step0 / sqrt(t)
    step0: float | None = None  # None -> squared diameter of the domain
    tol: float = 1e-7
    seed: int = 0
    init: str = "uniform"  # or "random" (Dirichlet draw from ``seed``)
    threads: int | None = 1

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if self.step_rule not in ("decaying", "fixed"):
            raise ValueError(f"unknown step rule {self.step_rule!r}")
        if self.step0 is not None and self.step0 <= 0:
            raise ValueError("step0 must be positive")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.init not in ("uniform", "random"):
            raise ValueError(f"unknown initialisation {self.init!r}")


@dataclass(eq=False)
class BarycenterSolution:
    density: GridDensity
    objective_trace: list[float]
    certificates: list[TransportCertificate] = field(repr=False)
    converged: bool
    iterations: int

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]


def project_simplex(values, floor: float, cell_volume: float, mass: float = 1.0) -> np.ndarray:
    """Euclidean projection onto ``{f : f >= floor, sum(f) * cell_volume = mass}``.

    Sort-based threshold search on the shifted variable ``f - floor``.
    """
    v = np.asarray(values, dtype=float)
    flat = v.ravel() - floor
    n = flat.size
    budget = (mass - floor * n * cell_volume) / cell_volume
    if budget < -1e-12 * n:
        raise ValueError(f"floor {floor:g} is infeasible: floor * |grid| * cell_volume > 1")
    if budget <= 0:
        return np.full(v.shape, float(floor))
    u = np.sort(flat)[::-1]
    css = np.cumsum(u) - budget
    ranks = np.arange(1, n + 1)
    rho = np.flatnonzero(u - css / ranks > 0)[-1]
    theta = css[rho] / (rho + 1)
    return (np.maximum(flat - theta, 0.0) + floor).reshape(v.shape)


class _Transport:
    """Per-measure transport from a grid-atom measure, shared by J and its subgradient."""

    def __init__(self, problem: BarycenterProblem, threads=1):
        self.problem = problem
        self.centers = grid_centers(problem.domain, problem.shape)
        self.threads = threads
        if problem.domain.dim == 1:
            self._targets = []
            for nu in problem.measures:
                order = np.argsort(nu.points[:, 0], kind="stable")
                self._targets.append((nu.points[order, 0], nu.weights[order]))

    def costs_and_potentials(self, masses: np.ndarray):
        """``(costs, potentials)``; each potential has zero mean under ``masses``."""
        if self.problem.domain.dim == 1:
            x = self.centers[:, 0]

            def one(target):
                cost, _, _, _, phi, _ = staircase_1d(x, masses, *target)
                return cost, phi - masses @ phi

            out = parallel_map(one, self._targets, self.threads)
        else:
            mu = DiscreteMeasure(self.centers, masses)

            def one(nu):
                cert = w2_exact(mu, nu)
                return cert.cost, cert.phi

            out = parallel_map(one, self.problem.measures, self.threads)
        costs = np.array([c for c, _ in out])
        phis = np.stack([p for _, p in out])
        return costs, phis

    def near_ties(self, masses: np.ndarray, tol: float) -> np.ndarray:
        """Cell boundaries (1-D) where the cumulative mass is within ``tol`` of a target's."""
        cum = np.cumsum(masses)[:-1]
        hit = np.zeros(cum.size, dtype=bool)
        for _, b in self._targets:
            levels = np.cumsum(b)[:-1]
            if levels.size == 0:
                continue
            k = np.searchsorted(levels, cum)
            right = levels[np.minimum(k, levels.size - 1)]
            left = levels[np.maximum(k - 1, 0)]
            hit |= np.minimum(np.abs(right - cum), np.abs(left - cum)) < tol
        return np.flatnonzero(hit) + 1

    def central(self, masses: np.ndarray, phis: np.ndarray, g_penalty, tol: float) -> np.ndarray:
        """Re-select the potentials at (near-)kinks so that their mean plus ``g_penalty`` is flattest.

        Across boundary ``l`` each target may match any atom in its bracket
        (see :func:`matched_brackets`). The average match is steered towards
        the value that zeroes the increment of the full subgradient, then
        every target takes the same relative position within its bracket.
        """
        x = self.centers[:, 0]
        pairs = [matched_brackets(masses, y, b, tol) for y, b in self._targets]
        lo = np.stack([p[0] for p in pairs])
        hi = np.stack([p[1] for p in pairs])
        open_ = hi > lo
        if not open_.any():
            return phis
        want = 0.5 * (x[:-1] + x[1:])
        if g_penalty is not None:
            want = want + np.diff(g_penalty.ravel()) / (2.0 * np.diff(x))
        lm, width = lo.mean(axis=0), hi.mean(axis=0) - lo.mean(axis=0)
        lam = np.where(width > 0, np.clip((want - lm) / np.where(width > 0, width, 1.0), 0.0, 1.0), 0.0)
        # overlapping brackets (near-empty cells) could break monotonicity
        t = np.maximum.accumulate(lo + lam * (hi - lo), axis=1)
        phis = phis.copy()
        for k in np.flatnonzero(open_.any(axis=1)):
            phi = potential_from_matches(x, t[k])
            phis[k] = phi - masses @ phi
        return phis

    def certificates(self, masses: np.ndarray) -> list[TransportCertificate]:
        mu = DiscreteMeasure(self.centers, masses)
        return parallel_map(lambda nu: w2_exact(mu, nu), self.problem.measures, self.threads)


class _Objective:
    """``J`` and its subgradient; a Sobolev term is split off for implicit steps."""

    def __init__(self, problem: BarycenterProblem, threads=1):
        self.problem = problem
        self.transport = _Transport(problem, threads)
        self.implicit = problem.gamma > 0 and problem.penalty.kind == "sobolev"
        self._factors: dict[float, object] = {}

    def density(self, values) -> GridDensity:
        p = self.problem
        return GridDensity(p.domain, np.asarray(values).reshape(p.shape), p.floor)

    def __call__(self, values) -> tuple[float, np.ndarray]:
        """``(J(f), subgradient at f)`` for a feasible value array."""
        value, g, g_sobolev = self.split(values)
        return value, g if g_sobolev is None else g + g_sobolev

    def split(self, values, tie_tol: float | None = 0.0):
        """``(J(f), explicit part of the subgradient, Sobolev part or None)``.

        In 1-D the transport potentials are re-selected at kinks within
        ``tie_tol`` of the iterate (``None`` keeps the basis potentials).
        """
        p = self.problem
        f = self.density(values)
        masses = f.values.ravel() * p.cell_volume
        costs, phis = self.transport.costs_and_potentials(masses)
        value = float(costs.mean())
        g_full = g_base = None
        if p.gamma > 0:
            value += p.gamma * p.penalty.evaluate(f)
            g_full = p.gamma * p.penalty.grad(f)
            if self.implicit:
                g_base = p.gamma * Penalty(p.penalty.base, p.penalty.alpha).grad(f)
        if tie_tol is not None and p.domain.dim == 1:
            phis = self.transport.central(masses, phis, g_full, tie_tol)
        g = phis.mean(axis=0).reshape(p.shape)
        if g_full is None:
            return value, g, None
        if self.implicit:
            return value, g + g_base, g_full - g_base
        return value, g + g_full, None

    def step(self, f: np.ndarray, g_explicit: np.ndarray, step: float, cuts=None) -> np.ndarray:
        """Projected step; the Sobolev quadratic, if any, is taken implicitly.

        With ``A = I + 2 step gamma S`` the implicit step solves ``A w = f - step g``.
        ``A`` maps constants to constants, so projecting ``w`` afterwards gives
        the mass-constrained proximal point whenever the floor is inactive.
        With ``cuts`` (flat cell indices, 1-D) every block between cuts keeps
        its current mass, i.e. the step stays on the face where those
        cumulative masses are fixed.
        """
        p = self.problem
        v = f - step * g_explicit
        if self.implicit:
            lu = self._factors.get(step)
            if lu is None:
                op = p.penalty._operator(self.density(f))
                a = sp.identity(op.shape[0], format="csc") + (2.0 * step * p.gamma) * op.tocsc()
                lu = self._factors[step] = splu(a.tocsc())
            v = lu.solve(v.ravel()).reshape(v.shape)
        if cuts is None or len(cuts) == 0:
            return project_simplex(v, p.floor, p.cell_volume)
        cv = p.cell_volume
        out = np.empty(v.size)
        bounds = np.concatenate([[0], cuts, [v.size]])
        flat_f, flat_v = f.ravel(), v.ravel()
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            out[lo:hi] = project_simplex(flat_v[lo:hi], p.floor, cv, flat_f[lo:hi].sum() * cv)
        return out.reshape(v.shape)


def objective(problem: BarycenterProblem, f: GridDensity) -> float:
    """``J(f) = (1/n) sum_i W_2^2(f, nu_i) + gamma E(f)``."""
    return _Objective(problem)(f.values)[0]


def subgradient(problem: BarycenterProblem, f: GridDensity, threads=1, tie_tol: float = CENTRAL_TIE_TOL) -> np.ndarray:
    """``(1/n) sum_i phi_i + gamma grad E(f)`` as a grid function.

    On the line the potentials are chosen, among the optimal ones at kinks
    closer than ``tie_tol`` in cumulative mass, so that the result is as flat
    as possible; at an interior minimiser it is then nearly constant.
    """
    if problem.gamma > 0:
        problem.penalty._check(f)
    value, g, g_sobolev = _Objective(problem, threads).split(f.values, tie_tol)
    return g if g_sobolev is None else g + g_sobolev


def initial_density(problem: BarycenterProblem, config: SolverConfig) -> GridDensity:
    if config.init == "uniform":
        return problem.uniform()
    rng = np.random.default_rng(config.seed)
    n = int(np.prod(problem.shape))
    masses = rng.dirichlet(np.ones(n))
    values = project_simplex(masses / problem.cell_volume, problem.floor, problem.cell_volume)
    return GridDensity(problem.domain, values.reshape(problem.shape), problem.floor)


def _line_search(fun: _Objective, f, value, g, step, cuts=None):
    """``(f', J(f'), g')`` for the first halving of ``step`` that lowers ``J``, or ``None``."""
    for _ in range(MAX_HALVINGS + 1):
        cand = fun.step(f, g, step, cuts)
        cand_value, cand_g, _ = fun.split(cand)
        if cand_value < value:
            return cand, cand_value, cand_g
        step *= 0.5
    return None


def solve(problem: BarycenterProblem, config: SolverConfig = SolverConfig(), init: GridDensity | None = None) -> BarycenterSolution:
    """Minimise the penalized barycenter objective by projected subgradient descent.

    Each iteration tries ``f - s g`` projected back to the feasible set and
    halves ``s`` (at most ``MAX_HALVINGS`` times) until the objective drops.
    The loop stops once both the decrease of ``J`` and the L1 movement of the
    iterate fall below ``config.tol``, or when no halving yields a decrease.

    On the line the transport term has kinks where cumulative masses of the
    iterate and of a target coincide, and iterates can creep towards such a
    ridge with ever smaller steps. Before accepting either stopping test in
    1-D the step is retried on the face that freezes the cumulative masses
    within :data:`RIDGE_TOLS` of a target's; there the objective is smooth.

    Parameters
    ----------
    problem : BarycenterProblem
        Input measures, ``gamma > 0``, penalty and grid.
    config : SolverConfig
        Iteration budget, step rule, tolerance and initialisation.
    init : GridDensity, optional
        Starting density; overrides ``config.init``.
    """
    if problem.gamma <= 0:
        raise ValueError("solve needs gamma > 0; use barycenter_1d_exact for gamma = 0")
    fun = _Objective(problem, config.threads)
    cv = problem.cell_volume
    f = (init if init is not None else initial_density(problem, config)).values
    f = project_simplex(f, problem.floor, cv)
    value, g, _ = fun.split(f)
    trace = [value]
    step0 = config.step0 if config.step0 is not None else problem.domain.diameter ** 2

    def small(found):
        return found is None or (value - found[1] < config.tol and float(np.abs(found[0] - f).sum() * cv) < config.tol)

    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        step = step0 / np.sqrt(it) if config.step_rule == "decaying" else step0
        found = _line_search(fun, f, value, g, step)
        if small(found) and problem.domain.dim == 1:
            masses = f.ravel() * cv
            tried = None
            for tie_tol in RIDGE_TOLS:
                cuts = fun.transport.near_ties(masses, tie_tol)
                if cuts.size == 0 or (tried is not None and np.array_equal(cuts, tried)):
                    continue
                tried = cuts
                alt = _line_search(fun, f, value, g, step, cuts)
                if alt is not None and (found is None or alt[1] < found[1]):
                    found = alt
                if not small(found):
                    break
        if found is None:
            # no decrease along any tried direction: numerically stationary
            converged = True
            break
        cand, cand_value, cand_g = found
        decrease = value - cand_value
        movement = float(np.abs(cand - f).sum() * cv)
        f, value, g = cand, cand_value, cand_g
        trace.append(value)
        if decrease < config.tol and movement < config.tol:
            converged = True
            break
    log.debug("solve: %d iterations, J=%.12g, converged=%s", it, value, converged)
    density = GridDensity(problem.domain, f.reshape(problem.shape), problem.floor)
    certs = fun.transport.certificates(density.masses().ravel())
    return BarycenterSolution(density, trace, certs, converged, it)


def solve_multistart(problem: BarycenterProblem, config: SolverConfig, starts: int = 5) -> list[BarycenterSolution]:
    """Solutions from the uniform start and ``starts - 1`` random starts."""
    configs = [replace(config, init="uniform")]
    configs += [replace(config, init="random", seed=config.seed + s) for s in range(1, starts)]
    return [solve(problem, c) for c in configs]


def barycenter_1d_exact(measures: Sequence) -> QuantileTable:
    """Unpenalized barycenter on the line: the pointwise mean of quantile functions."""
    tables = [quantile_table(m) for m in measures]
    if not tables:
        raise ValueError("need at least one measure")
    t = tables[0].breakpoints
    for q in tables[1:]:
        t = np.union1d(t, q.breakpoints)
    lo, hi = t[:-1], t[1:]
    start = np.zeros(lo.size)
    end = np.zeros(lo.size)
    for q in tables:
        b = q.breakpoints
        k = np.clip(np.searchsorted(b, 0.5 * (lo + hi), side="left") - 1, 0, b.size - 2)
        slope = (q.end[k] - q.start[k]) / (b[k + 1] - b[k])
        start += q.start[k] + slope * (lo - b[k])
        end += q.start[k] + slope * (hi - b[k])
    start /= len(tables)
    end /= len(tables)
    # guard the monotonicity invariant against round-off between pieces
    end = np.maximum(end, start)
    start[1:] = np.maximum(start[1:], end[:-1])
    end = np.maximum(end, start)
    return QuantileTable(t, start, end)
