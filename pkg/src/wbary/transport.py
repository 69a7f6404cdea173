"""Exact quadratic optimal transport between discrete measures.

Every solve returns a :class:`TransportCertificate`: an optimal basic plan
together with Kantorovich potentials read off the optimal basis. One
dimensional problems use the monotone (staircase) basis directly; higher
dimensions go through a network simplex.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .constants import DUAL_FEASIBILITY_TOL, DUALITY_GAP_TOL, PLAN_MARGINAL_TOL
from .measures import DiscreteMeasure, GridDensity, QuantileTable, grid_to_discrete, quantile_table


@dataclass(frozen=True, eq=False)
class TransportCertificate:
    """Optimal plan and dual potentials for ``W_2^2(mu, nu)``.

    ``phi`` lives on the atoms of ``mu`` and is normalised to have zero
    ``mu``-mean; ``psi`` lives on the atoms of ``nu``.
    """

    cost: float
    plan: np.ndarray
    phi: np.ndarray
    psi: np.ndarray

    def dual_value(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(a @ self.phi + b @ self.psi)

    def transposed(self) -> "TransportCertificate":
        return TransportCertificate(self.cost, self.plan.T, self.psi, self.phi)


def sq_distances(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[1] == 1:
        return (x[:, :1] - y[:, 0][None, :]) ** 2
    d = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * x @ y.T
    return np.maximum(d, 0.0)


def c_transform(phi, support, query) -> np.ndarray:
    """``phi^c(x) = min_y |x - y|^2 - phi(y)`` for every query point ``x``.

    ``phi`` is given on ``support`` (``Y``); the result lives on ``query``.
    """
    support = np.asarray(support, dtype=float)
    query = np.asarray(query, dtype=float)
    if support.ndim == 1:
        support = support[:, None]
    if query.ndim == 1:
        query = query[:, None]
    cost = sq_distances(query, support)
    return np.min(cost - np.asarray(phi, dtype=float)[None, :], axis=1)


def _path_duals(x, y, row_step):
    """Complementary potentials along a monotone path given by its step kinds."""
    rows = np.concatenate([[0], np.cumsum(row_step)])
    cols = np.concatenate([[0], np.cumsum(~row_step)])
    c = (x[rows] - y[cols]) ** 2
    # phi_{i_t} + psi_{j_t} = c_t along the path; phi only moves on row steps
    inc = np.where(row_step, np.diff(c), 0.0)
    u = np.concatenate([[0.0], np.cumsum(inc)])
    first_row = np.concatenate([[0], np.flatnonzero(row_step) + 1])
    first_col = np.concatenate([[0], np.flatnonzero(~row_step) + 1])
    return rows, cols, c, u[first_row], c[first_col] - u[first_col]


def staircase_1d(x, a, y, b, tie_tol: float = 0.0):
    """Monotone optimal basis for sorted 1-D supports.

    Returns ``(cost, rows, cols, flow, phi, psi)`` where ``rows/cols/flow``
    list the ``m + n - 1`` basic cells of the north-west corner staircase.
    For the convex cost ``(x - y)^2`` every monotone path gives dual feasible
    complementary potentials. Where a source and a target cumulative weight
    lie within ``tie_tol`` of each other the potentials are averaged over the
    two orders of that pair: exact for ``tie_tol = 0``, an approximate
    (``tie_tol``-optimal) dual otherwise. ``phi`` is not yet normalised.
    """
    m, n = a.shape[0], b.shape[0]
    pos = np.concatenate([np.cumsum(a[:-1]), np.cumsum(b[:-1])])
    kind = np.concatenate([np.zeros(m - 1, dtype=np.int8), np.ones(n - 1, dtype=np.int8)])
    order = np.lexsort((kind, pos))
    row_step = kind[order] == 0
    total = 0.5 * (a.sum() + b.sum())
    flow = np.diff(np.concatenate([[0.0], pos[order], [total]]))
    np.maximum(flow, 0.0, out=flow)
    rows, cols, c, phi, psi = _path_duals(x, y, row_step)
    cost = float(flow @ c)
    is_row = kind == 0
    early = kind[np.lexsort((kind, pos - tie_tol * is_row))] == 0
    late = kind[np.lexsort((-kind, pos + tie_tol * is_row))] == 0
    if not np.array_equal(early, late):
        if not np.array_equal(early, row_step):
            phi, psi = _path_duals(x, y, early)[3:]
        phi_late, psi_late = _path_duals(x, y, late)[3:]
        phi = 0.5 * (phi + phi_late)
        psi = 0.5 * (psi + psi_late)
    return cost, rows, cols, flow, phi, psi


def matched_brackets(a, y, b, tol: float = 0.0):
    """Range of target atoms a monotone plan can match across each source boundary.

    For sorted 1-D supports, boundary ``l`` separates source atoms ``l`` and
    ``l + 1`` at cumulative source mass ``C_l``. Returns ``(lo, hi)`` of length
    ``m - 1`` with ``lo = F^-(C_l - tol)`` and ``hi = F^-(C_l + tol)`` (right
    limit), ``F^-`` the target quantile function. With ``tol = 0`` they differ
    only where ``C_l`` equals a cumulative target weight.
    """
    levels = np.cumsum(b)[:-1]
    cum = np.cumsum(a)[:-1]
    return y[np.searchsorted(levels, cum - tol, "left")], y[np.searchsorted(levels, cum + tol, "right")]


def potential_from_matches(x, t) -> np.ndarray:
    """Source potential with increments ``(x_{l+1} - x_l)(x_l + x_{l+1} - 2 t_l)``.

    For a nondecreasing ``t`` with ``lo <= t <= hi`` (from
    :func:`matched_brackets` with ``tol = 0``) this is an optimal dual
    potential; ``phi[0] = 0``.
    """
    inc = np.diff(x) * (x[:-1] + x[1:] - 2.0 * np.asarray(t))
    return np.concatenate([[0.0], np.cumsum(inc)])


def _solve_1d(mu: DiscreteMeasure, nu: DiscreteMeasure):
    ox = np.argsort(mu.points[:, 0], kind="stable")
    oy = np.argsort(nu.points[:, 0], kind="stable")
    x, a = mu.points[ox, 0], mu.weights[ox]
    y, b = nu.points[oy, 0], nu.weights[oy]
    _, rows, cols, flow, phi_s, psi_s = staircase_1d(x, a, y, b)
    plan = np.zeros((mu.size, nu.size))
    np.add.at(plan, (ox[rows], oy[cols]), flow)
    phi = np.empty(mu.size)
    psi = np.empty(nu.size)
    phi[ox] = phi_s
    psi[oy] = psi_s
    return plan, phi, psi


def _load_pot():
    for key in (
        "POT_BACKEND_DISABLE_TENSORFLOW",
        "POT_BACKEND_DISABLE_PYTORCH",
        "POT_BACKEND_DISABLE_JAX",
        "POT_BACKEND_DISABLE_CUPY",
    ):
        os.environ.setdefault(key, "1")
    import ot

    return ot


def _solve_simplex(mu: DiscreteMeasure, nu: DiscreteMeasure, cost: np.ndarray):
    ot = _load_pot()
    a = np.ascontiguousarray(mu.weights, dtype=np.float64)
    b = np.ascontiguousarray(nu.weights, dtype=np.float64)
    b = b * (a.sum() / b.sum())
    plan, log = ot.emd(a, b, np.ascontiguousarray(cost), numItermax=10_000_000, log=True)
    if log.get("warning"):
        raise RuntimeError(f"network simplex did not reach optimality: {log['warning']}")
    return np.asarray(plan), np.asarray(log["u"], dtype=float), np.asarray(log["v"], dtype=float)


def w2_exact(mu: DiscreteMeasure, nu: DiscreteMeasure, method: str = "auto") -> TransportCertificate:
    """Exact ``W_2^2`` with an optimal plan and Kantorovich potentials.

    Parameters
    ----------
    mu, nu : DiscreteMeasure
        Source and target, same dimension.
    method : {"auto", "staircase", "simplex"}
        ``auto`` uses the monotone staircase basis in 1-D and the network
        simplex otherwise.
    """
    if isinstance(mu, GridDensity):
        mu = grid_to_discrete(mu)
    if isinstance(nu, GridDensity):
        nu = grid_to_discrete(nu)
    if mu.dim != nu.dim:
        raise ValueError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    if method == "auto":
        method = "staircase" if mu.dim == 1 else "simplex"
    cost = sq_distances(mu.points, nu.points)
    if method == "staircase":
        if mu.dim != 1:
            raise ValueError("the staircase basis is only optimal in one dimension")
        plan, phi, psi = _solve_1d(mu, nu)
    elif method == "simplex":
        plan, phi, psi = _solve_simplex(mu, nu, cost)
    else:
        raise ValueError(f"unknown method {method!r}")

    # c-transform polish: keeps the basis duals when they are already tight
    # and feasible, repairs round-off (and zero-mass atoms) otherwise
    phi = np.minimum(phi, np.min(cost - psi[None, :], axis=1))
    psi = np.min(cost - phi[:, None], axis=0)
    shift = float(mu.weights @ phi) / float(mu.weights.sum())
    phi = phi - shift
    psi = psi + shift
    value = float(np.sum(plan * cost))
    return TransportCertificate(value, plan, phi, psi)


def certificate_violations(cert: TransportCertificate, mu: DiscreteMeasure, nu: DiscreteMeasure) -> list[str]:
    """List every broken certificate invariant (empty when the certificate is sound)."""
    out = []
    cost = sq_distances(mu.points, nu.points)
    if np.any(cert.plan < -PLAN_MARGINAL_TOL):
        out.append("negative plan entries")
    if np.max(np.abs(cert.plan.sum(1) - mu.weights)) > PLAN_MARGINAL_TOL:
        out.append("row sums differ from source weights")
    if np.max(np.abs(cert.plan.sum(0) - nu.weights)) > PLAN_MARGINAL_TOL:
        out.append("column sums differ from target weights")
    slack = cost - cert.phi[:, None] - cert.psi[None, :]
    if slack.min() < -DUAL_FEASIBILITY_TOL:
        out.append(f"dual infeasible by {-slack.min():.3g}")
    gap = cert.cost - cert.dual_value(mu.weights, nu.weights)
    if abs(gap) > DUALITY_GAP_TOL:
        out.append(f"duality gap {gap:.3g}")
    if abs(np.sum(cert.plan * cost) - cert.cost) > DUALITY_GAP_TOL:
        out.append("reported cost differs from plan cost")
    return out


def _piece_ends(table: QuantileTable, lo: np.ndarray, hi: np.ndarray):
    b = table.breakpoints
    k = np.clip(np.searchsorted(b, 0.5 * (lo + hi), side="left") - 1, 0, b.size - 2)
    slope = (table.end[k] - table.start[k]) / (b[k + 1] - b[k])
    return table.start[k] + slope * (lo - b[k]), table.start[k] + slope * (hi - b[k])


def w2_1d(mu, nu) -> float:
    """``W_2^2`` on the line as the integral of the squared quantile gap.

    Both quantile functions are piecewise linear, so integrating over the
    merged breakpoints is exact.
    """
    for m in (mu, nu):
        dim = m.dim if isinstance(m, DiscreteMeasure) else m.domain.dim if isinstance(m, GridDensity) else 1
        if dim != 1:
            raise ValueError(f"w2_1d needs d = 1, got d = {dim}")
    qa, qb = quantile_table(mu), quantile_table(nu)
    t = np.union1d(qa.breakpoints, qb.breakpoints)
    lo, hi = t[:-1], t[1:]
    a0, a1 = _piece_ends(qa, lo, hi)
    b0, b1 = _piece_ends(qb, lo, hi)
    d0, d1 = a0 - b0, a1 - b1
    return float(np.sum((hi - lo) * (d0 * d0 + d0 * d1 + d1 * d1) / 3.0))


def pairwise_w2(nus, etas, pool=None) -> np.ndarray:
    """Matrix of ``W_2(nus[i], etas[j])`` (distances, not squared)."""
    pairs = list(itertools.product(range(len(nus)), range(len(etas))))
    mapper = map if pool is None else pool
    costs = list(mapper(lambda ij: w2_exact(nus[ij[0]], etas[ij[1]]).cost, pairs))
    return np.sqrt(np.maximum(np.array(costs), 0.0)).reshape(len(nus), len(etas))


def lexicographic_assignment(matrix: np.ndarray, rtol: float = 1e-12) -> tuple[float, tuple[int, ...]]:
    """Minimum-sum assignment, ties resolved towards the lexicographically smallest permutation."""
    matrix = np.asarray(matrix, dtype=float)
    n = matrix.shape[0]
    r, c = linear_sum_assignment(matrix)
    best = float(matrix[r, c].sum())
    slack = rtol * max(1.0, abs(best))
    perm: list[int] = []
    free = list(range(n))
    fixed = 0.0
    for i in range(n):
        for j in free:
            rest_cols = [k for k in free if k != j]
            rest = 0.0
            if rest_cols:
                sub = matrix[np.ix_(range(i + 1, n), rest_cols)]
                sr, sc = linear_sum_assignment(sub)
                rest = float(sub[sr, sc].sum())
            if fixed + matrix[i, j] + rest <= best + slack:
                perm.append(j)
                fixed += matrix[i, j]
                free.remove(j)
                break
        else:  # pragma: no cover - the optimal column always exists
            raise RuntimeError("assignment tie-breaking lost the optimum")
    value = float(sum(matrix[i, perm[i]] for i in range(n)))
    return value, tuple(perm)


def assignment_distance(nus, etas, pool=None) -> tuple[float, tuple[int, ...]]:
    """``(1/n) min_sigma sum_i W_2(nus[i], etas[sigma(i)])`` and an optimal ``sigma``."""
    if len(nus) != len(etas):
        raise ValueError(f"length mismatch: {len(nus)} vs {len(etas)}")
    if not nus:
        raise ValueError("need at least one measure")
    total, perm = lexicographic_assignment(pairwise_w2(nus, etas, pool))
    return total / len(nus), perm
