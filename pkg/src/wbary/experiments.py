"""Monte-Carlo harness for stability, variance, bias and error decomposition.

Every random draw comes from a generator seeded by ``(seed, *job indices)``
so each report row can be regenerated on its own and parallel execution
does not change results.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import ndtr
from scipy.stats import linregress

from .measures import BoxDomain, DiscreteMeasure, GridDensity, grid_to_discrete, quantile_table
from .parallel import process_map
from .penalties import Penalty, bregman_nonsym, bregman_sym
from .solver import BarycenterProblem, SolverConfig, barycenter_1d_exact, solve
from .transport import assignment_distance, w2_1d

REFERENCE_STREAM = 2**31 - 1


def rng_for(seed: int, *indices: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(i) for i in indices]]))


@dataclass(frozen=True)
class RandomMeasureModel:
    """Random truncated Gaussians on a box, mixed with a little uniform mass.

    A draw shifts the centre by ``U[-shift, shift]`` per axis and rescales
    the standard deviation by ``exp(U[log_scale_lo, log_scale_hi])``. The
    uniform component ``mix`` keeps every density bounded away from zero.
    """

    domain: BoxDomain = field(default_factory=lambda: BoxDomain.unit(1))
    shape: int = 128
    center: float = 0.5
    scale: float = 0.12
    shift: float = 0.1
    log_scale_lo: float = math.log(0.75)
    log_scale_hi: float = math.log(1.25)
    mix: float = 0.05
    seed: int = 0

    @property
    def grid_shape(self) -> tuple[int, ...]:
        return (self.shape,) * self.domain.dim

    @property
    def cell_width(self) -> float:
        return float(np.max((self.domain.upper - self.domain.lower) / self.shape))

    def draw_parameters(self, rng: np.random.Generator) -> tuple[np.ndarray, float]:
        shift = rng.uniform(-self.shift, self.shift, size=self.domain.dim)
        log_scale = rng.uniform(self.log_scale_lo, self.log_scale_hi)
        return shift, log_scale

    def density(self, shift, log_scale: float) -> GridDensity:
        sd = self.scale * math.exp(log_scale)
        masses = np.ones(())
        for axis in range(self.domain.dim):
            lo, hi = self.domain.lower[axis], self.domain.upper[axis]
            edges = np.linspace(lo, hi, self.shape + 1)
            centre = lo + self.center * (hi - lo) + np.atleast_1d(shift)[axis]
            m = np.diff(ndtr((edges - centre) / sd))
            masses = np.multiply.outer(masses, m / m.sum())
        masses = (1.0 - self.mix) * masses + self.mix / masses.size
        return GridDensity.from_masses(self.domain, masses / masses.sum())

    def sample(self, rng: np.random.Generator) -> GridDensity:
        return self.density(*self.draw_parameters(rng))

    def sample_many(self, n: int, rng: np.random.Generator) -> list[GridDensity]:
        return [self.sample(rng) for _ in range(n)]


def sample_empirical(nu: GridDensity, p: int, seed) -> DiscreteMeasure:
    """``p`` iid draws from a grid density, each with weight ``1/p``.

    Coordinates are drawn one axis at a time by inverse-CDF sampling of the
    marginal, then of the conditional density given the cells already
    chosen; within a cell the density is flat.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dim = nu.domain.dim
    u = rng.random((p, dim))
    if dim == 1:
        return DiscreteMeasure(quantile_table(nu)(u[:, 0])[:, None], np.full(p, 1.0 / p))
    masses = nu.masses()
    points = np.empty((p, dim))
    widths = nu.cell_widths
    for j in range(p):
        block = masses
        for axis in range(dim):
            marginal = block.reshape(block.shape[0], -1).sum(axis=1)
            cum = np.cumsum(marginal)
            target = u[j, axis] * cum[-1]
            k = min(int(np.searchsorted(cum, target, side="left")), marginal.size - 1)
            while marginal[k] <= 0:  # skip empty cells hit by round-off
                k -= 1
            before = cum[k] - marginal[k]
            frac = min(max((target - before) / marginal[k], 0.0), 1.0)
            points[j, axis] = nu.domain.lower[axis] + (k + frac) * widths[axis]
            block = block[k]
    return DiscreteMeasure(points, np.full(p, 1.0 / p))


def k_functional(nu: GridDensity) -> float:
    """``int F (1 - F) / f`` for a 1-D grid density, integrated exactly cell by cell."""
    if nu.domain.dim != 1:
        raise ValueError("K is defined for one-dimensional densities")
    m = nu.masses()
    cum = np.cumsum(m) / m.sum()
    a = np.concatenate([[0.0], cum[:-1]])
    b = cum
    # F is linear from a to b on the cell: mean of F(1-F) over the cell
    mean_ff = 0.5 * (a + b) - (a * a + a * b + b * b) / 3.0
    f = nu.values
    empty = f <= 0
    if np.any(empty & (mean_ff > 0)):
        return math.inf
    h = float(nu.cell_widths[0])
    return float(np.sum(np.where(empty, 0.0, h * mean_ff / np.where(empty, 1.0, f))))


@dataclass
class ExperimentReport:
    """Long-format results plus fitted slopes and pass/fail checks."""

    experiment: str
    rows: list[tuple] = field(default_factory=list)
    slopes: dict[str, tuple[float, float]] = field(default_factory=dict)
    checks: dict[str, bool] = field(default_factory=dict)

    COLUMNS = ("experiment", "n", "p", "gamma", "replicate", "metric", "value")

    def add(self, n, p, gamma, replicate, metric, value):
        self.rows.append((self.experiment, int(n), int(p), float(gamma), int(replicate), metric, float(value)))

    def values(self, metric: str, **where) -> list[float]:
        idx = {c: i for i, c in enumerate(self.COLUMNS)}
        out = []
        for r in self.rows:
            if r[idx["metric"]] == metric and all(r[idx[k]] == v for k, v in where.items()):
                out.append(r[idx["value"]])
        return out

    def fit_slope(self, name: str, x, y) -> tuple[float, float]:
        fit = linregress(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)))
        self.slopes[name] = (float(fit.slope), float(fit.stderr))
        self.add(0, 0, 0.0, -1, f"{name}_slope", fit.slope)
        self.add(0, 0, 0.0, -1, f"{name}_slope_stderr", fit.stderr)
        return self.slopes[name]

    def check(self, name: str, ok: bool) -> bool:
        self.checks[name] = bool(ok)
        self.add(0, 0, 0.0, -1, f"check:{name}", 1.0 if ok else 0.0)
        return bool(ok)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([r[0], r[1], r[2], f"{r[3]:.17g}", r[4], r[5], f"{r[6]:.17g}"])
        return buf.getvalue()


def _problem(measures, gamma, penalty, domain, shape) -> BarycenterProblem:
    discrete = [grid_to_discrete(m) if isinstance(m, GridDensity) else m for m in measures]
    return BarycenterProblem(discrete, gamma, penalty, domain, shape)


def _solve_density(measures, gamma, penalty, domain, shape, config) -> GridDensity:
    return solve(_problem(measures, gamma, penalty, domain, shape), config).density


def check_stability(nus, etas, gamma, penalty, domain, shape, config: SolverConfig):
    """Compare both solved barycenters against the transport bound.

    Returns ``(lhs, rhs, holds)`` with ``lhs`` the symmetric Bregman
    divergence between the barycenters of ``nus`` and ``etas`` and ``rhs``
    ``2/gamma`` times the assignment distance between the two collections.
    """
    if gamma <= 0:
        raise ValueError("the stability bound needs gamma > 0")
    nus_d = [grid_to_discrete(m) if isinstance(m, GridDensity) else m for m in nus]
    etas_d = [grid_to_discrete(m) if isinstance(m, GridDensity) else m for m in etas]
    f = _solve_density(nus_d, gamma, penalty, domain, shape, config)
    g = _solve_density(etas_d, gamma, penalty, domain, shape, config)
    lhs = bregman_sym(penalty, f, g)
    value, _ = assignment_distance(nus_d, etas_d)
    rhs = 2.0 / gamma * value
    return lhs, rhs, lhs <= rhs + 10.0 * config.tol


def _perturbed(model: RandomMeasureModel, params, scale: float, rng) -> GridDensity:
    shift, log_scale = params
    shift = np.asarray(shift) + scale * model.shift * rng.uniform(-1, 1, size=np.shape(shift))
    log_scale = log_scale + scale * (model.log_scale_hi - model.log_scale_lo) * rng.uniform(-1, 1)
    return model.density(shift, log_scale)


def _stability_job(args):
    model, n, scale, instance, gamma, penalty, config, seed = args
    rng = rng_for(seed, instance)
    params = [model.draw_parameters(rng) for _ in range(n)]
    nus = [model.density(*pr) for pr in params]
    etas = [_perturbed(model, pr, scale, rng) for pr in params]
    order = rng.permutation(n)
    etas = [etas[k] for k in order]
    lhs, rhs, holds = check_stability(nus, etas, gamma, penalty, model.domain, model.grid_shape, config)
    return scale, instance, lhs, rhs, holds


def run_stability(model, gamma, penalty, config, n=8, instances=100, scales=(1e-3, 1e-2, 1e-1), workers=1):
    """Randomised stability-bound checks; perturbation scales are cycled over instances."""
    report = ExperimentReport("stability")
    jobs = [(model, n, scales[i % len(scales)], i, gamma, penalty, config, model.seed) for i in range(instances)]
    held = 0
    for scale, i, lhs, rhs, holds in process_map(_stability_job, jobs, workers):
        report.add(n, 0, gamma, i, "perturbation", scale)
        report.add(n, 0, gamma, i, "lhs", lhs)
        report.add(n, 0, gamma, i, "rhs", rhs)
        report.add(n, 0, gamma, i, "holds", 1.0 if holds else 0.0)
        held += holds
    report.add(n, 0, gamma, -1, "fraction_holds", held / instances)
    report.check("bound_holds_all", held == instances)
    return report


def _reference(model, gamma, penalty, n_ref, config, seed):
    """Large-sample proxies: penalized barycenter and exact unpenalized barycenter."""
    sample = model.sample_many(n_ref, rng_for(seed, REFERENCE_STREAM))
    penalized = _solve_density(sample, gamma, penalty, model.domain, model.grid_shape, config) if gamma else None
    table = barycenter_1d_exact(sample) if model.domain.dim == 1 else None
    return sample, penalized, table


def _variance_job(args):
    model, gamma, penalty, config, n, rep, seed, ref = args
    measures = model.sample_many(n, rng_for(seed, n, rep))
    f = _solve_density(measures, gamma, penalty, model.domain, model.grid_shape, config)
    return n, rep, bregman_sym(penalty, f, ref)


def rate_variance(model, gamma, penalty, n_list=(4, 8, 16, 32, 64), replicates=50, config=SolverConfig(), workers=1):
    """Mean squared Bregman distance between empirical and (proxy) population barycenters vs ``n``."""
    if model.domain.dim != 1 and not (penalty.kind == "sobolev" and penalty.k > model.domain.dim - 1):
        raise ValueError("variance rates need d = 1 or a Sobolev penalty with k > d - 1")
    report = ExperimentReport("rate-variance")
    n_ref = 10 * max(n_list)
    _, ref, _ = _reference(model, gamma, penalty, n_ref, config, model.seed)
    jobs = [(model, gamma, penalty, config, n, r, model.seed, ref) for n in n_list for r in range(replicates)]
    per_n: dict[int, list[float]] = {n: [] for n in n_list}
    for n, rep, d in process_map(_variance_job, jobs, workers):
        report.add(n, 0, gamma, rep, "d_E", d)
        report.add(n, 0, gamma, rep, "d_E_sq", d * d)
        per_n[n].append(d)
    mean_sq, mean_d = [], []
    for n in n_list:
        d = np.array(per_n[n])
        mean_sq.append(float(np.mean(d * d)))
        mean_d.append(float(np.mean(d)))
        report.add(n, 0, gamma, -1, "mean_d_E_sq", mean_sq[-1])
        report.add(n, 0, gamma, -1, "mean_d_E", mean_d[-1])
    report.add(n_ref, 0, gamma, -1, "n_ref", n_ref)
    slope, _ = report.fit_slope("mean_d_E_sq_vs_n", n_list, mean_sq)
    report.fit_slope("mean_d_E_vs_n", n_list, mean_d)
    report.check("variance_slope_in_bracket", -1.35 <= slope <= -0.65)
    return report


def _bias_job(args):
    model, gamma, penalty, config, sample, table, f0 = args
    f = _solve_density(sample, gamma, penalty, model.domain, model.grid_shape, config)
    w2 = math.sqrt(w2_1d(f, table))
    return gamma, w2, bregman_nonsym(penalty, f, f0), penalty.evaluate(f)


def rate_bias(model, gamma_list=(1.0, 0.3, 0.1, 0.03, 0.01), penalty=None, config=SolverConfig(), n_ref=640, workers=1):
    """Distance from the penalized to the unpenalized population barycenter along decreasing ``gamma``."""
    if model.domain.dim != 1:
        raise ValueError("the bias experiment needs the exact 1-D unpenalized barycenter")
    penalty = penalty or Penalty.entropy()
    report = ExperimentReport("rate-bias")
    sample, _, table = _reference(model, 0.0, penalty, n_ref, config, model.seed)
    f0 = table.to_grid(model.domain, model.shape, penalty.floor(model.domain))
    e0 = penalty.evaluate(f0)
    gammas = sorted(gamma_list, reverse=True)
    jobs = [(model, g, penalty, config, sample, table, f0) for g in gammas]
    results = process_map(_bias_job, jobs, workers)
    report.add(n_ref, 0, 0.0, -1, "E_unpenalized", e0)
    w2s, des = [], []
    e_ok = True
    for g, w2, de, e in results:
        report.add(n_ref, 0, g, -1, "W2", w2)
        report.add(n_ref, 0, g, -1, "D_E", de)
        report.add(n_ref, 0, g, -1, "E", e)
        w2s.append(w2)
        des.append(de)
        e_ok &= e <= e0
    noise = 10.0 * config.tol
    report.check("W2_decreasing", all(b <= a + noise for a, b in zip(w2s, w2s[1:])))
    report.check("D_E_decreasing", all(b <= a + noise for a, b in zip(des, des[1:])))
    report.check("W2_below_3_cells", w2s[-1] <= 3.0 * model.cell_width)
    report.check("E_below_unpenalized", e_ok)
    return report


def _decompose_job(args):
    model, n, p_list, gamma, penalty, config, rep, seed, ref, f0 = args
    rng = rng_for(seed, n, rep)
    nus = model.sample_many(n, rng)
    f_n = _solve_density(nus, gamma, penalty, model.domain, model.grid_shape, config)
    var = bregman_sym(penalty, f_n, ref) ** 2
    k_mean = float(np.mean([k_functional(nu) for nu in nus])) if model.domain.dim == 1 else math.nan
    out = []
    for j, p in enumerate(p_list):
        prng = rng_for(seed, n, rep, p, j)
        emp = [sample_empirical(nu, p, prng) for nu in nus]
        f_hat = _solve_density(emp, gamma, penalty, model.domain, model.grid_shape, config)
        stab = bregman_sym(penalty, f_hat, f_n)
        diff = f_hat.values - f0.values
        total = float(np.sum(diff * diff) * f0.cell_volume)
        out.append((p, stab, total))
    return rep, var, k_mean, out


def decompose_error(model, n=16, p_list=(25, 100, 400), gamma=0.1, penalty=None, replicates=50, config=SolverConfig(), n_ref=None, workers=1):
    """Estimate stability, variance and bias terms of the L2 error separately.

    ``penalty`` defaults to a first-order Sobolev penalty on top of the
    quadratic one.
    """
    penalty = penalty or Penalty.sobolev(k=1, base="quadratic")
    if not (penalty.kind == "sobolev" and penalty.base == "quadratic"):
        raise ValueError("the decomposition needs the quadratic-plus-Sobolev penalty")
    if model.domain.dim != 1:
        raise ValueError("the decomposition needs the exact 1-D unpenalized barycenter")
    report = ExperimentReport("decompose")
    n_ref = n_ref or 10 * n
    _, ref, table = _reference(model, gamma, penalty, n_ref, config, model.seed)
    f0 = table.to_grid(model.domain, model.shape)
    bias = bregman_nonsym(penalty, ref, f0)
    report.add(n_ref, 0, gamma, -1, "bias", bias)
    jobs = [(model, n, tuple(p_list), gamma, penalty, config, r, model.seed, ref, f0) for r in range(replicates)]
    stab = {p: [] for p in p_list}
    stab_d = {p: [] for p in p_list}
    total = {p: [] for p in p_list}
    var, kvals = [], []
    for rep, v, k_mean, per_p in process_map(_decompose_job, jobs, workers):
        var.append(v)
        kvals.append(k_mean)
        report.add(n, 0, gamma, rep, "variance", v)
        report.add(n, 0, gamma, rep, "mean_K", k_mean)
        for p, d, t in per_p:
            stab[p].append(d * d)
            stab_d[p].append(d)
            total[p].append(t)
            report.add(n, p, gamma, rep, "stability_d_E", d)
            report.add(n, p, gamma, rep, "stability", d * d)
            report.add(n, p, gamma, rep, "total_L2_sq", t)
    var_mean = float(np.mean(var))
    k_bar = float(np.mean(kvals))
    report.add(n, 0, gamma, -1, "mean_variance", var_mean)
    stab_means, stab_d_means = [], []
    ok_decomp, ok_bound = True, True
    for p in p_list:
        s, t = float(np.mean(stab[p])), float(np.mean(total[p]))
        stab_means.append(s)
        stab_d_means.append(float(np.mean(stab_d[p])))
        report.add(n, p, gamma, -1, "mean_stability_d_E", stab_d_means[-1])
        rhs = 3.0 * math.sqrt(s) + 3.0 * math.sqrt(var_mean) + 6.0 * bias
        bound = 8.0 / gamma**2 * k_bar / p
        report.add(n, p, gamma, -1, "mean_stability", s)
        report.add(n, p, gamma, -1, "mean_total_L2_sq", t)
        report.add(n, p, gamma, -1, "decomposition_rhs", rhs)
        report.add(n, p, gamma, -1, "stability_bound_1d", bound)
        ok_decomp &= t <= rhs
        ok_bound &= s <= bound
    slope, _ = report.fit_slope("mean_stability_vs_p", p_list, stab_means)
    report.fit_slope("mean_stability_d_E_vs_p", p_list, stab_d_means)
    report.check("terms_nonnegative", min(stab_means) >= 0 and var_mean >= 0 and bias >= -1e-12)
    report.check("decomposition_holds", ok_decomp)
    report.check("stability_below_1d_bound", ok_bound)
    report.check("stability_slope_in_bracket", -1.4 <= slope <= -0.6)
    return report
