import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_density, random_discrete
from wbary.measures import BoxDomain, DiscreteMeasure, GridDensity, grid_to_discrete, quantile_table, validate
from wbary.penalties import Penalty, bregman_sym
from wbary.solver import (
    BarycenterProblem,
    SolverConfig,
    barycenter_1d_exact,
    objective,
    project_simplex,
    solve,
    subgradient,
)
from wbary.transport import w2_1d

UNIT = BoxDomain.unit(1)


def brute_projection(v, floor, cv):
    """Enumerate active sets of the floor constraint and keep the best KKT point."""
    n = v.size
    best, best_dist = None, np.inf
    for r in range(n):
        for active in itertools.combinations(range(n), r):
            free = np.setdiff1d(np.arange(n), active)
            x = np.full(n, floor)
            shift = (1.0 / cv - floor * len(active) - v[free].sum()) / len(free)
            x[free] = v[free] + shift
            if np.all(x >= floor - 1e-12):
                d = np.sum((x - v) ** 2)
                if d < best_dist:
                    best, best_dist = x, d
    return best


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2**32 - 1), st.sampled_from([0.0, 0.05, 0.3]))
def test_projection_matches_active_set_oracle(n, seed, floor):
    rng = np.random.default_rng(seed)
    cv = 1.0 / n
    v = rng.normal(scale=2.0, size=n)
    np.testing.assert_allclose(project_simplex(v, floor, cv), brute_projection(v, floor, cv), atol=1e-10)


def test_projection_of_feasible_point_is_identity(rng):
    f = random_density(rng, 16)
    np.testing.assert_allclose(project_simplex(f.values, 0.1, f.cell_volume), f.values, atol=1e-14)


def test_projection_of_constant_is_uniform():
    np.testing.assert_allclose(project_simplex(np.full(8, 7.0), 0.0, 0.125), 1.0)


def test_projection_infeasible_floor():
    with pytest.raises(ValueError):
        project_simplex(np.ones(4), 2.0, 0.25)
    np.testing.assert_allclose(project_simplex(np.arange(4.0), 1.0, 0.25), 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 200), st.integers(0, 2**32 - 1))
def test_projection_is_feasible(n, seed):
    rng = np.random.default_rng(seed)
    floor = 0.5 * rng.random() / n
    out = project_simplex(rng.normal(size=n) * 10, floor, 1.0 / n)
    assert out.min() >= floor
    assert abs(out.sum() / n - 1.0) < 1e-12


def test_problem_validation():
    with pytest.raises(ValueError):
        BarycenterProblem((), 0.1, Penalty.entropy(), UNIT, 8)
    with pytest.raises(ValueError):
        BarycenterProblem((DiscreteMeasure.dirac(0.5),), -1.0, Penalty.entropy(), UNIT, 8)
    with pytest.raises(ValueError):
        BarycenterProblem((DiscreteMeasure.dirac([0.5, 0.5]),), 0.1, Penalty.entropy(), UNIT, 8)
    with pytest.raises(ValueError):
        solve(BarycenterProblem((DiscreteMeasure.dirac(0.5),), 0.0, Penalty.entropy(), UNIT, 8))


def test_config_validation():
    for bad in ({"max_iters": 0}, {"step_rule": "armijo"}, {"step0": -1.0}, {"tol": 0.0}, {"init": "zeros"}):
        with pytest.raises(ValueError):
            SolverConfig(**bad)


def test_subgradient_vanishes_at_single_target(rng):
    f = random_density(rng, 20)
    prob = BarycenterProblem((grid_to_discrete(f),), 0.0, Penalty.quadratic(), UNIT, 20)
    np.testing.assert_allclose(subgradient(prob, f), 0.0, atol=1e-12)
    assert objective(prob, f) == pytest.approx(0.0, abs=1e-15)


def test_subgradient_descent_property(rng):
    for pen in (Penalty.quadratic(), Penalty.entropy(), Penalty.sobolev(1)):
        nus = [random_discrete(rng, 15) for _ in range(3)]
        prob = BarycenterProblem(nus, 0.05, pen, UNIT, 32)
        f = random_density(rng, 32)
        g = subgradient(prob, f)
        j0 = objective(prob, f)
        step = 1e-4
        while True:
            moved = f.with_values(project_simplex(f.values - step * g, prob.floor, f.cell_volume))
            if objective(prob, moved) <= j0 + 1e-9:
                break
            step /= 2
            assert step > 1e-12


def test_small_gamma_reproduces_target():
    nu = DiscreteMeasure([[0.2], [0.55], [0.6]], [0.3, 0.3, 0.4])
    prob = BarycenterProblem((nu,), 1e-6, Penalty.entropy(), UNIT, 64)
    # negligible gamma leaves the L2 descent badly conditioned: allow long steps
    sol = solve(prob, SolverConfig(max_iters=300, step0=100.0))
    nu_grid = quantile_table(nu).to_grid(UNIT, 64)
    assert np.sqrt(w2_1d(sol.density, nu_grid)) <= 2.0 / 64


def test_two_diracs_meet_in_the_middle():
    nus = (DiscreteMeasure.dirac(0.0), DiscreteMeasure.dirac(1.0))
    prob = BarycenterProblem(nus, 1e-3, Penalty.entropy(), UNIT, 64)
    sol = solve(prob, SolverConfig(max_iters=3000))
    centres = sol.density.centers()[:, 0]
    near = np.abs(centres - 0.5) <= 0.1
    assert sol.density.masses()[near].sum() > 0.95
    exact = barycenter_1d_exact(nus)
    assert exact(np.linspace(0.01, 1, 20)) == pytest.approx(0.5)


def test_symmetric_inputs_give_symmetric_output():
    dom = BoxDomain([-1.0], [1.0])
    nus = (
        DiscreteMeasure([[-0.7], [0.1]], [0.4, 0.6]),
        DiscreteMeasure([[0.7], [-0.1]], [0.4, 0.6]),
    )
    sol = solve(BarycenterProblem(nus, 0.05, Penalty.entropy(), dom, 40), SolverConfig(tol=1e-10, max_iters=5000))
    v = sol.density.values
    # J only resolves f to about sqrt(machine eps)
    np.testing.assert_allclose(v, v[::-1], atol=1e-5)


@pytest.mark.parametrize("pen", [Penalty.quadratic(), Penalty.entropy(), Penalty.sobolev(1), Penalty.sobolev(2, base="entropy")])
def test_solution_contract(pen, rng):
    nus = [random_discrete(rng, 12) for _ in range(4)]
    prob = BarycenterProblem(nus, 0.1, pen, UNIT, 48)
    sol = solve(prob, SolverConfig())
    assert sol.converged
    assert np.all(np.diff(sol.objective_trace) <= 1e-9)
    assert validate(sol.density).ok
    assert sol.density.values.min() >= prob.floor
    assert len(sol.certificates) == 4
    assert sol.objective == pytest.approx(objective(prob, sol.density), abs=1e-12)


def test_two_dimensional_solve(rng):
    dom = BoxDomain.unit(2)
    nus = [random_discrete(rng, 6, 2) for _ in range(3)]
    prob = BarycenterProblem(nus, 0.1, Penalty.entropy(), dom, (6, 5))
    sol = solve(prob, SolverConfig(max_iters=300))
    assert validate(sol.density).ok
    assert np.all(np.diff(sol.objective_trace) <= 1e-9)


def test_iteration_budget_reports_non_convergence(rng):
    nus = [random_discrete(rng, 12) for _ in range(4)]
    sol = solve(BarycenterProblem(nus, 0.1, Penalty.entropy(), UNIT, 48), SolverConfig(max_iters=1))
    assert not sol.converged
    assert sol.iterations == 1


def test_decaying_rule_still_descends(rng):
    nus = [random_discrete(rng, 12) for _ in range(4)]
    prob = BarycenterProblem(nus, 0.1, Penalty.entropy(), UNIT, 32)
    sol = solve(prob, SolverConfig(step_rule="decaying", max_iters=200))
    assert np.all(np.diff(sol.objective_trace) <= 1e-9)


def test_threads_do_not_change_result(rng):
    nus = [random_discrete(rng, 12) for _ in range(4)]
    prob = BarycenterProblem(nus, 0.1, Penalty.entropy(), UNIT, 32)
    a = solve(prob, SolverConfig(threads=1))
    b = solve(prob, SolverConfig(threads=3))
    np.testing.assert_array_equal(a.density.values, b.density.values)


def test_random_starts_agree(rng):
    nus = [random_discrete(rng, 12) for _ in range(4)]
    prob = BarycenterProblem(nus, 0.1, Penalty.sobolev(1), UNIT, 32)
    sols = [solve(prob, SolverConfig(tol=1e-9, init="random", seed=s, max_iters=5000)) for s in range(3)]
    for a, b in itertools.combinations(sols, 2):
        assert bregman_sym(prob.penalty, a.density, b.density) <= 1e-8


def test_penalty_value_monotone_in_gamma(rng):
    nus = [random_discrete(rng, 20) for _ in range(5)]
    values = []
    for gamma in (0.01, 0.03, 0.1, 0.3, 1.0):
        sol = solve(BarycenterProblem(nus, gamma, Penalty.entropy(), UNIT, 48), SolverConfig(tol=1e-9, max_iters=5000))
        values.append(Penalty.entropy().evaluate(sol.density))
    assert all(b <= a + 1e-7 for a, b in zip(values, values[1:]))


def test_exact_barycenter_examples():
    q = barycenter_1d_exact([DiscreteMeasure([[0.2], [0.9]], [0.5, 0.5])] * 3)
    np.testing.assert_allclose(q.values, [0.2, 0.2, 0.9])
    q = barycenter_1d_exact([DiscreteMeasure([[0.0], [2.0]], [0.5, 0.5]), DiscreteMeasure([[1.0], [3.0]], [0.5, 0.5])])
    np.testing.assert_allclose(q(np.array([0.25, 0.5, 0.75, 1.0])), [0.5, 0.5, 2.5, 2.5])


def test_exact_barycenter_beats_candidates(rng):
    nus = [random_discrete(rng, 3) for _ in range(3)]
    bary = barycenter_1d_exact(nus).to_discrete()
    best = np.mean([w2_1d(bary, nu) for nu in nus])
    # perturbing any atom of the barycenter can only raise the objective
    for _ in range(200):
        pts = bary.points + rng.normal(scale=0.05, size=bary.points.shape)
        cand = DiscreteMeasure(pts, bary.weights)
        assert np.mean([w2_1d(cand, nu) for nu in nus]) >= best - 1e-12


def test_exact_barycenter_of_grids(rng):
    f, g = random_density(rng, 16), random_density(rng, 16)
    q = barycenter_1d_exact([f, g])
    t = np.linspace(0, 1, 101)
    np.testing.assert_allclose(q(t), 0.5 * (quantile_table(f)(t) + quantile_table(g)(t)), atol=1e-12)
