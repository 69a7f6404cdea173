import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_density
from wbary.measures import BoxDomain, GridDensity
from wbary.penalties import (
    OUTSIDE_DOMAIN,
    DomainError,
    Penalty,
    bregman_nonsym,
    bregman_sym,
    default_floor,
    sobolev_operator,
)

ALL = [
    Penalty.quadratic(),
    Penalty.entropy(),
    Penalty.sobolev(1),
    Penalty.sobolev(2),
    Penalty.sobolev(1, base="entropy"),
]


def directional_check(pen, f, rng, eps=1e-6):
    g = pen.grad(f).ravel()
    worst = 0.0
    for _ in range(5):
        v = rng.normal(size=f.values.size)
        v -= v.mean()
        v *= 0.1 * f.values.min() / np.abs(v).max()
        plus = pen.evaluate(f.with_values(f.values.ravel() + eps * v))
        minus = pen.evaluate(f.with_values(f.values.ravel() - eps * v))
        fd = (plus - minus) / (2 * eps)
        exact = float(g @ v) * f.cell_volume
        worst = max(worst, abs(fd - exact) / max(abs(exact), 1e-12))
    return worst


def test_uniform_values():
    u = GridDensity.uniform(BoxDomain.unit(1), 32)
    assert Penalty.quadratic().evaluate(u) == pytest.approx(0.5)
    assert Penalty.entropy().evaluate(u) == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(Penalty.quadratic().grad(u), 1.0)
    np.testing.assert_allclose(Penalty.entropy().grad(u), 0.0, atol=1e-15)


def test_half_interval_quadratic():
    f = GridDensity(BoxDomain.unit(1), [2.0, 2.0, 0.0, 0.0])
    assert Penalty.quadratic().evaluate(f) == pytest.approx(1.0)


def test_sobolev_constant_has_no_seminorm():
    u = GridDensity.uniform(BoxDomain([0.0, 0.0], [2.0, 1.0]), (8, 6))
    pen = Penalty.sobolev(2)
    # density 1/2 on a box of volume 2: G part 1/4, order-zero Sobolev term 1/2
    assert pen.evaluate(u) == pytest.approx(0.25 + 0.5)


def test_outside_domain_marker():
    f = GridDensity(BoxDomain.unit(1), [2.0, 0.0])
    assert Penalty.entropy().evaluate(f) is OUTSIDE_DOMAIN
    assert Penalty.sobolev(1).evaluate(f) is OUTSIDE_DOMAIN
    assert not OUTSIDE_DOMAIN
    with pytest.raises(DomainError):
        Penalty.entropy().grad(f)
    assert Penalty.quadratic().evaluate(f) == pytest.approx(1.0)


def test_floor_defaults():
    dom = BoxDomain([0.0], [4.0])
    assert default_floor(dom) == pytest.approx(0.25e-6)
    assert Penalty.entropy().floor(dom) == default_floor(dom)
    assert Penalty.entropy(0.1).floor(dom) == 0.1
    assert Penalty.quadratic().floor(dom) == 0.0


def test_invalid_penalties():
    with pytest.raises(ValueError):
        Penalty("huber")
    with pytest.raises(ValueError):
        Penalty.entropy(0.0)
    with pytest.raises(ValueError):
        Penalty.sobolev(0)
    with pytest.raises(ValueError):
        Penalty.sobolev(1, base="sobolev")


def test_sobolev_operator_symmetric_psd():
    s = sobolev_operator((6, 5), (0.2, 0.3), 2).toarray()
    np.testing.assert_allclose(s, s.T, atol=1e-9)
    assert np.linalg.eigvalsh(s).min() > 1.0 - 1e-9  # order-zero term is the identity
    np.testing.assert_allclose(s @ np.ones(30), np.ones(30), atol=1e-9)


def test_first_order_operator_matches_sum_of_squares(rng):
    f = random_density(rng, 10)
    h = f.cell_widths[0]
    v = f.values
    expected = np.sum(v * v) * h + np.sum(np.diff(v) ** 2 / h**2) * h
    assert Penalty.sobolev(1).evaluate(f) - 0.5 * np.sum(v * v) * h == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("pen", ALL, ids=lambda p: f"{p.kind}-{p.k}-{p.base}")
def test_gradient_matches_finite_differences(pen, rng):
    for _ in range(4):
        f = random_density(rng, 64)
        assert directional_check(pen, f, rng) < 1e-5


def test_gradient_2d_sobolev(rng):
    f = random_density(rng, (16, 16))
    assert directional_check(Penalty.sobolev(2), f, rng) < 1e-5


@pytest.mark.parametrize("pen", ALL, ids=lambda p: f"{p.kind}-{p.k}-{p.base}")
def test_bregman_identities(pen, rng):
    for _ in range(10):
        f, g = random_density(rng, 24), random_density(rng, 24)
        s = bregman_sym(pen, f, g)
        assert s == pytest.approx(bregman_nonsym(pen, f, g) + bregman_nonsym(pen, g, f), abs=1e-9)
        assert s == pytest.approx(bregman_sym(pen, g, f), abs=1e-12)
        assert s > 0
        assert bregman_nonsym(pen, f, f) == 0.0
        # direct definition
        direct = pen.evaluate(f) - pen.evaluate(g) - float(np.sum(pen.grad(g) * (f.values - g.values))) * f.cell_volume
        assert bregman_nonsym(pen, f, g) == pytest.approx(direct, abs=1e-9)


def test_quadratic_bregman_example():
    n = 4096
    x = (np.arange(n) + 0.5) / n
    dom = BoxDomain.unit(1)
    f, g = GridDensity(dom, np.ones(n)), GridDensity(dom, 2.0 * x)
    # midpoint rule for int (1 - 2x)^2 = 1/3 has error -1/(3 n^2)
    assert bregman_sym(Penalty.quadratic(), f, g) == pytest.approx(1 / 3 - 1 / (3 * n * n), abs=1e-12)


def test_quadratic_bregman_is_l2(rng):
    f, g = random_density(rng, 50), random_density(rng, 50)
    l2 = np.sum((f.values - g.values) ** 2) * f.cell_volume
    assert bregman_sym(Penalty.quadratic(), f, g) == pytest.approx(l2, abs=1e-12)
    assert bregman_nonsym(Penalty.quadratic(), f, g) == pytest.approx(0.5 * l2, abs=1e-12)


def test_entropy_bregman_is_symmetrized_kl(rng):
    f, g = random_density(rng, 30), random_density(rng, 30)
    a, b = f.values, g.values
    kl = lambda p, q: np.sum(p * np.log(p / q)) * f.cell_volume  # noqa: E731
    assert bregman_sym(Penalty.entropy(), f, g) == pytest.approx(kl(a, b) + kl(b, a), rel=1e-12)


def test_sobolev_quadratic_lower_bounds(rng):
    pen = Penalty.sobolev(1, base="quadratic")
    for _ in range(10):
        f, g = random_density(rng, 40), random_density(rng, 40)
        l2 = np.sum((f.values - g.values) ** 2) * f.cell_volume
        assert bregman_sym(pen, f, g) >= l2
        assert bregman_nonsym(pen, f, g) >= 0.5 * l2


def test_domain_errors_in_divergences():
    dom = BoxDomain.unit(1)
    f, g = GridDensity(dom, [2.0, 0.0]), GridDensity.uniform(dom, 2)
    with pytest.raises(DomainError):
        bregman_sym(Penalty.entropy(), f, g)
    with pytest.raises(ValueError):
        bregman_sym(Penalty.quadratic(), g, GridDensity.uniform(dom, 3))


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(range(len(ALL))), st.integers(0, 2**32 - 1))
def test_strict_convexity(idx, seed):
    pen = ALL[idx]
    rng = np.random.default_rng(seed)
    f, g = random_density(rng, 16), random_density(rng, 16)
    mid = f.with_values(0.5 * (f.values + g.values))
    assert pen.evaluate(mid) < 0.5 * pen.evaluate(f) + 0.5 * pen.evaluate(g) - 1e-12


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(range(len(ALL))), st.integers(0, 2**32 - 1))
def test_divergences_nonnegative(idx, seed):
    pen = ALL[idx]
    rng = np.random.default_rng(seed)
    f, g = random_density(rng, 16), random_density(rng, 16)
    assert bregman_sym(pen, f, g) >= 0
    assert bregman_nonsym(pen, f, g) >= 0
    assert bregman_nonsym(pen, g, f) >= 0
