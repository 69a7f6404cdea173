"""Convex penalties on grid densities and their Bregman divergences.

Three kinds are supported:

* ``quadratic``: ``E(f) = 1/2 int f^2``
* ``entropy``: ``E(f) = int f (log f - 1) + 1``, finite only when ``f >= alpha``
* ``sobolev``: ``E(f) = int G(f) + ||f||_{H^k}^2`` with ``G`` quadratic or
  entropic, finite only when ``f >= alpha``

Gradients are L2 gradients on the grid: ``<grad, v> = sum grad * v * cell_volume``
is the directional derivative of the discrete functional.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .constants import DEFAULT_FLOOR_RATIO
from .measures import BoxDomain, GridDensity

KINDS = ("quadratic", "entropy", "sobolev")


class DomainError(ValueError):
    """A density lies outside the domain of the penalty (below its floor)."""


class OutsideDomain:
    """Marker returned by :meth:`Penalty.evaluate` in place of ``+inf``."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "OUTSIDE_DOMAIN"

    def __bool__(self):
        return False


OUTSIDE_DOMAIN = OutsideDomain()


def default_floor(domain: BoxDomain) -> float:
    return DEFAULT_FLOOR_RATIO / domain.volume


def _difference_matrix(n: int, order: int, h: float) -> sp.csr_matrix:
    """Forward differences of the given order; boundary rows are dropped (zero flux)."""
    d = sp.identity(n, format="csr")
    for j in range(order):
        size = n - j
        step = sp.diags([-np.ones(size - 1), np.ones(size - 1)], [0, 1], shape=(size - 1, size), format="csr")
        d = (step @ d) / h
    return d


@lru_cache(maxsize=32)
def sobolev_operator(shape: tuple[int, ...], widths: tuple[float, ...], k: int) -> sp.csr_matrix:
    """``S = sum_{|beta| <= k} (D^beta)^T D^beta`` so that ``||f||_{H^k}^2 = cv * f^T S f``."""
    dim = len(shape)
    total = sp.csr_matrix((int(np.prod(shape)), int(np.prod(shape))))
    for beta in itertools.product(range(k + 1), repeat=dim):
        if sum(beta) > k:
            continue
        op = None
        for axis, order in enumerate(beta):
            d = _difference_matrix(shape[axis], order, widths[axis])
            op = d if op is None else sp.kron(op, d, format="csr")
        total = total + (op.T @ op)
    return total.tocsr()


@dataclass(frozen=True)
class Penalty:
    """A penalizing function on grid densities.

    Use the ``quadratic``, ``entropy`` and ``sobolev`` constructors. For the
    floored kinds ``alpha=None`` means :func:`default_floor` of the grid's
    domain.
    """

    kind: str = "quadratic"
    alpha: float | None = None
    k: int = 1
    base: str = "quadratic"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown penalty kind {self.kind!r}")
        if self.base not in ("quadratic", "entropy"):
            raise ValueError(f"unknown Sobolev base {self.base!r}")
        if self.alpha is not None and self.alpha <= 0 and self.kind != "quadratic":
            raise ValueError("entropy and Sobolev penalties need alpha > 0")
        if self.kind == "sobolev" and self.k < 1:
            raise ValueError("Sobolev order k must be >= 1")

    @classmethod
    def quadratic(cls) -> "Penalty":
        return cls("quadratic")

    @classmethod
    def entropy(cls, alpha: float | None = None) -> "Penalty":
        return cls("entropy", alpha)

    @classmethod
    def sobolev(cls, k: int = 1, alpha: float | None = None, base: str = "quadratic") -> "Penalty":
        return cls("sobolev", alpha, k, base)

    @property
    def g_kind(self) -> str:
        return self.base if self.kind == "sobolev" else self.kind

    def floor(self, domain: BoxDomain) -> float:
        if self.kind == "quadratic":
            return 0.0 if self.alpha is None else float(self.alpha)
        return default_floor(domain) if self.alpha is None else float(self.alpha)

    def _needs_floor(self) -> bool:
        return self.kind != "quadratic"

    def in_domain(self, f: GridDensity) -> bool:
        v = f.values
        if self._needs_floor():
            return bool(np.all(v >= self.floor(f.domain)))
        return bool(np.all(v >= 0))

    def _check(self, f: GridDensity):
        if not self.in_domain(f):
            raise DomainError(f"density below the {self.kind} floor {self.floor(f.domain):g}")

    def _operator(self, f: GridDensity) -> sp.csr_matrix:
        return sobolev_operator(f.shape, tuple(float(w) for w in f.cell_widths), self.k)

    def evaluate(self, f: GridDensity):
        """Penalty value, or :data:`OUTSIDE_DOMAIN` when ``f`` violates the floor."""
        if not self.in_domain(f):
            return OUTSIDE_DOMAIN
        v = f.values.ravel()
        cv = f.cell_volume
        if self.g_kind == "quadratic":
            val = 0.5 * float(v @ v) * cv
        else:
            val = float(np.sum(v * (np.log(v) - 1.0) + 1.0)) * cv
        if self.kind == "sobolev":
            val += cv * float(v @ (self._operator(f) @ v))
        return val

    def grad(self, f: GridDensity) -> np.ndarray:
        """L2 gradient on the grid, same shape as ``f.values``."""
        self._check(f)
        v = f.values.ravel()
        g = v.copy() if self.g_kind == "quadratic" else np.log(v)
        if self.kind == "sobolev":
            g = g + 2.0 * (self._operator(f) @ v)
        return g.reshape(f.shape)


def _pair(penalty: Penalty, f: GridDensity, g: GridDensity):
    if f.shape != g.shape or f.domain != g.domain:
        raise ValueError("densities live on different grids")
    penalty._check(f)
    penalty._check(g)
    return f.values.ravel(), g.values.ravel(), f.cell_volume


def bregman_sym(penalty: Penalty, f: GridDensity, g: GridDensity) -> float:
    """Symmetric divergence ``<grad E(f) - grad E(g), f - g>``."""
    a, b, cv = _pair(penalty, f, g)
    diff = a - b
    if penalty.g_kind == "quadratic":
        val = float(diff @ diff)
    else:
        val = float(diff @ (np.log(a) - np.log(b)))
    if penalty.kind == "sobolev":
        val += 2.0 * float(diff @ (penalty._operator(f) @ diff))
    return val * cv


def bregman_nonsym(penalty: Penalty, f: GridDensity, g: GridDensity) -> float:
    """``E(f) - E(g) - <grad E(g), f - g>``, written in cancellation-free form."""
    a, b, cv = _pair(penalty, f, g)
    diff = a - b
    if penalty.g_kind == "quadratic":
        val = 0.5 * float(diff @ diff)
    else:
        val = float(np.sum(a * np.log(a / b) - a + b))
    if penalty.kind == "sobolev":
        val += float(diff @ (penalty._operator(f) @ diff))
    return val * cv
