import os

# keep the optimal transport backend from probing deep-learning frameworks
for _key in ("TENSORFLOW", "PYTORCH", "JAX", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_key}", "1")

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def random_discrete(rng, m, dim=1, zeros=False):
    from wbary.measures import DiscreteMeasure

    w = rng.random(m) + 0.05
    if zeros and m > 1:
        w[rng.random(m) < 0.2] = 0.0
        if w.sum() == 0:
            w[0] = 1.0
    return DiscreteMeasure(rng.random((m, dim)), w / w.sum())


def random_density(rng, shape, domain=None, low=0.2):
    from wbary.measures import BoxDomain, GridDensity

    shape = tuple(np.atleast_1d(shape))
    domain = domain or BoxDomain.unit(len(shape))
    v = low + rng.random(shape)
    cv = domain.volume / v.size
    return GridDensity(domain, v / (v.sum() * cv))


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
