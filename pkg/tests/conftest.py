import numpy as np
import pytest

from supquant.quantizer import Codebooks, ModelBundle


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_model(rng, d=5, r=4, m=2, k=3, c=2, gamma=0.7, mu=0.3, lam=0.5, eps=None):
    cb = Codebooks(rng.normal(size=(m, k, r)))
    return ModelBundle(
        transform=rng.normal(size=(d, r)),
        codebooks=cb,
        epsilon=rng.normal() if eps is None else eps,
        classifier=rng.normal(size=(r, c)),
        lam=lam,
        gamma=gamma,
        mu=mu,
    )


def random_problem(rng, n=5, **kw):
    model = random_model(rng, **kw)
    X = rng.normal(size=(n, model.d))
    Y = np.zeros((n, model.num_classes))
    Y[np.arange(n), rng.integers(0, model.num_classes, size=n)] = 1.0
    codes = rng.integers(0, model.k, size=(n, model.m))
    return model, codes, X, Y


@pytest.fixture
def make_problem(rng):
    def factory(**kw):
        return random_problem(rng, **kw)

    return factory


_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(number, title, passed, detail):
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
