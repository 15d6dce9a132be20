import numpy as np
import pytest

from lagkit.gmm import DiagonalGmm


def random_gmm(rng, K, D, mean_scale=2.0, std_range=(0.3, 2.0)):
    w = rng.dirichlet(np.ones(K))
    mu = rng.normal(0.0, mean_scale, (K, D))
    sd = rng.uniform(*std_range, (K, D))
    return DiagonalGmm(w, mu, sd)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion for the summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number, title, ok, detail):
        lines.append((number, f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} | {detail}"))
        print(lines[-1][1])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
