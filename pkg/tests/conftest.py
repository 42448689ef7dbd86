import numpy as np
import pytest

from crtbounds.model import StudyData
from crtbounds import sim


def make_study(sizes, z, d=None, y=None, x=None, names=None):
    """StudyData from per-cluster sizes and assignments plus per-unit arrays."""
    sizes = np.asarray(sizes, dtype=int)
    cluster = np.repeat(np.arange(len(sizes)), sizes)
    n = int(sizes.sum())
    d = np.zeros(n, dtype=int) if d is None else np.asarray(d)
    y = np.zeros(n) if y is None else np.asarray(y, dtype=float)
    if x is None:
        x = np.zeros((n, 0))
    x = np.asarray(x, dtype=float).reshape(n, -1)
    if names is None:
        names = tuple(f"x{k}" for k in range(x.shape[1]))
    ids = tuple(f"c{j}" for j in range(len(sizes)))
    return StudyData(ids, np.asarray(z, dtype=int), cluster, d, y, x, tuple(names))


def random_study(rng, J=30, m=None, p=2, binary_y=False, max_size=4):
    """Random study with both arms, mixed compliance and ``p`` covariates."""
    m = J // 2 if m is None else m
    sizes = rng.integers(1, max_size + 1, size=J)
    z = np.zeros(J, dtype=int)
    z[rng.choice(J, size=m, replace=False)] = 1
    n = int(sizes.sum())
    x = rng.normal(size=(n, p))
    zz = np.repeat(z, sizes)
    d = np.where(zz == 1, rng.random(n) < 0.7, rng.random(n) < 0.3).astype(int)
    d[np.flatnonzero(zz == 1)[:2]] = (0, 1)
    d[np.flatnonzero(zz == 0)[:2]] = (0, 1)
    if binary_y:
        y = (rng.random(n) < 0.3 + 0.3 * d).astype(float)
    else:
        y = rng.normal(size=n) + 0.5 * d + x[:, 0]
    return make_study(sizes, z, d, y, x)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_population():
    return sim.generate_population(sim.SimConfig())


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when == "call":
                lines += [v for k, v in rep.user_properties if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
