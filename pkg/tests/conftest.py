import numpy as np
import pytest

from rdpp.gridworld import bundled_map, load_map
from rdpp.observers import LearnableObserver, pretrain
from rdpp.rng import Stream, stream


def open_map(width, height, start, goals, blocked=()):
    """Build a map from coordinates; ``goals`` are listed in index order."""
    rows = [["."] * width for _ in range(height)]
    for x, y in blocked:
        rows[y][x] = "#"
    sx, sy = start
    rows[sy][sx] = "S"
    for i, (gx, gy) in enumerate(goals):
        rows[gy][gx] = str(i)
    return load_map("\n".join("".join(r) for r in rows))


def random_map(rng, width=9, height=9, n_goals=2, density=0.2):
    """Random obstacle map whose goals are all reachable from the start."""
    while True:
        cells = [(x, y) for y in range(height) for x in range(width)]
        picks = rng.choice(len(cells), size=n_goals + 1, replace=False)
        start, *goals = [cells[i] for i in picks]
        blocked = [c for c in cells if c != start and c not in goals and rng.random() < density]
        try:
            return open_map(width, height, start, goals, blocked)
        except Exception:
            continue


def fd_gradient(f, x, h=1e-5, order=2):
    """Central differences; ``order=4`` uses the five-point stencil (pair it with h ~ 1e-3)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        if order == 4:
            g.flat[i] = (-f(x + 2 * e) + 8 * f(x + e) - 8 * f(x - e) + f(x - 2 * e)) / (12 * h)
        else:
            g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


@pytest.fixture(scope="session")
def grid15():
    return bundled_map("grid15")


@pytest.fixture(scope="session")
def pretrained15(grid15, tmp_path_factory):
    """The default 15x15 observer (600 trajectories, 30 epochs) and its report."""
    observer = LearnableObserver(grid15, seed=stream(0, Stream.OBSERVER_INIT))
    report = pretrain(observer, grid15, n_trajectories=600, epochs=30, seed=stream(0, Stream.PRETRAIN))
    path = tmp_path_factory.mktemp("observer") / "observer.obs"
    observer.save(path)
    return observer, report, path
