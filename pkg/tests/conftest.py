import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_grid(rng, h, w, density=None):
    """Random boolean grid that is guaranteed to hold both values."""
    density = rng.uniform(0.05, 0.95) if density is None else density
    grid = rng.random((h, w)) < density
    grid.flat[rng.integers(grid.size)] = True
    grid.flat[rng.integers(grid.size)] = False
    if grid.all() or not grid.any():
        grid.flat[0] = not grid.flat[0]
    return grid


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
