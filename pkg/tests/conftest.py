import numpy as np

from evocnn.mutation import reproduce
from evocnn.topology import new_minimal


def evolve_random(rng: np.random.Generator, steps: int, shape=(16, 16, 1), classes: int = 4,
                  channels: int = 2, max_nodes: int | None = None):
    """Minimal graph pushed through ``steps`` random reproductions."""
    g = new_minimal(shape, classes, channels=channels, rng=rng)
    for _ in range(steps):
        child, _ = reproduce(g, rng)
        if max_nodes is None or len(child.nodes) <= max_nodes:
            g = child
    return g


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
