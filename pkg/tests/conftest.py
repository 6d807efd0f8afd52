import numpy as np
import pytest

from bcembed.graph import InteractionGraph, VersionSchedule, generate_synthetic


@pytest.fixture(scope="session")
def small_graph():
    return generate_synthetic(7, 200, 100, 5000, 32, 8)


@pytest.fixture(scope="session")
def schedule():
    return VersionSchedule()


def toy_graph(edges, features, num_users=None, num_items=None):
    """Graph from ``(user, item, rating)`` rows; times are rank/N in row order."""
    edges = np.asarray(edges, dtype=np.int64)
    n = len(edges)
    features = np.asarray(features, dtype=np.uint8)
    return InteractionGraph(
        num_users=num_users or int(edges[:, 0].max()) + 1,
        num_items=num_items or features.shape[0],
        item_features=features, users=edges[:, 0], items=edges[:, 1],
        times=np.arange(1, n + 1) / n, ratings=edges[:, 2].astype(np.int8),
        num_brands=features.shape[1])


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def record_criterion(name, ok, detail, seconds):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({seconds:.1f}s)"
    ACCEPTANCE_LINES.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
