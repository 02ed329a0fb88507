import numpy as np
import pytest

from icocnn.icosphere import build_hierarchy


@pytest.fixture(scope="session")
def hierarchy6():
    """Full hierarchy to level 6, shared across the suite (read-only)."""
    return build_hierarchy(6)


@pytest.fixture(scope="session")
def hierarchy3():
    return build_hierarchy(3)


def bfs_ring_oracle(faces, n_nodes, start, order):
    """Independent ring oracle: breadth-first search on adjacency derived
    from the face list with plain Python sets."""
    adj = {i: set() for i in range(n_nodes)}
    for a, b, c in faces:
        adj[a].update((b, c))
        adj[b].update((a, c))
        adj[c].update((a, b))
    seen = {start}
    frontier = {start}
    for _ in range(order):
        frontier = {m for v in frontier for m in adj[v]} - seen
        seen |= frontier
    return sorted(seen)


@pytest.fixture(scope="session")
def ring_oracle():
    return bfs_ring_oracle


def rng(seed=0):
    return np.random.default_rng(seed)


def grad_rel_err(analytic, fd, floor=1e-6):
    """Relative error between analytic and finite-difference gradients.

    The denominator is floored so that parameters with a genuinely zero
    gradient (e.g. a bias immediately followed by batch normalization,
    which cancels it) compare as agreeing instead of dividing noise by
    noise."""
    a = np.asarray(analytic).ravel()
    b = np.asarray(fd).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))
