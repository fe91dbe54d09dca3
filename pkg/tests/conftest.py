import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from toponet import topology as topo  # noqa: E402

NINE_VERTEX_TOUR = "1-2-3-2-1-4-5-4-1-6-7-8-7-9-7-6-1"


def nine_vertex_tree():
    # 1-based labels: root 1; 1 -> [2, 4, 6]; 2 -> [3]; 4 -> [5]; 6 -> [7]; 7 -> [8, 9]
    children = [[1, 3, 5], [2], [], [4], [], [6], [7, 8], [], []]
    parent = [-1, 0, 1, 0, 3, 0, 5, 6, 6]
    return topo.SpanningTree(9, 0, parent, children, 8.0)


def tour_violations(tree, seq):
    """List of broken traversal invariants (empty when all hold)."""
    v = list(seq.vertices)
    problems = []
    if len(v) != 2 * tree.n - 1:
        problems.append("length")
    if v[0] != tree.root or v[-1] != tree.root:
        problems.append("endpoints")
    edges = {frozenset(e) for e in tree.edges()}
    if any(frozenset((a, b)) not in edges for a, b in zip(v, v[1:])):
        problems.append("adjacency")
    for u in range(tree.n):
        expected = tree.degree(u) + (1 if u == tree.root else 0)
        if v.count(u) != expected:
            problems.append(f"multiplicity {u}")
            break
    return problems


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
