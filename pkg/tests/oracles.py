"""Independent reference implementations used only by the tests.

They avoid the package's own code paths: MST by scanning every (n-1)-edge
subset with a union-find acyclicity test, traversal by plain recursion, focal
loss written out per sample with math.log.
"""
import itertools
import math

import numpy as np


def all_edges(n):
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def canonical(i, j, n):
    i, j = min(i, j), max(i, j)
    return i * n - i * (i + 1) // 2 + (j - i - 1)


def _is_spanning_tree(n, edges):
    root = list(range(n))

    def find(a):
        while root[a] != a:
            root[a] = root[root[a]]
            a = root[a]
        return a

    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra == rb:
            return False
        root[ra] = rb
    return True


def spanning_trees(n):
    for subset in itertools.combinations(all_edges(n), n - 1):
        if _is_spanning_tree(n, subset):
            yield subset


def mst_weight_by_subsets(n, weights):
    """Minimum total weight over every spanning tree of K_n (n <= 6 is quick)."""
    best = math.inf
    for t in spanning_trees(n):
        best = min(best, math.fsum(weights[canonical(a, b, n)] for a, b in t))
    return best


def count_spanning_trees(n):
    return sum(1 for _ in spanning_trees(n))


def euler_tour_recursive(children, root):
    out = [root]

    def visit(v):
        for c in children[v]:
            out.append(c)
            visit(c)
            out.append(v)

    visit(root)
    return out


def focal_loss_reference(p, target, gamma, alpha):
    pb = max(p[target], 1e-12)
    return -alpha * (1.0 - p[target]) ** gamma * math.log(pb)


def cross_entropy_reference(p, target):
    return -math.log(p[target])


def sphere(x):
    x = np.asarray(x)
    return float(np.dot(x, x))
