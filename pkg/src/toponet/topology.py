"""Weighted complete graphs over landmarks, their minimum spanning trees,
Euler-tour traversals and one-hot selection matrices."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import CapacityError, DimensionError, ParseError, ValidationError

BRUTE_FORCE_MAX_N = 8


def num_edges(n: int) -> int:
    return n * (n - 1) // 2


def edge_index(i: int, j: int, n: int) -> int:
    """Canonical position of the unordered pair (i, j) in the flat weight vector."""
    if i == j:
        raise ValidationError(f"no self-loop edge ({i}, {i})")
    if i > j:
        i, j = j, i
    return i * n - i * (i + 1) // 2 + (j - i - 1)


@dataclass(frozen=True)
class WeightedCompleteGraph:
    n: int
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).ravel()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def weight(self, i: int, j: int) -> float:
        return float(self.weights[edge_index(i, j, self.n)])

    def matrix(self) -> np.ndarray:
        iu, ju = np.triu_indices(self.n, k=1)
        W = np.zeros((self.n, self.n))
        W[iu, ju] = self.weights
        W[ju, iu] = self.weights
        return W


def build_graph(n: int, weights) -> WeightedCompleteGraph:
    if int(n) != n or n < 2:
        raise ValidationError(f"vertex count must be an integer >= 2, got {n!r}")
    n = int(n)
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size != num_edges(n):
        raise DimensionError(
            f"K_{n} needs {num_edges(n)} edge weights, got {w.size}"
        )
    if not np.all(np.isfinite(w)):
        bad = int(np.flatnonzero(~np.isfinite(w))[0])
        raise ValidationError(f"edge weight {bad} is not finite ({w[bad]})")
    return WeightedCompleteGraph(n, w)


def random_graph(n: int, rng: np.random.Generator, low=0.0, high=1.0) -> WeightedCompleteGraph:
    return build_graph(n, rng.uniform(low, high, size=num_edges(n)))


@dataclass(frozen=True)
class SpanningTree:
    """Rooted spanning tree. ``children[v]`` keeps the order in which children
    were attached; traversals follow it."""

    n: int
    root: int
    parent: tuple
    children: tuple
    total_weight: float

    def __post_init__(self):
        object.__setattr__(self, "parent", tuple(int(p) for p in self.parent))
        object.__setattr__(
            self, "children", tuple(tuple(int(c) for c in ch) for ch in self.children)
        )
        object.__setattr__(self, "total_weight", float(self.total_weight))
        _check_tree(self)

    def edges(self) -> list[tuple[int, int]]:
        """(parent, child) pairs ordered by child index."""
        return [(self.parent[v], v) for v in range(self.n) if v != self.root]

    def degree(self, v: int) -> int:
        return len(self.children[v]) + (0 if v == self.root else 1)

    def depth(self) -> int:
        depth, frontier = 0, list(self.children[self.root])
        while frontier:
            depth += 1
            frontier = [c for v in frontier for c in self.children[v]]
        return depth

    def max_degree(self) -> int:
        return max(self.degree(v) for v in range(self.n))


def _check_tree(t: SpanningTree) -> None:
    n = t.n
    if n < 2:
        raise ValidationError(f"tree needs at least 2 vertices, got {n}")
    if not 0 <= t.root < n:
        raise ValidationError(f"root {t.root} out of range for n={n}")
    if len(t.parent) != n or len(t.children) != n:
        raise DimensionError("parent and children must have one entry per vertex")
    if t.parent[t.root] != -1:
        raise ValidationError("parent[root] must be -1")
    seen = []
    for v, ch in enumerate(t.children):
        for c in ch:
            if not 0 <= c < n or t.parent[c] != v:
                raise ValidationError(f"child list of {v} disagrees with parent array at {c}")
            seen.append(c)
    if sorted(seen) != [v for v in range(n) if v != t.root]:
        raise ValidationError("children lists do not partition the non-root vertices")
    # connectivity: every vertex reaches the root
    reached = {t.root}
    frontier = [t.root]
    while frontier:
        frontier = [c for v in frontier for c in t.children[v]]
        reached.update(frontier)
    if len(reached) != n:
        raise ValidationError("tree is not connected")


def _tree_from_order(parent, order, root, total_weight) -> SpanningTree:
    n = len(parent)
    children = [[] for _ in range(n)]
    for v in order[1:]:
        children[parent[v]].append(int(v))
    par = [int(p) for p in parent]
    par[root] = -1
    return SpanningTree(n, root, par, children, total_weight)


def prim_mst(graph: WeightedCompleteGraph, start: int = 0) -> SpanningTree:
    """Minimum spanning tree grown from ``start``.

    Frontier ties resolve to the smallest canonical edge index, so the result
    is unique for every weight vector. Children are appended in extraction
    order.
    """
    if not 0 <= start < graph.n:
        raise ValidationError(f"start vertex {start} out of range for n={graph.n}")
    parent, order = kernels.prim(graph.weights, graph.n, start)
    total = _edge_sum(graph, [(int(v), int(parent[v])) for v in order[1:]])
    return _tree_from_order(parent, order, start, total)


def _edge_sum(graph, edges) -> float:
    # correctly rounded, so totals do not depend on edge order
    return math.fsum(graph.weight(a, b) for a, b in edges)


def tree_from_edges(n: int, edges, root: int = 0, graph: WeightedCompleteGraph | None = None) -> SpanningTree:
    """Root an undirected edge list at ``root``; children in ascending index order.

    ``total_weight`` sums the graph weights when a graph is given, otherwise
    counts edges (unit weights).
    """
    edges = [(int(a), int(b)) for a, b in edges]
    if len(edges) != n - 1:
        raise ValidationError(f"a tree on {n} vertices has {n - 1} edges, got {len(edges)}")
    adj = [[] for _ in range(n)]
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    parent = [-2] * n
    parent[root] = -1
    children = [[] for _ in range(n)]
    frontier = [root]
    while frontier:
        nxt = []
        for v in frontier:
            for c in sorted(adj[v]):
                if parent[c] == -2:
                    parent[c] = v
                    children[v].append(c)
                    nxt.append(c)
        frontier = nxt
    if -2 in parent:
        raise ValidationError("edge list does not span all vertices")
    total = float(len(edges)) if graph is None else _edge_sum(graph, edges)
    return SpanningTree(n, root, parent, children, total)


def brute_force_mst(graph: WeightedCompleteGraph, root: int = 0) -> SpanningTree:
    """Globally minimal spanning tree by enumerating all n^(n-2) Pruefer codes."""
    if graph.n > BRUTE_FORCE_MAX_N:
        raise CapacityError(
            f"exhaustive enumeration limited to n <= {BRUTE_FORCE_MAX_N}, got {graph.n}"
        )
    edges, _ = kernels.brute_force(graph.weights, graph.n)
    return tree_from_edges(graph.n, edges, root, graph)


def chain_tree(n: int, root: int = 0) -> SpanningTree:
    """Path 0-1-...-(n-1), the simplest hand-designed topology."""
    return tree_from_edges(n, [(i, i + 1) for i in range(n - 1)], root)


def random_tree(n: int, rng: np.random.Generator, root: int = 0) -> SpanningTree:
    """MST of i.i.d. uniform edge weights."""
    return prim_mst(random_graph(n, rng), root)


# ---------------------------------------------------------------------------
# traversal


@dataclass(frozen=True)
class TraversalSequence:
    vertices: tuple
    n: int

    def __len__(self):
        return len(self.vertices)

    def one_based(self) -> str:
        return "-".join(str(v + 1) for v in self.vertices)


def euler_tour(tree: SpanningTree) -> TraversalSequence:
    """Preorder depth-first walk recording every arrival, backtracking included."""
    seq = [tree.root]
    stack = [(tree.root, iter(tree.children[tree.root]))]
    while stack:
        child = next(stack[-1][1], None)
        if child is None:
            stack.pop()
            if stack:
                seq.append(stack[-1][0])
        else:
            seq.append(child)
            stack.append((child, iter(tree.children[child])))
    return TraversalSequence(tuple(seq), tree.n)


def selection_matrix(seq: TraversalSequence) -> np.ndarray:
    """n x (2n-1) one-hot matrix; column j selects vertex ``seq.vertices[j]``."""
    U = np.zeros((seq.n, len(seq.vertices)))
    U[list(seq.vertices), np.arange(len(seq.vertices))] = 1.0
    return U


# ---------------------------------------------------------------------------
# export / serialization


def tree_digest(tree: SpanningTree) -> str:
    """Short stable hash of the rooted topology and child order."""
    blob = json.dumps([tree.root, tree.children], separators=(",", ":"))
    return hashlib.sha1(blob.encode()).hexdigest()[:12]


def tree_to_dot(tree: SpanningTree, coords=None) -> str:
    lines = ["graph face_tree {"]
    if coords is not None:
        coords = np.asarray(coords, dtype=np.float64)
        if coords.shape != (2, tree.n):
            raise DimensionError(f"coords must have shape (2, {tree.n}), got {coords.shape}")
        for k in range(tree.n):
            lines.append(f'  {k} [pos="{coords[0, k]:.6g},{coords[1, k]:.6g}!"];')
    for p, c in tree.edges():
        lines.append(f"  {p} -- {c};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def tree_to_json(tree: SpanningTree) -> str:
    doc = {
        "n": tree.n,
        "root": tree.root,
        "parent": list(tree.parent),
        "children": [list(ch) for ch in tree.children],
        "total_weight": tree.total_weight,
    }
    return json.dumps(doc)


def tree_from_json(text: str) -> SpanningTree:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"invalid tree JSON at line {exc.lineno} column {exc.colno}: {exc.msg}",
            position=exc.pos,
        ) from None
    keys = ("n", "root", "parent", "children", "total_weight")
    if not isinstance(doc, dict) or any(k not in doc for k in keys):
        raise ParseError(f"tree JSON must be an object with keys {', '.join(keys)}")
    try:
        return SpanningTree(
            int(doc["n"]), int(doc["root"]), doc["parent"], doc["children"], float(doc["total_weight"])
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, (ValidationError, DimensionError)):
            raise
        raise ParseError(f"bad field type in tree JSON: {exc}") from None
