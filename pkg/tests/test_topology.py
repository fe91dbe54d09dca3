import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import NINE_VERTEX_TOUR, nine_vertex_tree, tour_violations
from oracles import canonical, count_spanning_trees, euler_tour_recursive, mst_weight_by_subsets
from toponet import topology as topo
from toponet.errors import CapacityError, DimensionError, ParseError, ValidationError


def test_canonical_index_matches_oracle():
    for n in (2, 3, 7, 15):
        idx = [topo.edge_index(i, j, n) for i in range(n) for j in range(i + 1, n)]
        assert idx == list(range(topo.num_edges(n)))
        assert all(topo.edge_index(j, i, n) == canonical(i, j, n) for i in range(n) for j in range(i + 1, n))


def test_build_graph_smallest():
    g = topo.build_graph(2, [0.5])
    assert g.weight(0, 1) == g.weight(1, 0) == 0.5


def test_build_graph_n50_needs_1225():
    assert topo.num_edges(50) == 1225
    topo.build_graph(50, np.zeros(1225))
    with pytest.raises(DimensionError):
        topo.build_graph(50, np.zeros(1224))


def test_build_graph_errors():
    with pytest.raises(DimensionError):
        topo.build_graph(4, np.ones(5))
    with pytest.raises(ValidationError):
        topo.build_graph(3, [1.0, np.nan, 2.0])
    with pytest.raises(ValidationError):
        topo.build_graph(3, [1.0, np.inf, 2.0])


def test_symmetric_matrix():
    g = topo.random_graph(6, np.random.default_rng(0))
    W = g.matrix()
    assert np.array_equal(W, W.T)
    assert W[2, 4] == g.weight(4, 2)


def test_prim_k3_hand_example():
    g = topo.build_graph(3, [1.0, 2.0, 3.0])
    t = topo.prim_mst(g, 0)
    assert {frozenset(e) for e in t.edges()} == {frozenset((0, 1)), frozenset((0, 2))}
    assert t.total_weight == 3.0
    assert t.children[0] == (1, 2)
    b = topo.brute_force_mst(g)
    assert {frozenset(e) for e in b.edges()} == {frozenset((0, 1)), frozenset((0, 2))}


def test_prim_n2():
    t = topo.prim_mst(topo.build_graph(2, [-4.25]), 0)
    assert t.edges() == [(0, 1)] and t.total_weight == -4.25


def test_prim_tie_break_lowest_canonical_index():
    # all equal: frontier ties go to the smallest canonical index, i.e. a star at the start vertex
    t = topo.prim_mst(topo.build_graph(5, np.ones(10)), 0)
    assert t.children[0] == (1, 2, 3, 4)
    t2 = topo.prim_mst(topo.build_graph(5, np.ones(10)), 3)
    # from 3: edge (0,3) has index 2; afterwards (0,1), (0,2), (0,4) undercut every (3,x)
    assert t2.children[3] == (0,)
    assert t2.children[0] == (1, 2, 4)


def test_prim_start_out_of_range():
    with pytest.raises(ValidationError):
        topo.prim_mst(topo.build_graph(3, [1, 2, 3]), 3)


def test_spanning_tree_counts_cayley():
    # oracle sanity: n^(n-2) labeled trees
    assert [count_spanning_trees(n) for n in (3, 4, 5)] == [3, 16, 125]


def test_prim_matches_subset_oracle():
    rng = np.random.default_rng(7)
    for _ in range(60):
        n = int(rng.integers(3, 7))
        w = rng.normal(size=topo.num_edges(n))
        t = topo.prim_mst(topo.build_graph(n, w), int(rng.integers(n)))
        assert t.total_weight == mst_weight_by_subsets(n, w)


def test_brute_force_equal_weights():
    t = topo.brute_force_mst(topo.build_graph(4, np.full(6, 0.7)))
    assert t.total_weight == math.fsum([0.7] * 3)
    assert len(t.edges()) == 3


def test_brute_force_n6_equals_prim():
    g = topo.random_graph(6, np.random.default_rng(3))
    assert topo.brute_force_mst(g).total_weight == topo.prim_mst(g).total_weight


def test_brute_force_capacity():
    with pytest.raises(CapacityError):
        topo.brute_force_mst(topo.random_graph(9, np.random.default_rng(0)))


def test_shift_invariance():
    rng = np.random.default_rng(11)
    for _ in range(20):
        n = int(rng.integers(3, 12))
        w = rng.uniform(size=topo.num_edges(n))
        a = topo.prim_mst(topo.build_graph(n, w))
        b = topo.prim_mst(topo.build_graph(n, w + 0.5))
        assert a.parent == b.parent
        assert b.total_weight == pytest.approx(a.total_weight + (n - 1) * 0.5, abs=1e-12)


def test_negative_weights_allowed():
    w = -np.arange(1.0, 7.0)
    t = topo.prim_mst(topo.build_graph(4, w))
    assert t.total_weight == mst_weight_by_subsets(4, w)


def test_nine_vertex_tour():
    seq = topo.euler_tour(nine_vertex_tree())
    assert seq.one_based() == NINE_VERTEX_TOUR
    assert len(seq) == 17


def test_small_tours():
    t2 = topo.prim_mst(topo.build_graph(2, [1.0]))
    assert topo.euler_tour(t2).vertices == (0, 1, 0)
    star = topo.SpanningTree(4, 0, [-1, 0, 0, 0], [[1, 2, 3], [], [], []], 3.0)
    assert topo.euler_tour(star).vertices == (0, 1, 0, 2, 0, 3, 0)


def test_selection_matrix():
    U = topo.selection_matrix(topo.euler_tour(topo.prim_mst(topo.build_graph(2, [1.0]))))
    assert np.array_equal(U, [[1, 0, 1], [0, 1, 0]])
    U = topo.selection_matrix(topo.euler_tour(nine_vertex_tree()))
    assert U.shape == (9, 17)
    assert U[0].sum() == 4
    assert np.all(U.sum(axis=0) == 1)
    assert np.count_nonzero(U) == 17


def test_selection_matrix_gathers_columns(rng):
    t = topo.random_tree(10, rng)
    seq = topo.euler_tour(t)
    lam = rng.normal(size=(2, 10))
    zeta = lam @ topo.selection_matrix(seq)
    assert np.array_equal(zeta, lam[:, list(seq.vertices)])


@settings(max_examples=60, deadline=None)
@given(n=st.integers(2, 40), seed=st.integers(0, 2**32 - 1), root=st.integers(0, 39))
def test_tour_invariants_property(n, seed, root):
    tree = topo.random_tree(n, np.random.default_rng(seed), root % n)
    seq = topo.euler_tour(tree)
    assert tour_violations(tree, seq) == []
    assert list(seq.vertices) == euler_tour_recursive(tree.children, tree.root)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(3, 6), seed=st.integers(0, 2**32 - 1))
def test_prim_oracle_property(n, seed):
    w = np.random.default_rng(seed).normal(size=topo.num_edges(n))
    g = topo.build_graph(n, w)
    assert topo.prim_mst(g).total_weight == topo.brute_force_mst(g).total_weight == mst_weight_by_subsets(n, w)


def test_tree_validation():
    with pytest.raises(ValidationError):
        topo.SpanningTree(3, 0, [-1, 0, 1], [[1], [], []], 0.0)  # 2 missing from children
    with pytest.raises(ValidationError):
        topo.SpanningTree(3, 0, [-1, 2, 1], [[], [2], [1]], 0.0)  # cycle, root isolated
    with pytest.raises(DimensionError):
        topo.SpanningTree(3, 0, [-1, 0], [[1], [], []], 0.0)


def test_tree_from_edges_and_chain():
    t = topo.chain_tree(5)
    assert topo.euler_tour(t).vertices == (0, 1, 2, 3, 4, 3, 2, 1, 0)
    assert t.depth() == 4 and t.max_degree() == 2
    with pytest.raises(ValidationError):
        topo.tree_from_edges(4, [(0, 1), (1, 2), (0, 2)])


def test_dot_export():
    t2 = topo.prim_mst(topo.build_graph(2, [1.0]))
    assert topo.tree_to_dot(t2).count("--") == 1
    dot = topo.tree_to_dot(nine_vertex_tree())
    assert dot.startswith("graph face_tree {") and dot.count(" -- ") == 8
    coords = np.vstack([np.arange(9.0), np.zeros(9)])
    with_pos = topo.tree_to_dot(nine_vertex_tree(), coords)
    assert with_pos.count('pos="') == 9 and '  3 [pos="3,0!"];' in with_pos
    with pytest.raises(DimensionError):
        topo.tree_to_dot(nine_vertex_tree(), coords[:, :5])


def test_json_round_trip():
    t = nine_vertex_tree()
    text = topo.tree_to_json(t)
    back = topo.tree_from_json(text)
    assert back == t
    assert back.children[0] == (1, 3, 5)
    assert topo.tree_to_json(back) == text
    assert topo.tree_to_dot(back) == topo.tree_to_dot(t)
    g = topo.random_graph(12, np.random.default_rng(4))
    t = topo.prim_mst(g, 5)
    assert topo.tree_to_json(topo.tree_from_json(topo.tree_to_json(t))) == topo.tree_to_json(t)


def test_json_errors():
    text = topo.tree_to_json(nine_vertex_tree())
    with pytest.raises(ParseError) as exc:
        topo.tree_from_json(text[:-7])
    assert exc.value.position is not None
    with pytest.raises(ParseError):
        topo.tree_from_json('{"n": 2}')
    bad = text.replace('"root": 0', '"root": 1')
    with pytest.raises((ValidationError, DimensionError)):
        topo.tree_from_json(bad)


def test_digest_depends_on_child_order():
    a = topo.SpanningTree(3, 0, [-1, 0, 0], [[1, 2], [], []], 2.0)
    b = topo.SpanningTree(3, 0, [-1, 0, 0], [[2, 1], [], []], 2.0)
    assert topo.tree_digest(a) != topo.tree_digest(b)
    assert topo.tree_digest(a) == topo.tree_digest(topo.tree_from_json(topo.tree_to_json(a)))
