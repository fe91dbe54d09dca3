import math

import numpy as np
import pytest

from conftest import nine_vertex_tree
from oracles import focal_loss_reference
from toponet import data as D
from toponet import gradcheck
from toponet import model as M
from toponet import neuralnet as nn
from toponet import topology as topo
from toponet.errors import DimensionError, ValidationError


def small_cfg(**kw):
    base = dict(num_landmarks=6, num_classes=3, hidden_dim=8, stream_embed_dim=6, fusion_dim=5, patch_size=8)
    base.update(kw)
    return M.ModelConfig(**base)


def batch(rng, cfg, B=4):
    n, a = cfg.num_landmarks, cfg.patch_size
    coords = rng.normal(size=(B, 2, n))
    if cfg.texture_input == "patches":
        tex = rng.uniform(size=(B, n, a, a))
    else:
        tex = rng.normal(size=(B, n, cfg.embedding_dim))
    return coords, tex, rng.integers(0, cfg.num_classes, B)


def U_for(tree):
    return topo.selection_matrix(topo.euler_tour(tree))


def test_config_validation():
    with pytest.raises(ValidationError):
        M.ModelConfig(cell="rnn")
    with pytest.raises(ValidationError):
        M.ModelConfig(use_structure=False, use_texture=False)
    with pytest.raises(ValidationError):
        M.ModelConfig.from_dict({"hidden": 3})
    cfg = M.ModelConfig(hidden_dim=7)
    assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_structure_sequence_and_steps(rng):
    cfg = small_cfg(num_landmarks=9)
    store = M.init_params(cfg, rng)
    U = U_for(nine_vertex_tree())
    lam = rng.normal(size=(1, 2, 9))
    ctx, probs, cache = M.structure_forward(cfg, store, lam, U)
    seq = topo.euler_tour(nine_vertex_tree()).vertices
    assert cache["zeta"].shape == (1, 2, 17)
    assert np.array_equal(cache["zeta"][0], lam[0][:, list(seq)])
    assert cache["delta"].shape == (1, 17)
    assert probs.shape == (1, 3) and ctx.shape == (1, 8)


def test_different_trees_change_structure_context(rng):
    cfg = small_cfg()
    store = M.init_params(cfg, rng)
    lam = rng.normal(size=(1, 2, 6))
    h1, _, _ = M.structure_forward(cfg, store, lam, U_for(topo.chain_tree(6)))
    h2, _, _ = M.structure_forward(cfg, store, lam, U_for(topo.random_tree(6, np.random.default_rng(5))))
    assert not np.allclose(h1, h2)


def test_same_traversal_same_outputs(rng):
    cfg = small_cfg()
    store = M.init_params(cfg, rng)
    coords, tex, _ = batch(rng, cfg)
    a = topo.chain_tree(6)
    b = topo.SpanningTree(6, 0, a.parent, a.children, 123.0)  # same shape, other weight
    oa, _ = M.forward(cfg, store, coords, tex, U_for(a))
    ob, _ = M.forward(cfg, store, coords, tex, U_for(b))
    assert np.array_equal(oa.fusion_probs, ob.fusion_probs)


def test_dimension_errors(rng):
    cfg = small_cfg()
    store = M.init_params(cfg, rng)
    U = U_for(topo.chain_tree(6))
    with pytest.raises(DimensionError):
        M.structure_forward(cfg, store, rng.normal(size=(1, 2, 5)), U)
    with pytest.raises(DimensionError):
        M.structure_forward(cfg, store, rng.normal(size=(1, 2, 6)), U[:, :9])
    with pytest.raises(ValidationError):
        M.texture_forward(cfg, store, rng.uniform(size=(1, 5, 8, 8)), U)


def test_identical_patches_constant_sequence(rng):
    cfg = small_cfg()
    store = M.init_params(cfg, rng)
    patch = rng.uniform(size=(8, 8))
    tex = np.tile(patch, (1, 6, 1, 1))
    _, _, cache = M.texture_forward(cfg, store, tex, U_for(topo.random_tree(6, rng)))
    seq = cache["seq"][0]
    assert np.allclose(seq, seq[0])


def test_patch_pixel_count():
    cfg = M.ModelConfig()
    assert cfg.patch_size == 17 and cfg.patch_size**2 == 289


def test_embedding_sequence_order(rng):
    cfg = small_cfg(texture_input="embeddings", embedding_dim=5)
    store = M.init_params(cfg, rng)
    tree = topo.random_tree(6, rng)
    emb = rng.normal(size=(1, 6, 5))
    _, _, cache = M.texture_forward(cfg, store, emb, U_for(tree))
    seq = topo.euler_tour(tree).vertices
    assert np.array_equal(cache["seq"][0], emb[0][list(seq)])


def test_fusion_gate_properties(rng):
    cfg = small_cfg()
    store = M.init_params(cfg, rng)
    coords, tex, _ = batch(rng, cfg, B=6)
    out, _ = M.forward(cfg, store, coords * 10, tex, U_for(topo.chain_tree(6)))
    assert np.all(np.abs(out.eta.sum(axis=1) - 1.0) < 1e-9)
    assert np.all(out.eta > 0) and np.all(out.eta < 1)
    assert np.all(np.abs(out.y) < 1)
    assert np.all(np.abs(out.fusion_probs.sum(axis=1) - 1.0) < 1e-9)


def test_symmetric_gate():
    cfg = small_cfg()
    store = M.init_params(cfg, np.random.default_rng(0))
    store.params["fuse.senc.W"][...] = store["fuse.tenc.W"]
    store.params["fuse.senc.b"][...] = store["fuse.tenc.b"]
    E = cfg.stream_embed_dim
    Wg = store.params["fuse.gate.W"]
    Wg[E:, 1] = Wg[:E, 0]
    Wg[:E, 1] = Wg[E:, 0]
    store.params["fuse.gate.b"][:] = 0.2
    h = np.random.default_rng(1).normal(size=(3, cfg.context_dim))
    _, _, eta, _ = M.fuse(cfg, store, h, h.copy())
    assert np.allclose(eta, 0.5, atol=1e-12)


def test_no_gate_ablation(rng):
    cfg = small_cfg(use_fusion_gate=False)
    store = M.init_params(cfg, rng)
    coords, tex, _ = batch(rng, cfg)
    out, _ = M.forward(cfg, store, coords, tex, U_for(topo.chain_tree(6)))
    assert np.all(out.eta == 0)
    assert "fuse.gate.W" in store  # parameters exist but stay unused
    M.loss_and_grad(cfg, store, coords, tex, U_for(topo.chain_tree(6)), np.array([0, 1, 2, 0]))
    assert np.all(store.grads["fuse.gate.W"] == 0)


def test_total_loss_examples(rng):
    half = np.array([[0.5, 0.5]])
    assert abs(M.total_loss(half, half, half, [0], 0.0, 1.0) - math.log(2)) < 1e-15
    certain = np.array([[1.0, 0.0]])
    x = float(nn.focal_loss(half, [0])[0])
    assert abs(M.total_loss(half, certain, certain, [0]) - x / 3) < 1e-15
    p = [rng.dirichlet(np.ones(4), size=5) for _ in range(3)]
    t = rng.integers(0, 4, 5)
    ref = np.mean([np.mean([focal_loss_reference(q[b], t[b], 2.0, 0.25) for q in p]) for b in range(5)])
    assert abs(M.total_loss(*p, t) - ref) < 1e-12


def test_predict_near_uniform_at_init():
    cfg = M.ModelConfig()
    ds = D.synth_generate(D.SyntheticConfig(samples_per_class=5))
    coords, tex, _ = ds.arrays()
    U = U_for(topo.random_tree(15, np.random.default_rng(0)))
    for seed in range(10):
        store = M.init_params(cfg, np.random.default_rng(seed))
        cls, probs = M.predict(cfg, store, coords, tex, U)
        assert np.all(np.ptp(probs, axis=1) < 0.2)
        assert np.all(np.abs(probs.sum(axis=1) - 1) < 1e-9)
        assert np.array_equal(cls, np.argmax(probs, axis=1))
        cls2, probs2 = M.predict(cfg, store, coords, tex, U)
        assert np.array_equal(probs, probs2)


def test_predict_tie_lowest_index():
    cfg = small_cfg()
    store = M.init_params(cfg, np.random.default_rng(0))
    store.params["fuse.cls.W"][...] = 0.0
    cls, probs = M.predict(cfg, store, np.zeros((2, 2, 6)), np.zeros((2, 6, 8, 8)), U_for(topo.chain_tree(6)))
    assert cls.tolist() == [0, 0]


def test_both_streams_receive_gradient(rng):
    cfg = small_cfg()
    store = M.init_params(cfg, rng)
    coords, tex, y = batch(rng, cfg)
    M.loss_and_grad(cfg, store, coords, tex, U_for(topo.chain_tree(6)), y)
    for prefix in ("struct.", "tex."):
        norm = math.sqrt(sum(float((g**2).sum()) for k, g in store.grads.items() if k.startswith(prefix)))
        assert norm > 0


def test_detached_texture_stream_gets_zero_gradient(rng):
    cfg = small_cfg(use_texture=False)
    store = M.init_params(cfg, rng)
    coords, tex, y = batch(rng, cfg)
    loss, out = M.loss_and_grad(cfg, store, coords, None, U_for(topo.chain_tree(6)), y)
    assert out.texture_probs is None
    assert all(np.all(g == 0) for k, g in store.grads.items() if k.startswith("tex."))
    assert any(np.any(g != 0) for k, g in store.grads.items() if k.startswith("struct."))


def test_translation_invariance_after_normalization(rng):
    cfg = small_cfg()
    store = M.init_params(cfg, rng)
    raw = rng.normal(size=(2, 6))
    U = U_for(topo.chain_tree(6))
    a = D.normalize_landmarks(raw)
    b = D.normalize_landmarks(raw + np.array([[3.5], [-1.25]]))
    ha, _, _ = M.structure_forward(cfg, store, a[None], U)
    hb, _, _ = M.structure_forward(cfg, store, b[None], U)
    assert np.allclose(ha, hb, atol=1e-12)


def test_outputs_finite_on_wide_inputs(rng):
    cfg = small_cfg()
    store = M.init_params(cfg, rng)
    coords = rng.uniform(-10, 10, size=(5, 2, 6))
    tex = rng.uniform(-10, 10, size=(5, 6, 8, 8))
    out, _ = M.forward(cfg, store, coords, tex, U_for(topo.chain_tree(6)))
    assert all(np.all(np.isfinite(v)) for v in (out.fusion_probs, out.structure_probs, out.texture_probs, out.y))


@pytest.mark.parametrize("cell,bidirectional", [("gru", False), ("lstm", True)])
def test_gradcheck_variants(cell, bidirectional):
    report = gradcheck.check_model(seed=3, hidden_dim=6, cell=cell, bidirectional=bidirectional, max_entries=12)
    assert report.passed, gradcheck.format_report(report)


def test_gradcheck_embeddings_and_ablations(rng):
    for kw in (dict(texture_input="embeddings", embedding_dim=4), dict(use_fusion_gate=False), dict(peephole=False)):
        cfg = small_cfg(**kw)
        store = M.init_params(cfg, rng)
        for k in store.names():
            store.params[k] += rng.normal(0, 0.1, store[k].shape)
        coords, tex, y = batch(rng, cfg, B=2)
        U = U_for(topo.random_tree(6, rng))
        M.loss_and_grad(cfg, store, coords, tex, U, y)
        ana = {k: g.copy() for k, g in store.grads.items()}

        def f():
            out, _ = M.forward(cfg, store, coords, tex, U)
            return M.total_loss(out.fusion_probs, out.structure_probs, out.texture_probs, y)

        for k in store.names():
            idx = np.arange(min(store[k].size, 10))
            num = nn.numeric_grad(f, store, k, 1e-5, idx).reshape(-1)[idx]
            assert nn.rel_error(ana[k].reshape(-1)[idx], num) < 1e-6, (kw, k)
