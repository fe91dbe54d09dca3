"""Finite-difference check of the full two-stream model's backward pass."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import model as M
from . import neuralnet as nn
from . import topology as topo


@dataclass
class GradReport:
    errors: dict  # block name -> relative error
    checked: dict  # block name -> number of entries compared
    loss: float
    seconds: float
    tolerance: float

    @property
    def worst(self):
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def passed(self):
        return self.worst[1] < self.tolerance


def check_model(
    seed=0,
    n=6,
    num_classes=3,
    hidden_dim=32,
    patch_size=8,
    batch=3,
    cell="lstm",
    bidirectional=False,
    h=1e-4,
    max_entries=None,
    tolerance=1e-4,
    jitter=0.1,
) -> GradReport:
    """Compare analytic and central-difference gradients for every block.

    Parameters are jittered away from their initial values so zero-initialized
    blocks (biases, peepholes) carry signal. ``max_entries`` caps the entries
    compared per block; ``None`` checks all of them.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    cfg = M.ModelConfig(
        num_landmarks=n,
        num_classes=num_classes,
        hidden_dim=hidden_dim,
        patch_size=patch_size,
        cell=cell,
        bidirectional=bidirectional,
    )
    store = M.init_params(cfg, rng)
    for name in store.names():
        store.params[name] += rng.normal(0.0, jitter, store[name].shape)
    tree = topo.random_tree(n, rng)
    U = topo.selection_matrix(topo.euler_tour(tree))
    coords = rng.normal(size=(batch, 2, n))
    patches = rng.uniform(size=(batch, n, patch_size, patch_size))
    y = rng.integers(0, num_classes, batch)

    loss, _ = M.loss_and_grad(cfg, store, coords, patches, U, y)
    analytic = {k: g.copy() for k, g in store.grads.items()}

    def loss_fn():
        out, _ = M.forward(cfg, store, coords, patches, U)
        return M.total_loss(out.fusion_probs, out.structure_probs, out.texture_probs, y, cfg.focal_gamma, cfg.focal_alpha)

    errors, checked = {}, {}
    for name in store.names():
        size = store[name].size
        idx = None
        if max_entries is not None and size > max_entries:
            idx = np.sort(rng.choice(size, max_entries, replace=False))
        num = nn.numeric_grad(loss_fn, store, name, h, idx).reshape(-1)
        ana = analytic[name].reshape(-1)
        if idx is not None:
            num, ana = num[idx], ana[idx]
        errors[name] = nn.rel_error(ana, num)
        checked[name] = len(num)
    return GradReport(errors, checked, float(loss), time.perf_counter() - t0, tolerance)


def format_report(report: GradReport) -> str:
    lines = [f"{'block':<22} {'entries':>8} {'rel_error':>12}"]
    for name in sorted(report.errors):
        lines.append(f"{name:<22} {report.checked[name]:>8d} {report.errors[name]:>12.3e}")
    name, err = report.worst
    verdict = "PASS" if report.passed else "FAIL"
    lines.append(f"worst block: {name} rel_error={err:.3e} tolerance={report.tolerance:.0e} -> {verdict}")
    return "\n".join(lines)
