"""Alternating optimization: CCPSO2 over K_n edge weights outside, Adam on the
two-stream model inside, plus evaluation metrics and baseline studies."""
from __future__ import annotations

import logging
import math
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import ccpso2
from . import model as M
from . import neuralnet as nn
from . import topology as topo
from .data import Dataset
from .errors import TrainingError, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    inner_epochs: int = 10
    batch_size: int = 32
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    flip_probability: float = 0.25
    seed: int = 0
    patience: int | None = None  # outer generations without improvement before stopping
    workers: int = 1
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    # CCPSO2 (dimensions come from the landmark count)
    iterations: int = 10
    swarm_size: int = 6
    group_sizes: tuple = (1, 5, 7)
    bounds: tuple = (-1.0, 1.0)
    restarts: int = 1

    def __post_init__(self):
        if self.inner_epochs < 0 or self.batch_size < 1 or self.workers < 1:
            raise ValidationError("inner_epochs >= 0, batch_size >= 1 and workers >= 1 required")
        if self.patience is not None and self.patience < 1:
            raise ValidationError("patience must be >= 1")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValidationError("flip_probability must lie in [0, 1]")

    def swarm_config(self, n: int) -> ccpso2.SwarmConfig:
        return ccpso2.SwarmConfig(
            dimensions=topo.num_edges(n),
            group_sizes=self.group_sizes,
            swarm_size=self.swarm_size,
            iterations=self.iterations,
            seed=self.seed,
            bounds=self.bounds,
            restarts=self.restarts,
        )


@dataclass
class Metrics:
    recognition_rate: float
    precision: list
    recall: list
    f1: list
    confusion: list  # rows: true class, columns: predicted class

    def to_dict(self):
        return {
            "rr": self.recognition_rate,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "confusion": self.confusion,
        }


@dataclass
class InnerResult:
    params: nn.ParamStore
    final_loss: float
    initial_loss: float | None
    epoch_losses: list


def inner_seed(seed: int) -> np.random.SeedSequence:
    # every candidate tree gets the same initialization and batch order, so the
    # CCPSO2 objective depends on the traversal alone
    return np.random.SeedSequence([int(seed), 0x70B0])


class _Arrays:
    """Training tensors plus their mirrored copies for flip augmentation."""

    def __init__(self, dataset: Dataset, flip_probability: float):
        self.coords, self.texture, self.labels = dataset.arrays()
        self.n = dataset.n
        self.flip = None
        if flip_probability > 0.0 and dataset.mirror_map is not None:
            mm = np.asarray(dataset.mirror_map)
            fc = self.coords[:, :, mm].copy()
            fc[:, 0] = 1.0 - fc[:, 0]
            from .data import normalize_landmarks

            ft = None
            if self.texture is not None:
                ft = self.texture[:, mm]
                if ft.ndim == 4:
                    ft = ft[:, :, :, ::-1]
                ft = np.ascontiguousarray(ft)
            self.flip = (normalize_landmarks(fc), ft)


def _batch_loss(cfg, store, coords, tex, U, labels, chunk=256):
    total = 0.0
    for s in range(0, len(labels), chunk):
        out, _ = M.forward(cfg, store, coords[s : s + chunk], None if tex is None else tex[s : s + chunk], U)
        total += M.total_loss(
            out.fusion_probs, out.structure_probs, out.texture_probs, labels[s : s + chunk],
            cfg.focal_gamma, cfg.focal_alpha,
        ) * len(labels[s : s + chunk])
    return total / len(labels)


def _inner_train_arrays(tree, arrays: _Arrays, config: TrainConfig, seed, want_initial=False) -> InnerResult:
    cfg = config.model
    if tree.n != cfg.num_landmarks or tree.n != arrays.n:
        raise ValidationError(f"tree has {tree.n} vertices, data/model have {arrays.n}/{cfg.num_landmarks}")
    U = topo.selection_matrix(topo.euler_tour(tree))
    init_ss, order_ss = inner_seed(seed).spawn(2)
    store = M.init_params(cfg, np.random.default_rng(init_ss))
    rng = np.random.default_rng(order_ss)
    N = len(arrays.labels)
    initial = None
    if want_initial or config.inner_epochs == 0:
        initial = _batch_loss(cfg, store, arrays.coords, arrays.texture, U, arrays.labels)
    epoch_losses = []
    step = 0
    for _ in range(config.inner_epochs):
        perm = rng.permutation(N)
        flips = rng.random(N) < config.flip_probability if arrays.flip is not None else np.zeros(N, bool)
        seen, acc = 0, 0.0
        for s in range(0, N, config.batch_size):
            idx = perm[s : s + config.batch_size]
            f = flips[idx]
            coords = arrays.coords[idx]
            tex = None if arrays.texture is None else arrays.texture[idx]
            if f.any():
                coords[f] = arrays.flip[0][idx[f]]
                if tex is not None:
                    tex[f] = arrays.flip[1][idx[f]]
            loss, _ = M.loss_and_grad(cfg, store, coords, tex, U, arrays.labels[idx])
            step += 1
            if not math.isfinite(loss):
                raise TrainingError(step)
            nn.adam_step(store, config.lr, config.beta1, config.beta2, config.adam_eps)
            acc += loss * len(idx)
            seen += len(idx)
        epoch_losses.append(acc / seen)
    final = epoch_losses[-1] if epoch_losses else initial
    return InnerResult(store, final, initial, epoch_losses)


def inner_train(tree, train_set: Dataset, config: TrainConfig, seed=None, want_initial=False) -> InnerResult:
    """Train both streams with the topology frozen; deterministic per seed.

    ``final_loss`` is the mean total loss over the last epoch (the initial
    full-set loss when ``inner_epochs == 0``).
    """
    seed = config.seed if seed is None else seed
    return _inner_train_arrays(tree, _Arrays(train_set, config.flip_probability), config, seed, want_initial)


# ---------------------------------------------------------------------------
# evaluation


def metrics_from_predictions(y_true, y_pred, k) -> Metrics:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if len(y_true) == 0:
        raise ValidationError("cannot evaluate on an empty set")
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    tp = np.diag(conf).astype(np.float64)
    col, row = conf.sum(axis=0), conf.sum(axis=1)
    prec = np.divide(tp, col, out=np.zeros(k), where=col > 0)
    rec = np.divide(tp, row, out=np.zeros(k), where=row > 0)
    f1 = np.divide(2 * prec * rec, prec + rec, out=np.zeros(k), where=(prec + rec) > 0)
    return Metrics(float(tp.sum() / conf.sum()), prec.tolist(), rec.tolist(), f1.tolist(), conf.tolist())


def evaluate(params, tree, validation: Dataset, model_cfg: M.ModelConfig, chunk=256) -> Metrics:
    if len(validation) == 0:
        raise ValidationError("cannot evaluate on an empty set")
    if tree.n != validation.n or tree.n != model_cfg.num_landmarks:
        raise ValidationError(f"tree has {tree.n} vertices, data has {validation.n}")
    U = topo.selection_matrix(topo.euler_tour(tree))
    coords, tex, y = validation.arrays()
    pred = []
    for s in range(0, len(y), chunk):
        p, _ = M.predict(model_cfg, params, coords[s : s + chunk], None if tex is None else tex[s : s + chunk], U)
        pred.append(p)
    return metrics_from_predictions(y, np.concatenate(pred), validation.num_classes)


# ---------------------------------------------------------------------------
# parallel candidate evaluation

_WORKER = {}


def _worker_init(arrays, config):
    _WORKER["arrays"] = arrays
    _WORKER["config"] = config


def _worker_loss(tree):
    try:
        return _inner_train_arrays(tree, _WORKER["arrays"], _WORKER["config"], _WORKER["config"].seed).final_loss
    except TrainingError as exc:
        log.warning("candidate diverged: %s", exc)
        return math.inf


class TreeObjective:
    """Maps edge-weight vectors to final inner-training loss, memoized by the
    traversal sequence (the model sees the tree only through it)."""

    def __init__(self, train_set: Dataset, config: TrainConfig, pool=None):
        self.n = train_set.n
        self.root = train_set.root
        self.config = config
        self.arrays = _Arrays(train_set, config.flip_probability)
        self.pool = pool
        self.cache = {}
        self.trained = 0

    def tree(self, weights):
        return topo.prim_mst(topo.build_graph(self.n, weights), self.root)

    def __call__(self, candidates):
        trees = [self.tree(w) for w in candidates]
        keys = [topo.euler_tour(t).vertices for t in trees]
        todo, todo_trees = [], []
        for key, t in zip(keys, trees):
            if key not in self.cache and key not in todo:
                todo.append(key)
                todo_trees.append(t)
        if todo:
            if self.pool is not None:
                losses = list(self.pool.map(_worker_loss, todo_trees))
            else:
                _worker_init(self.arrays, self.config)
                losses = [_worker_loss(t) for t in todo_trees]
            self.cache.update(zip(todo, losses))
            self.trained += len(todo)
        return np.array([self.cache[k] for k in keys])


def _make_pool(workers, arrays, config):
    if workers <= 1:
        return None
    methods = mp.get_all_start_methods()
    ctx = mp.get_context("fork" if "fork" in methods else methods[0])
    return ProcessPoolExecutor(workers, mp_context=ctx, initializer=_worker_init, initargs=(arrays, config))


@dataclass
class OuterResult:
    tree: topo.SpanningTree
    params: nn.ParamStore
    best_loss: float
    history: list
    weights: np.ndarray
    trees_trained: int


def outer_optimize(train_set: Dataset, config: TrainConfig, progress=None) -> OuterResult:
    """CCPSO2 over C(n, 2) edge weights; each candidate is scored by the final
    inner-training loss on the MST it induces."""
    n = train_set.n
    if config.model.num_landmarks != n:
        raise ValidationError(f"model expects {config.model.num_landmarks} landmarks, data has {n}")
    swarm = config.swarm_config(n)
    objective = TreeObjective(train_set, config)
    objective.pool = _make_pool(config.workers, objective.arrays, config)
    stale = [0, math.inf]

    def sink(row, state):
        row["trees_trained"] = objective.trained
        if progress is not None:
            progress(row)
        if row["best_fitness"] < stale[1]:
            stale[:] = [0, row["best_fitness"]]
        else:
            stale[0] += 1
        return config.patience is not None and stale[0] >= config.patience

    try:
        res = ccpso2.optimize(objective, swarm, progress_sink=sink, batch=True)
    finally:
        if objective.pool is not None:
            objective.pool.shutdown()
    tree = objective.tree(res.best_vector)
    inner = _inner_train_arrays(tree, objective.arrays, config, config.seed)
    return OuterResult(tree, inner.params, res.best_fitness, res.history, res.best_vector, objective.trained)


# ---------------------------------------------------------------------------
# baselines


def random_tree_baseline(train_set, validation, config: TrainConfig, num_trees, seed=0):
    """Train on MSTs of i.i.d. uniform weights; returns [(tree, validation RR)]."""
    if num_trees < 1:
        raise ValidationError("num_trees must be >= 1")
    rng = np.random.default_rng(seed)
    arrays = _Arrays(train_set, config.flip_probability)
    trees = [topo.random_tree(train_set.n, rng, train_set.root) for _ in range(num_trees)]
    pool = _make_pool(config.workers, arrays, config)
    try:
        if pool is None:
            params = [_inner_train_arrays(t, arrays, config, config.seed).params for t in trees]
        else:
            params = list(pool.map(_worker_params, trees))
    finally:
        if pool is not None:
            pool.shutdown()
    return [(t, evaluate(p, t, validation, config.model).recognition_rate) for t, p in zip(trees, params)]


def _worker_params(tree):
    return _inner_train_arrays(tree, _WORKER["arrays"], _WORKER["config"], _WORKER["config"].seed).params


def cross_tree_eval(tree, train_set, validation, config: TrainConfig) -> Metrics:
    """Train on the target data with a foreign (frozen) topology, then evaluate."""
    if tree.n != train_set.n:
        raise ValidationError(f"tree has {tree.n} vertices, target data has {train_set.n}")
    res = inner_train(tree, train_set, config)
    return evaluate(res.params, tree, validation, config.model)


def config_to_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["model"] = config.model.to_dict()
    d["group_sizes"] = list(config.group_sizes)
    d["bounds"] = list(config.bounds)
    return d


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValidationError(f"unknown train config key(s): {', '.join(sorted(unknown))}")
    if "model" in d and isinstance(d["model"], dict):
        d["model"] = M.ModelConfig.from_dict(d["model"])
    for k in ("group_sizes", "bounds"):
        if k in d:
            d[k] = tuple(d[k])
    return TrainConfig(**d)
