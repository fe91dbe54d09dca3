"""Cooperatively coevolving particle swarms (CCPSO2) for box-bounded minimization.

The decision vector is split into random groups; each group has its own swarm
whose particles are scored inside a context vector (the current global best
with only that group's coordinates swapped in). New positions are sampled
around personal and ring-local bests with Cauchy or Gaussian steps. When a
generation fails to improve the global best, a new group size is drawn and the
coordinates are re-partitioned.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SwarmConfig:
    dimensions: int
    group_sizes: tuple = (1, 5, 7)
    swarm_size: int = 10
    iterations: int = 40
    seed: int = 0
    bounds: tuple = (-1.0, 1.0)
    restarts: int = 1
    cauchy_prob: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "group_sizes", tuple(sorted(int(s) for s in self.group_sizes)))
        object.__setattr__(self, "bounds", (float(self.bounds[0]), float(self.bounds[1])))
        if self.dimensions < 1:
            raise ValidationError(f"dimensions must be positive, got {self.dimensions}")
        if not self.group_sizes or min(self.group_sizes) < 1:
            raise ValidationError("group sizes must be positive integers")
        if max(self.group_sizes) > self.dimensions:
            raise ValidationError(
                f"group size {max(self.group_sizes)} exceeds dimensions {self.dimensions}"
            )
        if self.swarm_size < 2:
            raise ValidationError(f"swarm_size must be >= 2, got {self.swarm_size}")
        if self.iterations < 1:
            raise ValidationError(f"iterations must be >= 1, got {self.iterations}")
        if not self.bounds[0] < self.bounds[1]:
            raise ValidationError(f"empty bounds {self.bounds}")
        if not 1 <= self.restarts <= 30:
            raise ValidationError(f"restarts must be in 1..30, got {self.restarts}")
        if not 0.0 <= self.cauchy_prob <= 1.0:
            raise ValidationError("cauchy_prob must lie in [0, 1]")


@dataclass
class SwarmState:
    positions: np.ndarray  # (swarm_size, dimensions)
    personal_bests: np.ndarray  # (swarm_size, dimensions)
    personal_fitness: np.ndarray  # (num_groups, swarm_size), scored in-context
    global_best: np.ndarray
    global_fitness: float
    current_group_size: int
    groups: list = field(default_factory=list)
    stagnation_flag: bool = True
    generation: int = 0
    evaluations: int = 0
    nan_count: int = 0

    def copy(self) -> "SwarmState":
        return SwarmState(
            self.positions.copy(),
            self.personal_bests.copy(),
            self.personal_fitness.copy(),
            self.global_best.copy(),
            self.global_fitness,
            self.current_group_size,
            [g.copy() for g in self.groups],
            self.stagnation_flag,
            self.generation,
            self.evaluations,
            self.nan_count,
        )


@dataclass
class OptimizeResult:
    best_vector: np.ndarray
    best_fitness: float
    history: list  # dicts: generation, best_fitness, evaluations (cumulative)
    evaluations: int
    nan_count: int
    runs: list  # per-restart (best_vector, best_fitness, history)


def reflect(x, low, high):
    """Fold values back into [low, high] by mirror reflection at the walls."""
    width = high - low
    y = np.mod(x - low, 2.0 * width)
    y = np.where(y > width, 2.0 * width - y, y)
    return low + y


def partition(dimensions: int, group_size: int, rng: np.random.Generator) -> list:
    perm = rng.permutation(dimensions)
    return [perm[k : k + group_size] for k in range(0, dimensions, group_size)]


def init_state(config: SwarmConfig, rng: np.random.Generator) -> SwarmState:
    low, high = config.bounds
    pos = rng.uniform(low, high, size=(config.swarm_size, config.dimensions))
    return SwarmState(
        positions=pos,
        personal_bests=pos.copy(),
        personal_fitness=np.full((0, config.swarm_size), np.inf),
        global_best=pos[0].copy(),
        global_fitness=math.inf,
        current_group_size=config.group_sizes[0],
        stagnation_flag=True,
    )


class _Evaluator:
    def __init__(self, objective, map_fn=None, batch=False):
        self.objective = objective
        self.map_fn = map_fn
        self.batch = batch
        self.count = 0
        self.nan_count = 0

    def __call__(self, candidates: np.ndarray) -> np.ndarray:
        if self.batch:
            f = np.asarray(self.objective(candidates), dtype=np.float64)
        elif self.map_fn is not None:
            f = np.asarray(list(self.map_fn(self.objective, list(candidates))), dtype=np.float64)
        else:
            f = np.array([self.objective(c) for c in candidates], dtype=np.float64)
        self.count += len(candidates)
        bad = np.isnan(f)
        if bad.any():
            self.nan_count += int(bad.sum())
            log.warning("objective returned NaN for %d candidate(s); scored +inf", int(bad.sum()))
            f = np.where(bad, np.inf, f)
        return f


def _ring_local_best(fitness: np.ndarray) -> np.ndarray:
    s = len(fitness)
    idx = np.empty(s, dtype=np.int64)
    for i in range(s):
        best = i
        for k in ((i - 1) % s, (i + 1) % s):
            if fitness[k] < fitness[best]:
                best = k
        idx[i] = best
    return idx


def step(state: SwarmState, evaluate, rng: np.random.Generator, config: SwarmConfig) -> SwarmState:
    """Advance one generation; returns a new state and leaves ``state`` intact.

    ``evaluate`` maps a (k, dimensions) candidate matrix to k fitness values.
    """
    st = state.copy()
    s = config.swarm_size
    low, high = config.bounds
    if st.stagnation_flag:
        st.current_group_size = int(rng.choice(config.group_sizes))
        st.groups = partition(config.dimensions, st.current_group_size, rng)
        st.personal_fitness = np.full((len(st.groups), s), np.inf)

    improved = False
    for j, g in enumerate(st.groups):
        cands = np.tile(st.global_best, (2 * s, 1))
        cands[:s, g] = st.positions[:, g]
        cands[s:, g] = st.personal_bests[:, g]
        f = evaluate(cands)
        st.evaluations += 2 * s
        fx, fy = f[:s], f[s:]
        take = fx < fy
        st.personal_bests[np.ix_(take, g)] = st.positions[np.ix_(take, g)]
        st.personal_fitness[j] = np.where(take, fx, fy)
        b = int(np.argmin(st.personal_fitness[j]))
        if st.personal_fitness[j, b] < st.global_fitness:
            st.global_best[g] = st.personal_bests[b, g]
            st.global_fitness = float(st.personal_fitness[j, b])
            improved = True

    for j, g in enumerate(st.groups):
        lbest = _ring_local_best(st.personal_fitness[j])
        y = st.personal_bests[:, g]
        ly = st.personal_bests[lbest][:, g]
        spread = np.abs(y - ly)
        use_cauchy = rng.random(y.shape) < config.cauchy_prob
        cauchy = y + rng.standard_cauchy(y.shape) * spread
        gauss = ly + rng.standard_normal(y.shape) * spread
        st.positions[:, g] = reflect(np.where(use_cauchy, cauchy, gauss), low, high)

    st.stagnation_flag = not improved
    st.generation += 1
    return st


def _run(objective, config, seed_seq, progress_sink, map_fn, batch):
    rng = np.random.default_rng(seed_seq)
    evaluate = _Evaluator(objective, map_fn, batch)
    state = init_state(config, rng)
    history = []
    for gen in range(config.iterations):
        state = step(state, evaluate, rng, config)
        row = {
            "generation": gen,
            "best_fitness": state.global_fitness,
            "evaluations": state.evaluations,
        }
        history.append(row)
        if progress_sink is not None and progress_sink(row, state):
            break
    state.nan_count = evaluate.nan_count
    return state, history


def optimize(objective, config: SwarmConfig, progress_sink=None, map_fn=None, batch=False) -> OptimizeResult:
    """Minimize ``objective`` over the ``config.bounds`` box.

    ``map_fn(objective, candidates)`` may dispatch evaluations concurrently; it
    must return results in candidate order. With ``batch=True`` the objective
    receives the whole (k, dimensions) candidate matrix at once.
    ``progress_sink(row, state)`` is called after every generation; a truthy
    return value stops the run early.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(config.restarts)
    runs, total_evals, total_nan = [], 0, 0
    best = None
    for r, ss in enumerate(seeds):
        state, history = _run(objective, config, ss, progress_sink, map_fn, batch)
        runs.append((state.global_best.copy(), state.global_fitness, history))
        total_evals += state.evaluations
        total_nan += state.nan_count
        if best is None or state.global_fitness < runs[best][1]:
            best = r
    vec, fit, hist = runs[best]
    return OptimizeResult(vec, fit, hist, total_evals, total_nan, runs)


def random_search(objective, dimensions, evaluations, bounds=(-1.0, 1.0), seed=0, batch=False, chunk=4096):
    """Uniform random sampling baseline with the same interface semantics."""
    rng = np.random.default_rng(seed)
    best_f, best_x, done = math.inf, None, 0
    while done < evaluations:
        k = min(chunk, evaluations - done)
        X = rng.uniform(bounds[0], bounds[1], size=(k, dimensions))
        f = np.asarray(objective(X) if batch else [objective(x) for x in X], dtype=np.float64)
        f = np.where(np.isnan(f), np.inf, f)
        i = int(np.argmin(f))
        if f[i] < best_f:
            best_f, best_x = float(f[i]), X[i].copy()
        done += k
    return best_x, best_f


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["generation", "best_fitness", "evaluations"])
        for row in history:
            w.writerow([row["generation"], repr(float(row["best_fitness"])), row["evaluations"]])
