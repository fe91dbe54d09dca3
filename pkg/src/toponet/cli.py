"""Command-line entry point: synth, train, eval, tree, baseline, gradcheck.

Every subcommand reads an optional flat JSON config (``--config``); explicit
flags override the file. Exit codes: 0 success, 1 usage/config/input error,
2 runtime or numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import ccpso2
from . import data as D
from . import gradcheck
from . import model as M
from . import neuralnet as nn
from . import topology as topo
from . import trainer as T
from .errors import CapacityError, DimensionError, ParseError, TrainingError, UpdateError, ValidationError

log = logging.getLogger("toponet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

# keys that change how a run executes but not what it computes; they are
# left out of the run-directory snapshot so outputs compare byte-for-byte
_EXECUTION_ONLY = ("workers", "out")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dataset: str = "data/synthetic"
    out: str = "runs/default"
    embeddings_dir: str | None = None
    train_fraction: float = 0.8
    random_trees: int = 20
    # synthetic data
    num_landmarks: int = 15
    num_classes: int = 4
    samples_per_class: int = 200
    noise_std: float = 0.05
    deform_scale: float = 0.3
    image_size: int = 60
    patch_size: int = 17
    texture_contrast: float = 0.15
    rotation_deg: float = 5.0
    skew: float = 0.0
    # model
    hidden_dim: int = 32
    stream_embed_dim: int = 32
    fusion_dim: int = 32
    patch_embed_dim: int = 16
    conv_channels: tuple = (4, 8)
    cell: str = "lstm"
    bidirectional: bool = False
    peephole: bool = True
    texture_input: str = "patches"
    embedding_dim: int = 16
    use_structure: bool = True
    use_texture: bool = True
    use_fusion_gate: bool = True
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    # inner training
    inner_epochs: int = 10
    batch_size: int = 32
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    flip_probability: float = 0.25
    patience: int | None = None
    workers: int = 1
    # outer CCPSO2
    iterations: int = 10
    swarm_size: int = 6
    group_sizes: tuple = (1, 5, 7)
    bounds: tuple = (-1.0, 1.0)
    restarts: int = 1

    def __post_init__(self):
        for k in ("conv_channels", "group_sizes", "bounds"):
            object.__setattr__(self, k, tuple(getattr(self, k)))
        if not 0.0 < self.train_fraction < 1.0:
            raise ValidationError("train_fraction must lie in (0, 1)")
        if self.random_trees < 0:
            raise ValidationError("random_trees must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ValidationError(f"unknown config key {key!r}")
        return cls(**d)

    def to_dict(self, snapshot=False) -> dict:
        d = asdict(self)
        for k in ("conv_channels", "group_sizes", "bounds"):
            d[k] = list(d[k])
        if snapshot:
            for k in _EXECUTION_ONLY:
                d.pop(k)
        return d

    def synthetic(self) -> D.SyntheticConfig:
        return D.SyntheticConfig(
            n=self.num_landmarks,
            num_classes=self.num_classes,
            samples_per_class=self.samples_per_class,
            noise_std=self.noise_std,
            deform_scale=self.deform_scale,
            seed=self.seed,
            image_size=self.image_size,
            patch_size=self.patch_size,
            texture_contrast=self.texture_contrast,
            rotation_deg=self.rotation_deg,
            skew=self.skew,
        )

    def model(self) -> M.ModelConfig:
        keys = {f.name for f in fields(M.ModelConfig)}
        return M.ModelConfig(**{k: v for k, v in asdict(self).items() if k in keys})

    def train(self) -> T.TrainConfig:
        keys = {f.name for f in fields(T.TrainConfig)} - {"model"}
        return T.TrainConfig(model=self.model(), **{k: v for k, v in asdict(self).items() if k in keys})


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}", exc.pos) from None
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return RunConfig.from_dict(doc)


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = {}
    for key in ("seed", "workers"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    if overrides:
        d = asdict(cfg)
        d.update(overrides)
        cfg = RunConfig(**d)
    return cfg


def _write(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load_data(cfg: RunConfig, path=None):
    ds = D.load_dataset(path or cfg.dataset, cfg.embeddings_dir)
    train, val = D.split(ds, cfg.train_fraction, cfg.seed)
    return ds, train, val


def _read_tree(path):
    with open(path) as fh:
        return topo.tree_from_json(fh.read())


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    cfg = resolve_config(args)
    out = args.out or cfg.dataset
    ds = D.synth_generate(cfg.synthetic())
    D.save_dataset(ds, out)
    log.info("wrote %d samples (%d landmarks, %d classes) to %s", len(ds), ds.n, ds.num_classes, out)
    return EXIT_OK


def cmd_train(args):
    cfg = resolve_config(args)
    run_dir = args.out or cfg.out
    snapshot = _dump_json(cfg.to_dict(snapshot=True))
    cfg_path = os.path.join(run_dir, "config.json")
    if args.resume and os.path.exists(os.path.join(run_dir, "metrics.json")):
        with open(cfg_path) as fh:
            if fh.read() != snapshot:
                raise ValidationError(f"{run_dir} holds a finished run with a different config")
        print(f"run in {run_dir} is already complete; nothing to do", file=sys.stderr)
        return EXIT_OK
    _, train, val = _load_data(cfg, args.dataset)
    tc = cfg.train()
    os.makedirs(run_dir, exist_ok=True)
    _write(cfg_path, snapshot)

    def progress(row):
        log.info(
            "generation %d best_loss %.6f evaluations %d trees_trained %d",
            row["generation"], row["best_fitness"], row["evaluations"], row["trees_trained"],
        )

    res = T.outer_optimize(train, tc, progress)
    ccpso2.write_history_csv(res.history, os.path.join(run_dir, "history.csv"))
    _write(os.path.join(run_dir, "best_tree.json"), topo.tree_to_json(res.tree) + "\n")
    meta = {"model": tc.model.to_dict(), "tree": topo.tree_digest(res.tree)}
    _write(os.path.join(run_dir, "checkpoint.json"), nn.save_checkpoint(res.params, meta) + "\n")
    metrics = T.evaluate(res.params, res.tree, val, tc.model)

    summary = {
        "validation": metrics.to_dict(),
        "best_loss": res.best_loss,
        "trees_trained": res.trees_trained,
        "tree": topo.tree_digest(res.tree),
    }
    if cfg.random_trees > 0:
        rows = T.random_tree_baseline(train, val, tc, cfg.random_trees, cfg.seed)
        _write(os.path.join(run_dir, "random_baseline.csv"), _baseline_csv("random", rows))
        summary["random_baseline"] = _spread([rr for _, rr in rows])
    _write(os.path.join(run_dir, "metrics.json"), _dump_json(summary))
    log.info("learned tree %s: validation rr %.4f", summary["tree"], metrics.recognition_rate)
    return EXIT_OK


def cmd_eval(args):
    store, meta = nn.load_checkpoint(open(args.checkpoint).read())
    if "model" not in meta:
        raise ValidationError(f"{args.checkpoint}: checkpoint carries no model config")
    model_cfg = M.ModelConfig.from_dict(meta["model"])
    tree = _read_tree(args.tree)
    cfg = load_config(args.config)
    ds = D.load_dataset(args.dataset, cfg.embeddings_dir)
    if ds.n != tree.n or ds.n != model_cfg.num_landmarks:
        raise ValidationError(
            f"landmark count mismatch: data {ds.n}, tree {tree.n}, model {model_cfg.num_landmarks}"
        )
    metrics = T.evaluate(store, tree, ds, model_cfg)
    if args.confusion_csv:
        with open(args.confusion_csv, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(metrics.confusion)
    sys.stdout.write(_dump_json(metrics.to_dict()))
    return EXIT_OK


def cmd_tree(args):
    tree = _read_tree(args.tree)
    if args.dot:
        sys.stdout.write(topo.tree_to_dot(tree))
    else:
        print(f"n {tree.n}")
        print(f"root {tree.root}")
        print(f"depth {tree.depth()}")
        print(f"max_degree {tree.max_degree()}")
        print(f"traversal {topo.euler_tour(tree).one_based()}")
    return EXIT_OK


def _spread(rrs):
    rrs = np.asarray(rrs, dtype=np.float64)
    return {
        "count": int(len(rrs)),
        "mean_rr": float(rrs.mean()),
        "min_rr": float(rrs.min()),
        "max_rr": float(rrs.max()),
        "spread": float(rrs.max() - rrs.min()),
    }


def _baseline_csv(kind, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "tree", "rr"])
    for tree, rr in rows:
        w.writerow([kind, topo.tree_digest(tree), repr(float(rr))])
    return buf.getvalue()


def cmd_baseline(args):
    cfg = resolve_config(args)
    ds, train, val = _load_data(cfg, args.dataset)
    tc = cfg.train()
    if args.random_trees is not None:
        if args.random_trees < 2:
            raise ValidationError("--random-trees needs at least 2 trees")
        kind = "random"
        rows = T.random_tree_baseline(train, val, tc, args.random_trees, cfg.seed)
    else:
        if args.human_tree is not None:
            kind = "human"
            tree = topo.chain_tree(ds.n, ds.root) if args.human_tree == "chain" else _read_tree(args.human_tree)
        else:
            kind = "cross"
            tree = _read_tree(args.cross_tree)
        if tree.n != ds.n:
            raise ValidationError(f"tree has {tree.n} vertices, dataset has {ds.n} landmarks")
        rows = [(tree, T.cross_tree_eval(tree, train, val, tc).recognition_rate)]
    text = _baseline_csv(kind, rows)
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    stats = _spread([rr for _, rr in rows])
    print(
        "{kind}: trees={count} mean_rr={mean_rr:.4f} min_rr={min_rr:.4f} max_rr={max_rr:.4f} "
        "spread={spread:.4f}".format(kind=kind, **stats),
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_gradcheck(args):
    report = gradcheck.check_model(
        seed=args.seed if args.seed is not None else 0,
        cell=args.cell,
        bidirectional=args.bidirectional,
        max_entries=args.max_entries,
    )
    print(gradcheck.format_report(report))
    return EXIT_OK if report.passed else EXIT_RUNTIME


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="toponet", description="Tree-topology landmark sequence classifier experiments")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_help):
        sp.add_argument("--config", help="flat JSON run config")
        sp.add_argument("--seed", type=int, help="global seed (overrides config)")
        sp.add_argument("--workers", type=int, help="parallel candidate evaluations (overrides config)")
        sp.add_argument("--out", help=out_help)

    sp = sub.add_parser("synth", help="generate a synthetic landmark dataset")
    common(sp, "dataset directory (default: config 'dataset')")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="learn a tree topology and train the classifier")
    common(sp, "run directory (default: config 'out')")
    sp.add_argument("--dataset", help="dataset directory (default: config 'dataset')")
    sp.add_argument("--resume", action="store_true", help="skip if the run directory already holds a finished run")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint and tree on a dataset")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--tree", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--config", help="only 'embeddings_dir' is read")
    sp.add_argument("--confusion-csv", help="also write the k x k confusion matrix here")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("tree", help="inspect a tree JSON file")
    sp.add_argument("tree")
    mode = sp.add_mutually_exclusive_group()
    mode.add_argument("--dot", action="store_true", help="print Graphviz DOT")
    mode.add_argument("--summary", action="store_true", help="print n, root, depth, max degree (default)")
    sp.set_defaults(func=cmd_tree)

    sp = sub.add_parser("baseline", help="random-tree, human-tree or cross-tree comparison")
    common(sp, "CSV report path (default: standard output)")
    sp.add_argument("--dataset", help="dataset directory (default: config 'dataset')")
    mode = sp.add_mutually_exclusive_group(required=True)
    mode.add_argument("--random-trees", type=int, metavar="N")
    mode.add_argument("--human-tree", metavar="PATH|chain")
    mode.add_argument("--cross-tree", metavar="PATH")
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every parameter block")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--cell", choices=("lstm", "gru"), default="lstm")
    sp.add_argument("--bidirectional", action="store_true")
    sp.add_argument("--max-entries", type=int, help="entries sampled per block (default: all)")
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ValidationError, ParseError, DimensionError, CapacityError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, UpdateError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
