"""Command-line entry point: ``latticeseg <command> [flags]``.

Every run option can also come from a ``--config`` file of ``key = value``
lines using the flag names (dashes or underscores); flags given on the
command line win. Reports go to stdout as ``metric<TAB>value`` lines.
"""
from __future__ import annotations

import argparse
import contextlib
import os
import sys

import numpy as np

from . import data
from .config import ModelConfig, read_pairs
from .errors import ConfigError, LatticeError

# options that steer a run rather than the model; everything else is a model field
RUN_KEYS = {
    "steps", "threads", "checkpoint", "out", "data", "count", "points", "frames",
    "velocity", "channels", "repeats", "deep",
}
DEFAULTS = {
    "seed": 0, "steps": 200, "count": 1, "points": 2000, "frames": 3, "velocity": 0.4,
    "channels": 64, "repeats": 3, "deep": False,
}
DATA_KEYS = ("count", "points", "frames", "velocity", "seed")
# the motion task needs a finer lattice and more sequences to generalise across layouts
TASK_DEFAULTS = {"motion": {"count": 32, "points_per_vertex": 8.0, "window": 3, "steps": 400}}


def _add_common(p, *names):
    flags = {
        "dim": dict(type=int, help="lattice dimension d (number of position coordinates)"),
        "sigma": dict(type=float, nargs="+", help="per-axis lattice scale; one value is broadcast"),
        "points-per-vertex": dict(type=float, help="target points per vertex when sigma is chosen automatically"),
        "task": dict(choices=("semantic-parts", "instances", "motion")),
        "steps": dict(type=int, help="optimiser steps"),
        "seed": dict(type=int, help="seed for data generation and initialisation"),
        "threads": dict(type=int, help="intra-op threads (default: all cores)"),
        "config": dict(help="key = value file; command-line flags override it"),
        "checkpoint": dict(help="checkpoint path"),
        "out": dict(help="output path"),
        "window": dict(type=int, help="temporal window T for the motion task"),
        "margins": dict(type=float, nargs=2, metavar=("DELTA_V", "DELTA_D"), help="discriminative-loss margins"),
        "data": dict(help="cloud file, sequence manifest, or generated dataset directory"),
        "count": dict(type=int, help="number of synthetic clouds or sequences"),
        "points": dict(type=int, help="points per synthetic cloud"),
        "frames": dict(type=int, help="frames per synthetic motion sequence"),
        "velocity": dict(type=float, help="per-frame displacement of the moving blob"),
        "channels": dict(type=int, help="feature channels"),
        "repeats": dict(type=int, help="timing repeats (best is reported)"),
    }
    for name in names:
        p.add_argument(f"--{name}", default=None, **flags[name])


def build_parser():
    parser = argparse.ArgumentParser(prog="latticeseg", description="Sparse permutohedral lattice segmentation networks.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("selftest", help="geometry, adjointness and gradient-check suites")
    _add_common(p, "dim", "seed", "threads", "config")
    p = sub.add_parser("gen", help="write a synthetic dataset")
    _add_common(p, "task", "seed", "out", "count", "points", "frames", "velocity", "config")
    for name in ("train", "eval"):
        p = sub.add_parser(name, help="train a model" if name == "train" else "report metrics of a checkpoint")
        _add_common(p, "dim", "sigma", "points-per-vertex", "task", "steps", "seed", "threads", "config",
                    "checkpoint", "out", "window", "margins", "data", "count", "points", "frames", "velocity")
        if name == "train":
            p.add_argument("--deep", action="store_true", default=None, help="use the three-level configuration")
    p = sub.add_parser("infer", help="write predicted labels for a cloud or sequence")
    _add_common(p, "checkpoint", "data", "out", "threads", "config", "seed")
    p = sub.add_parser("bench", help="operator throughput report")
    _add_common(p, "points", "dim", "channels", "seed", "repeats", "threads", "points-per-vertex", "config")
    return parser


def _options(args, defaults=DEFAULTS):
    """Merge defaults, then config-file pairs, then explicit flags into one dict with underscore keys."""
    known = RUN_KEYS | {f.replace("-", "_") for f in vars(args)} | set(ModelConfig.__dataclass_fields__) | {"margins"}
    opts = dict(defaults)
    if getattr(args, "config", None):
        with open(args.config) as fh:
            for key, value in read_pairs(fh.read()).items():
                key = key.replace("-", "_")
                if key not in known:
                    raise ConfigError(f"unknown option {key!r} in {args.config}")
                opts[key] = value
    for key, value in vars(args).items():
        if value is not None and key not in ("command", "config"):
            opts[key] = value
    return opts


def _as(kind, value):
    if isinstance(value, str):
        if kind is bool:
            return value.strip().lower() in ("1", "true", "yes")
        if kind is list:
            return [float(v) for v in value.split()]
        return kind(value)
    return value


def _model_config(opts, base=None):
    pairs = {}
    for key, value in opts.items():
        if key in RUN_KEYS or key == "margins" or key == "sigma":
            continue
        pairs[key] = " ".join(str(v) for v in value) if isinstance(value, (list, tuple)) else str(value)
    if "margins" in opts:
        dv, dd = _as(list, opts["margins"]) if isinstance(opts["margins"], str) else opts["margins"]
        pairs["delta_v"], pairs["delta_d"] = str(float(dv)), str(float(dd))
    if _as(bool, opts.get("deep", False)) and base is None:
        base = ModelConfig.deep()
    cfg = ModelConfig.from_pairs(pairs, base)
    if "sigma" in opts:
        sig = _as(list, opts["sigma"])
        cfg.sigma = tuple(float(s) for s in (sig * cfg.dim if len(sig) == 1 else sig))
    return cfg


@contextlib.contextmanager
def _threads(opts):
    n = opts.get("threads")
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(n)):
        yield


def _report(metrics, stream=None):
    stream = stream or sys.stdout
    for key, value in metrics.items():
        if isinstance(value, (float, np.floating)):
            value = repr(float(value))
        stream.write(f"{key}\t{value}\n")
    stream.flush()


def _dataset(opts, task):
    if opts.get("data"):
        found_task, items = data.load_dataset(opts["data"])
        if found_task is not None and task is not None and found_task != task:
            raise ConfigError(f"dataset was generated for task {found_task!r}, not {task!r}")
        return items
    return data.synthesize(
        task, int(opts["seed"]), int(opts["count"]), int(opts["points"]), int(opts["frames"]), float(opts["velocity"])
    )


def _record_data_options(cfg, opts):
    for key in DATA_KEYS:
        cfg.extra[f"data_{key}"] = str(opts[key])


def _inputs_width(items):
    first = items[0][0] if isinstance(items[0], list) else items[0]
    return first.features.shape[1], first.dim


def evaluate(model, samples):
    """Metrics over prepared samples (pooled over all points)."""
    from .metrics import accuracy, miou, sbd
    from .network import predict

    cfg = model.config
    out = {}
    if cfg.head == "instance":
        scores, k_pred, k_true = [], 0, 0
        for s in samples:
            pred = predict(model, s)
            keep = s.instance >= 0
            scores.append(sbd(pred[keep], s.instance[keep]))
            k_pred += len(np.unique(pred[keep]))
            k_true += len(np.unique(s.instance[keep]))
        out["sbd"] = float(np.mean(scores))
        out["instances_pred"] = k_pred
        out["instances_true"] = k_true
        return out
    preds = np.concatenate([predict(model, s) for s in samples])
    gts = np.concatenate([s.semantic for s in samples])
    iou, mean = miou(preds, gts, cfg.n_classes)
    out["accuracy"] = accuracy(preds, gts)
    out["miou"] = mean
    names = data.SEMANTIC_CLASSES.get(cfg.task, [str(i) for i in range(cfg.n_classes)])
    for k in range(cfg.n_classes):
        out[f"iou.{names[k]}"] = float(iou[k])
        out[f"accuracy.{names[k]}"] = accuracy(preds, gts, k)
    return out


def cmd_selftest(opts):
    from .selftest import run_selftest

    results = run_selftest(dim=int(opts.get("dim", 3)), seed=int(opts["seed"]))
    metrics = {}
    for r in results:
        metrics[f"{r.name}"] = "pass" if r.passed else "fail"
        metrics[f"{r.name}.detail"] = r.detail
    _report(metrics)
    return 0 if all(r.passed for r in results) else 1


def cmd_gen(opts):
    if not opts.get("task"):
        raise ConfigError("gen needs --task")
    if not opts.get("out"):
        raise ConfigError("gen needs --out DIR")
    entries = data.gen_synthetic(
        opts["task"], int(opts["seed"]), opts["out"], int(opts["count"]), int(opts["points"]),
        int(opts["frames"]), float(opts["velocity"]),
    )
    _report({"task": opts["task"], "items": len(entries), "out": opts["out"]})
    return 0


def cmd_train(opts):
    from .checkpoint import save_checkpoint
    from .network import build_model, prepare, train

    task = opts.setdefault("task", "semantic-parts")
    items = _dataset(opts, task)
    cfg = _model_config(opts)
    cfg.in_features, data_dim = _inputs_width(items)
    if "dim" in opts and cfg.dim != data_dim:
        raise ConfigError(f"--dim {cfg.dim} does not match the data dimension {data_dim}")
    cfg.dim = data_dim
    if not opts.get("data"):
        _record_data_options(cfg, opts)
    cfg.validate()
    model = build_model(cfg)
    samples = [prepare(cfg, item) for item in items]

    def log(i, value, state):
        if (i + 1) % 10 == 0 or i == 0:
            print(f"step {i + 1} loss {value:.6f} lr {state.lr:.3g}", file=sys.stderr)

    history, _ = train(model, samples, int(opts["steps"]), log=log)
    path = opts.get("checkpoint") or opts.get("out") or "model.ckpt"
    save_checkpoint(path, model)
    metrics = {"steps": len(history), "final_loss": history[-1] if history else float("nan"),
               "parameters": model.parameter_count(), "model_checksum": model.checksum(),
               "config_checksum": cfg.checksum()}
    metrics.update({f"train.{k}": v for k, v in evaluate(model, samples).items()})
    metrics["checkpoint"] = path
    _report(metrics)
    return 0


def _require_checkpoint(opts):
    from .checkpoint import load_checkpoint

    path = opts.get("checkpoint")
    if not path:
        raise LatticeError("no checkpoint given; pass --checkpoint PATH (create one with 'latticeseg train')")
    if not os.path.exists(path):
        raise LatticeError(f"no checkpoint at {path}")
    return load_checkpoint(path)


def cmd_eval(opts):
    from .network import prepare

    model = _require_checkpoint(opts)
    cfg = model.config
    items = _dataset(opts, cfg.task)
    samples = [prepare(cfg, item) for item in items]
    _report(evaluate(model, samples))
    return 0


def cmd_infer(opts):
    from .network import predict, prepare

    model = _require_checkpoint(opts)
    if not opts.get("data"):
        raise ConfigError("infer needs --data (a cloud file or sequence manifest)")
    if not opts.get("out"):
        raise ConfigError("infer needs --out for the label file")
    _, items = data.load_dataset(opts["data"])
    labels = np.concatenate([predict(model, prepare(model.config, item)) for item in items])
    data.save_labels(opts["out"], labels)
    _report({"points": len(labels), "labels": len(np.unique(labels)), "out": opts["out"]})
    return 0


def cmd_bench(opts):
    from .bench import run_bench

    kw = dict(points=int(opts.get("points", 100_000)), dim=int(opts.get("dim", 3)),
              channels=int(opts["channels"]), seed=int(opts["seed"]), repeats=int(opts["repeats"]))
    if "points_per_vertex" in opts:
        kw["points_per_vertex"] = float(opts["points_per_vertex"])
    _report(run_bench(**kw))
    return 0


COMMANDS = {"selftest": cmd_selftest, "gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
            "infer": cmd_infer, "bench": cmd_bench}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        defaults = dict(DEFAULTS)
        if args.command == "bench":
            defaults["points"] = 100_000
        defaults.update(TASK_DEFAULTS.get(getattr(args, "task", None), {}))
        if args.command == "eval" and not args.data and args.checkpoint and os.path.exists(args.checkpoint):
            # regenerate the synthetic training set recorded in the checkpoint unless overridden
            from .checkpoint import load_checkpoint

            extra = load_checkpoint(args.checkpoint).config.extra
            defaults.update({k: extra[f"data_{k}"] for k in DATA_KEYS if f"data_{k}" in extra})
        opts = _options(args, defaults)
        with _threads(opts):
            return COMMANDS[args.command](opts)
    except (LatticeError, OSError, ValueError) as exc:
        print(f"latticeseg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
