"""``zernet`` command line.

Subcommands: ``basis``, ``patch``, ``prepare``, ``train``, ``predict``,
``eval``.  Each prints its effective configuration as a one-line JSON
banner on stderr and writes plot-ready CSV/JSON under ``--out``.  Errors
print ``error: <ClassName>: <message>`` and exit with status 1.
"""

import argparse
from dataclasses import fields
import json
import logging
import os
from pathlib import Path
import sys
import warnings

import numpy as np
import yaml

from . import __version__
from .errors import ConfigError, ZernetError

log = logging.getLogger("zernet")

MODEL_KEYS = {
    "architecture": "conv16,conv32,lin64,lin8,softmax",
    "r0": None,
    "k": 21,
    "s": 4,
    "directional": False,
    "loss": "cross_entropy",
    "seed": 0,
    "lr": 1e-3,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
    "epochs": 200,
    "checkpoint_interval": 0,
}


def _parse_value(text):
    return yaml.safe_load(text) if text != "" else ""


def load_config(path, overrides, allowed, defaults=None):
    """Flat key-value config: file values, then ``key=value`` overrides.

    Unknown keys are rejected.
    """
    cfg = dict(defaults or {})
    if path:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a flat key-value mapping")
        cfg.update(loaded)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        cfg[key.strip()] = _parse_value(value.strip())
    unknown = set(cfg) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key, value in cfg.items():
        if isinstance(value, (dict,)):
            raise ConfigError(f"config key {key!r} must be a scalar or list")
    return cfg


def _seed(args):
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("ZERNET_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"ZERNET_SEED={env!r} is not an integer") from None
    return None


def _banner(command, settings):
    print(json.dumps({"command": command, **settings}, sort_keys=True, default=str),
          file=sys.stderr)


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)
                              for v in row) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_basis(args):
    from .pipeline import ensure_output_dir
    from .zernike import basis_matrix, gram_matrix

    _banner("basis", {"k": args.k, "grid": args.grid, "quadrature": args.quadrature,
                      "out": str(args.out)})
    out = ensure_output_dir(args.out, args.force)
    r = np.linspace(0.0, 1.0, args.grid)
    theta = 2 * np.pi * np.arange(args.grid) / args.grid
    rr, tt = np.meshgrid(r, theta, indexing="ij")
    values = basis_matrix(rr.ravel(), tt.ravel(), args.k)
    header = ["r", "theta"] + [f"Z{j}" for j in range(1, args.k + 1)]
    _write_csv(out / "basis.csv", header,
               (row for row in np.column_stack([rr.ravel(), tt.ravel(), values]).tolist()))
    gram = gram_matrix(args.k, args.quadrature, args.quadrature)
    _write_csv(out / "gram.csv", [f"Z{j}" for j in range(1, args.k + 1)], gram.tolist())
    dev = float(np.abs(gram - np.eye(args.k)).max())
    print(json.dumps({"max_gram_deviation": dev}))
    return 0


def _resolve_mesh(args):
    from .mesh import generate_synthetic, load_mesh

    if args.mesh:
        return load_mesh(args.mesh)
    kind, _, params = args.synthetic.partition(":")
    kw = {}
    for item in filter(None, params.split(",")):
        key, value = item.split("=")
        kw[key] = _parse_value(value)
    return generate_synthetic(kind, **kw)


def cmd_patch(args):
    from .expmap import build_neighbor_graph, compute_patches, default_sample_count, patch_rows
    from .mesh import uniform_sample_surface
    from .pipeline import ensure_output_dir

    seed = _seed(args) or 0
    mesh = _resolve_mesh(args)
    n_samples = args.samples or default_sample_count(mesh, args.r0)
    _banner("patch", {"mesh": args.mesh, "synthetic": args.synthetic, "r0": args.r0,
                      "samples": n_samples, "min_samples": args.min_samples, "seed": seed,
                      "method": args.method, "reach": args.reach, "out": str(args.out)})
    out = ensure_output_dir(args.out, args.force)
    samples = uniform_sample_surface(mesh, n_samples, seed)
    graph = build_neighbor_graph(mesh, samples, args.reach)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        patches, failed = compute_patches(mesh, graph, args.r0, args.min_samples, seed, args.method)
    for v, why in sorted(failed.items()):
        print(f"warning: sparse patch: {why}", file=sys.stderr)
    rows = (row for p in patches if p is not None for row in patch_rows(p))
    _write_csv(out / "patches.csv", ["center_id", "sample_id", "r", "theta"], rows)
    print(json.dumps({"patches": sum(p is not None for p in patches), "sparse": len(failed)}))
    return 0


def cmd_prepare(args):
    from .pipeline import BundleConfig, prepare, save_bundle, bundle_hash

    allowed = {f.name for f in fields(BundleConfig)}
    cfg = load_config(args.config, args.set, allowed)
    seed = _seed(args)
    if seed is not None and "seed" not in cfg:
        cfg["seed"] = seed
    config = BundleConfig.from_dict(cfg)
    labels = args.labels or None
    if labels is not None and len(labels) != len(args.mesh):
        raise ConfigError("--labels must give one file per --mesh")
    if args.fields and len(args.fields) != len(args.mesh):
        raise ConfigError("--fields must give one file per --mesh")
    _banner("prepare", {**config.to_dict(), "mesh": args.mesh, "labels": labels,
                        "fields": args.fields, "out": str(args.out)})
    bundle = prepare(args.mesh, labels, config, args.fields, threads=args.threads)
    save_bundle(bundle, args.out, args.force)
    print(json.dumps({"bundle_hash": bundle_hash(args.out), "meshes": len(bundle.meshes)}))
    return 0


def _model_from_config(cfg, bundle):
    from .network import ModelSpec, TrainConfig, parse_architecture

    r0 = cfg["r0"] if cfg["r0"] is not None else bundle.config.r0[0]
    layers = parse_architecture(cfg["architecture"], float(r0), cfg["k"], cfg["s"], cfg["directional"])
    in_ch = bundle.meshes[0].x.shape[1]
    spec = ModelSpec(layers, in_ch, cfg["loss"], cfg["seed"])
    train_cfg = TrainConfig(cfg["lr"], cfg["beta1"], cfg["beta2"], cfg["eps"], cfg["epochs"],
                            cfg["checkpoint_interval"])
    return spec, train_cfg


def cmd_train(args):
    from .network import train
    from .pipeline import ensure_output_dir, load_bundle, save_checkpoint

    cfg = load_config(args.config, args.set, MODEL_KEYS, MODEL_KEYS)
    seed = _seed(args)
    if seed is not None:
        cfg["seed"] = seed
    bundle = load_bundle(args.bundle)
    spec, train_cfg = _model_from_config(cfg, bundle)
    _banner("train", {**cfg, "bundle": str(args.bundle), "out": str(args.out)})
    if any(m.target is None for m in bundle.meshes):
        raise ConfigError("every training mesh needs labels/targets")
    out = ensure_output_dir(args.out, args.force)
    data = bundle.prepared(spec.patch_keys)
    ckdir = out / "checkpoints"

    def checkpoint(model, epoch):
        ckdir.mkdir(exist_ok=True)
        save_checkpoint(model, ckdir / f"epoch_{epoch:04d}.zck", epoch)

    result = train(spec, train_cfg, data, checkpoint)
    save_checkpoint(result.model, out / "model.zck", train_cfg.epochs)
    _write_csv(out / "loss_history.csv", ["epoch", "loss", "metric"], result.history)
    last = result.history[-1] if result.history else (0, float("nan"), float("nan"))
    print(json.dumps({"epochs": last[0], "loss": last[1], "metric": last[2]}))
    return 0


def cmd_predict(args):
    from .pipeline import ensure_output_dir, load_bundle, load_checkpoint

    _banner("predict", {"bundle": str(args.bundle), "checkpoint": str(args.checkpoint),
                        "out": str(args.out)})
    bundle = load_bundle(args.bundle)
    model, _ = load_checkpoint(args.checkpoint)
    out = ensure_output_dir(args.out, args.force)
    data = bundle.prepared(model.spec.patch_keys)
    summary = {}
    for art, d in zip(bundle.meshes, data):
        pred = model.predict(d)
        pred = pred.reshape(len(pred), -1)
        header = ["vertex_id"] + [f"c{i}" for i in range(pred.shape[1])]
        if model.spec.loss == "cross_entropy":
            rows = ([i, int(p[0])] for i, p in enumerate(pred))
        else:
            rows = ([i] + [float(v) for v in p] for i, p in enumerate(pred))
        _write_csv(out / f"{art.name}.csv", header, rows)
        if art.target is not None and model.spec.loss == "cross_entropy":
            summary[art.name] = float(np.mean(pred[:, 0] == art.target[:, 0]))
    print(json.dumps({"meshes": len(data), "accuracy": summary}))
    return 0


def cmd_eval(args):
    from .mesh import load_field_csv, load_mesh
    from .metrics import evaluate_classification, evaluate_correspondence, evaluate_regression
    from .pipeline import ensure_output_dir

    _banner("eval", {"predictions": str(args.predictions), "truth": str(args.truth),
                     "task": args.task, "mesh": args.mesh, "thresholds": args.thresholds,
                     "out": str(args.out)})
    pred = load_field_csv(args.predictions)
    truth = load_field_csv(args.truth)
    if pred.shape != truth.shape:
        raise ConfigError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    out = ensure_output_dir(args.out, args.force)
    if args.task == "classification":
        metrics = {"accuracy": evaluate_classification(pred[:, 0], truth[:, 0])}
    elif args.task == "regression":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            metrics = evaluate_regression(pred.ravel(), truth.ravel(), args.thresholds)
    else:
        if not args.mesh:
            raise ConfigError("correspondence evaluation needs --mesh")
        curve = evaluate_correspondence(pred[:, 0].astype(int), truth[:, 0].astype(int),
                                        load_mesh(args.mesh))
        _write_csv(out / "curve.csv", ["radius_fraction", "fraction_within"], curve.tolist())
        metrics = {"accuracy": evaluate_classification(pred[:, 0], truth[:, 0]),
                   "curve": curve[:, 1].tolist()}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(json.dumps(metrics, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser


def _common(p, config=False):
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.add_argument("--threads", type=int, default=0, help="worker threads (0 = auto)")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    if config:
        p.add_argument("--config", type=Path, help="flat key-value YAML config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable, applied after --config)")


def build_parser():
    parser = argparse.ArgumentParser(prog="zernet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"zernet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("basis", help="tabulate Zernike bases and their Gram matrix")
    p.add_argument("--k", type=int, default=21, help="number of bases")
    p.add_argument("--grid", type=int, default=64, help="polar grid points per axis")
    p.add_argument("--quadrature", type=int, default=400, help="quadrature nodes per axis")
    _common(p)
    p.set_defaults(func=cmd_basis)

    p = sub.add_parser("patch", help="dump geodesic patches as CSV")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--mesh", help="OFF/OBJ mesh file")
    src.add_argument("--synthetic", help="fixture spec, e.g. planar_disk:radius=1,res=16")
    p.add_argument("--r0", type=float, required=True, help="patch radius")
    p.add_argument("--samples", type=int, default=0, help="surface samples (0 = auto)")
    p.add_argument("--min-samples", type=int, default=0, help="densify patches to this size")
    p.add_argument("--method", choices=("unfold", "graph"), default="unfold")
    p.add_argument("--reach", choices=("edge", "vertex"), default="edge",
                   help="face adjacency used to join graph nodes")
    p.add_argument("--seed", type=int, default=None, help="RNG seed (default $ZERNET_SEED or 0)")
    _common(p)
    p.set_defaults(func=cmd_patch)

    p = sub.add_parser("prepare", help="build an experiment bundle")
    p.add_argument("--mesh", nargs="+", required=True, help="mesh files")
    p.add_argument("--labels", nargs="+", help="per-vertex label/target CSVs, one per mesh")
    p.add_argument("--fields", nargs="+", help="per-vertex input field CSVs, one per mesh")
    p.add_argument("--seed", type=int, default=None, help="RNG seed (default $ZERNET_SEED)")
    _common(p, config=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model on a bundle")
    p.add_argument("--bundle", required=True, type=Path)
    p.add_argument("--seed", type=int, default=None, help="init seed (default $ZERNET_SEED)")
    _common(p, config=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="run a checkpoint on a bundle")
    p.add_argument("--bundle", required=True, type=Path)
    p.add_argument("--checkpoint", required=True, type=Path)
    _common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--predictions", required=True, type=Path)
    p.add_argument("--truth", required=True, type=Path)
    p.add_argument("--task", required=True, choices=("classification", "regression", "correspondence"))
    p.add_argument("--mesh", help="reference mesh for correspondence")
    p.add_argument("--thresholds", type=float, nargs="+", default=[0.1, 0.2, 0.3],
                   help="hit-rate relative tolerances")
    _common(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ZernetError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (OSError, yaml.YAMLError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
