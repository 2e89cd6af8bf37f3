"""Command-line interface: ``coarsegrain <command> [options]``.

Every command prints one JSON metrics object on stdout (and writes it to
``--metrics-out`` when given).  Options may also come from a JSON file
passed with ``--config``; explicit flags win over the file, which wins over
the built-in defaults.

Exit codes: 0 success, 1 other library error, 2 bad arguments, 3 I/O error,
4 malformed file, 5 shape mismatch, 6 numerical failure, 7 input outside
the feature-map domain, 8 capacity exceeded.
"""

import argparse
import json
import logging
import sys
import time
from typing import Optional

import numpy as np

from . import __version__
from .data_io import (SYNTH_KINDS, Dataset, atomic_write, load, load_header, read_idx,
                      save_model, synth_dataset, from_container)
from .errors import ArgumentError, CoarseGrainError, ShapeError
from .feature_map import LocalMap, images_to_batch
from .models import (CurtainModel, TopTensor, TrainConfig, coarse_features, evaluate_accuracy,
                     init_curtain, train_curtain, train_top)
from .mps import Mps, lift_linear_multi
from .mps import evaluate as mps_evaluate
from .tree_builder import TreeConfig, TreeNetwork, build_tree

log = logging.getLogger("coarsegrain")

IO_EXIT = 3

DEFAULTS = {
    "cutoff": 6e-4,
    "max_dim": None,
    "layers": None,
    "mu": None,
    "prior": None,
    "map": "affine",
    "scale_mode": "normalized",
    "classes": None,
    "bond_dim": 300,
    "sweeps": 30,
    "cg_max": None,
    "tol": 1e-6,
    "ridge": 0.0,
    "seed": 0,
    "threads": 1,
    "deterministic": False,
    "n_samples": 200,
    "n_test": None,
    "chunk_size": 2048,
}

SCALE_FLAG = {"unit-local": "unit_local", "raw": "raw", "normalized": "normalized"}


def _layers(text):
    if text == "full":
        return "full"
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"layers must be 'full' or an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError("layers must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coarsegrain", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("run")
    g.add_argument("--config", help="JSON file of option defaults")
    g.add_argument("--seed", type=int)
    g.add_argument("--threads", type=int)
    g.add_argument("--deterministic", action="store_true", default=None,
                   help="omit wall-clock fields so metrics are byte-identical across runs")
    g.add_argument("--metrics-out", help="write the metrics JSON here as well")
    g.add_argument("--model-out", help="write the resulting model container here")
    g.add_argument("-v", "--verbose", action="count", default=0)

    data = argparse.ArgumentParser(add_help=False)
    g = data.add_argument_group("data")
    g.add_argument("--images", help="IDX image file (optionally .gz)")
    g.add_argument("--labels", help="IDX label file (optionally .gz)")
    g.add_argument("--test-images")
    g.add_argument("--test-labels")
    g.add_argument("--synthetic", choices=SYNTH_KINDS, help="use a generated dataset instead of IDX files")
    g.add_argument("--n-samples", type=int, help="synthetic training set size")
    g.add_argument("--n-test", type=int, help="synthetic test set size (default: n-samples)")
    g.add_argument("--classes", type=int, help="label count L (default: inferred from labels)")

    tree = argparse.ArgumentParser(add_help=False)
    g = tree.add_argument_group("tree")
    g.add_argument("--cutoff", type=float, help="truncation error cutoff epsilon")
    g.add_argument("--max-dim", type=int, help="cap on every bond dimension")
    g.add_argument("--layers", type=_layers, help="layer count or 'full'")
    g.add_argument("--mu", type=float, help="weight of the prior covariance (default 0.5 with --prior)")
    g.add_argument("--prior", help="prior MPS container (from lift-linear)")
    g.add_argument("--map", choices=("affine", "trig"))
    g.add_argument("--scale-mode", choices=tuple(SCALE_FLAG))
    g.add_argument("--chunk-size", type=int)
    g.add_argument("--tree", help="reuse a tree container instead of building one")

    train = argparse.ArgumentParser(add_help=False)
    g = train.add_argument_group("training")
    g.add_argument("--cg-max", type=int, help="CG iteration cap (top tensor: 500, ALS local solve: 50)")
    g.add_argument("--tol", type=float)
    g.add_argument("--ridge", type=float)

    sub.add_parser("build-tree", parents=[common, data, tree], help="build an isometric tree")
    sub.add_parser("lift-linear", parents=[common, data, train],
                   help="fit a linear classifier and lift it to a prior MPS")
    sub.add_parser("train-top", parents=[common, data, tree, train],
                   help="train a top tensor on a full tree")
    p = sub.add_parser("train-curtain", parents=[common, data, tree, train],
                       help="train an MPS top on a partial tree")
    p.add_argument("--bond-dim", type=int, help="top MPS bond dimension chi")
    p.add_argument("--sweeps", type=int)
    p = sub.add_parser("evaluate", parents=[common, data], help="score a saved model")
    p.add_argument("--model", required=True)
    p = sub.add_parser("inspect", parents=[common], help="summarize a saved container")
    p.add_argument("--model", required=True)
    return parser


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Apply flags > config file > defaults."""
    cfg = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            try:
                cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ArgumentError(f"config file {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ArgumentError("config file must hold a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    for key, value in vars(args).items():
        if value is None and key in cfg:
            setattr(args, key, cfg[key])
    for key, value in DEFAULTS.items():
        if getattr(args, key, None) is None and hasattr(args, key):
            setattr(args, key, value)
    for key in cfg:
        if not hasattr(args, key) and key not in DEFAULTS:
            raise ArgumentError(f"unknown config key {key!r}")
    if hasattr(args, "scale_mode"):
        if args.scale_mode not in SCALE_FLAG:
            raise ArgumentError(f"unknown scale mode {args.scale_mode!r}")
        args.scale_mode = SCALE_FLAG[args.scale_mode]
    if hasattr(args, "cutoff") and not 0.0 <= args.cutoff < 1.0:
        raise ArgumentError(f"--cutoff must lie in [0, 1), got {args.cutoff}")
    if getattr(args, "mu", None) is not None and not 0.0 <= args.mu <= 1.0:
        raise ArgumentError(f"--mu must lie in [0, 1], got {args.mu}")
    if getattr(args, "bond_dim", 1) < 1:
        raise ArgumentError("--bond-dim must be >= 1")
    if getattr(args, "threads", 1) < 1:
        raise ArgumentError("--threads must be >= 1")
    return args


# --- helpers -------------------------------------------------------------


def _load_split(args, test: bool) -> Optional[Dataset]:
    images, labels = (args.test_images, args.test_labels) if test else (args.images, args.labels)
    if images or labels:
        if not (images and labels):
            raise ArgumentError("image and label files must be given together")
        return read_idx(images, labels)
    if args.synthetic:
        n = args.n_samples if not test else (args.n_test or args.n_samples)
        return synth_dataset(args.synthetic, n, args.seed + (1 if test else 0))
    if test:
        return None
    raise ArgumentError("no data: give --images/--labels or --synthetic")


def _n_labels(args, *datasets) -> int:
    seen = max(d.n_labels for d in datasets if d is not None)
    if args.classes is None:
        return seen
    if args.classes < seen:
        raise ShapeError(f"--classes {args.classes} but labels go up to {seen - 1}")
    return args.classes


def _features(ds: Dataset, local_map: str, scale_mode: str):
    return images_to_batch(ds.images, LocalMap(local_map), scale_mode)


def _load_prior(path) -> Mps:
    obj = from_container(load(path))
    if not isinstance(obj, Mps):
        raise ArgumentError(f"{path} does not hold an MPS prior")
    return obj


def _tree_for(args, ds: Dataset, layers) -> TreeNetwork:
    if args.tree:
        obj = from_container(load(args.tree))
        tree = obj if isinstance(obj, TreeNetwork) else getattr(obj, "tree", None)
        if tree is None and isinstance(obj, tuple):
            tree = obj[0]
        if not isinstance(tree, TreeNetwork):
            raise ArgumentError(f"{args.tree} does not hold a tree")
        return tree
    prior = _load_prior(args.prior) if args.prior else None
    mu = args.mu if args.mu is not None else (0.5 if prior is not None else 0.0)
    cfg = TreeConfig(cutoff=args.cutoff, max_dim=args.max_dim, layers=layers, mu=mu, prior=prior,
                     chunk_size=args.chunk_size, threads=args.threads, seed=args.seed,
                     local_map=args.map)
    tree = build_tree(_features(ds, args.map, args.scale_mode), cfg)
    if args.deterministic:
        tree.stats.pop("build_seconds", None)
    return tree


def _hyper(args) -> dict:
    skip = {"command", "config", "metrics_out", "model_out", "verbose", "model"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _tree_metrics(tree: TreeNetwork) -> dict:
    return {
        "bond_profile": tree.bond_profile,
        "top_dims": list(tree.out_dims),
        "layers": tree.stats.get("layers", []),
        "scale_mode": tree.scale_mode,
        "local_map": tree.local_map,
        "mu": tree.mu,
    }


def _eval_metrics(head, tree, ds: Dataset, n_labels) -> dict:
    feats = coarse_features(tree, _features(ds, tree.local_map, tree.scale_mode))
    ev = evaluate_accuracy(head, feats, ds.labels, n_labels)
    out = ev.as_dict()
    out["n_samples"] = len(ds)
    out["truncated_samples"] = int(feats.truncated.sum())
    return out


# --- commands ------------------------------------------------------------


def cmd_build_tree(args) -> dict:
    ds = _load_split(args, False)
    tree = _tree_for(args, ds, args.layers or "full")
    if args.model_out:
        save_model(tree, args.model_out, _hyper(args))
    return {"n_samples": len(ds), **_tree_metrics(tree)}


def _fit_linear(x, y, ridge):
    """Ridge least squares with an unpenalized bias column."""
    a = np.hstack([x, np.ones((x.shape[0], 1))])
    gram = a.T @ a
    rhs = a.T @ y
    pen = np.ones(a.shape[1])
    pen[-1] = 0.0
    lam = float(ridge)
    if lam == 0.0:
        ev = np.linalg.eigvalsh(gram)
        if ev[0] <= 1e-12 * max(ev[-1], 1.0):
            log.warning("normal equations are singular; falling back to ridge 1e-8")
            lam = 1e-8
    try:
        sol = np.linalg.solve(gram + lam * np.diag(pen), rhs)
    except np.linalg.LinAlgError:
        log.warning("normal equations are singular; falling back to ridge 1e-8")
        lam = 1e-8
        sol = np.linalg.solve(gram + lam * np.diag(pen), rhs)
    return sol[:-1].T, sol[-1], lam


def cmd_lift_linear(args) -> dict:
    ds = _load_split(args, False)
    test = _load_split(args, True)
    L = _n_labels(args, ds, test)
    x = ds.images.reshape(len(ds), -1) / 255.0
    y = np.zeros((len(ds), L))
    y[np.arange(len(ds)), ds.labels] = 1.0
    v, b, lam = _fit_linear(x, y, args.ridge)
    w = lift_linear_multi(v, b)

    def acc(d):
        s = d.images.reshape(len(d), -1) / 255.0 @ v.T + b
        return float(np.mean(np.argmax(s, axis=1) == d.labels))

    probe = ds.images[: min(100, len(ds))]
    exact = probe.reshape(len(probe), -1) / 255.0 @ v.T + b
    lifted = mps_evaluate(w, images_to_batch(probe, LocalMap("affine"), "unit_local"))
    metrics = {
        "n_samples": len(ds),
        "classes": L,
        "ridge_used": lam,
        "train_accuracy": acc(ds),
        "lift_max_abs_error": float(np.max(np.abs(lifted - exact))),
        "bond_dims": list(w.bond_dims),
    }
    if test is not None:
        metrics["test_accuracy"] = acc(test)
    if args.model_out:
        save_model(w, args.model_out, _hyper(args),
                   {"linear": {"classes": L, "ridge_used": lam}})
    return metrics


def _train_cfg(args, cg_default) -> TrainConfig:
    cg = args.cg_max if args.cg_max is not None else cg_default
    return TrainConfig(max_iterations=cg, tol=args.tol, ridge=args.ridge, cg_max=cg,
                       sweeps=getattr(args, "sweeps", 30), seed=args.seed)


def cmd_train_top(args) -> dict:
    ds = _load_split(args, False)
    test = _load_split(args, True)
    L = _n_labels(args, ds, test)
    t0 = time.perf_counter()
    tree = _tree_for(args, ds, args.layers or "full")
    if len(tree.out_dims) != 2:
        raise ShapeError(f"train-top needs a full tree with 2 top sites, got {len(tree.out_dims)}")
    feats = coarse_features(tree, _features(ds, tree.local_map, tree.scale_mode))
    head = train_top(feats, ds.labels, _train_cfg(args, 500), n_labels=L)
    metrics = {"iterations": len(head.trace) - 1, "cost": head.trace[-1], **_tree_metrics(tree)}
    metrics["train"] = _eval_metrics(head, tree, ds, L)
    if test is not None:
        metrics["test"] = _eval_metrics(head, tree, test, L)
    if not args.deterministic:
        metrics["wall_seconds"] = time.perf_counter() - t0
    if args.model_out:
        save_model((tree, head), args.model_out, _hyper(args))
    return metrics


def cmd_train_curtain(args) -> dict:
    ds = _load_split(args, False)
    test = _load_split(args, True)
    L = _n_labels(args, ds, test)
    t0 = time.perf_counter()
    tree = _tree_for(args, ds, args.layers or 4)
    feats = coarse_features(tree, _features(ds, tree.local_map, tree.scale_mode))
    model = init_curtain(tree, L, args.bond_dim, seed=args.seed)
    model = train_curtain(model, feats, ds.labels, _train_cfg(args, 50))
    metrics = {
        "sweeps": len(model.sweep_costs),
        "cost": model.trace[-1],
        "sweep_costs": model.sweep_costs,
        "top_bond_dims": list(model.top.bond_dims),
        **_tree_metrics(tree),
    }
    metrics["train"] = _eval_metrics(model, tree, ds, L)
    if test is not None:
        metrics["test"] = _eval_metrics(model, tree, test, L)
    if not args.deterministic:
        metrics["wall_seconds"] = time.perf_counter() - t0
    if args.model_out:
        save_model(model, args.model_out, _hyper(args))
    return metrics


def cmd_evaluate(args) -> dict:
    obj = from_container(load(args.model))
    ds = _load_split(args, False)
    if isinstance(obj, tuple) and isinstance(obj[1], TopTensor):
        tree, head = obj
    elif isinstance(obj, CurtainModel):
        tree, head = obj.tree, obj
    elif isinstance(obj, Mps) and obj.label_site is not None:
        L = obj.n_labels
        if args.classes is not None and args.classes != L:
            raise ShapeError(f"model has {L} labels, --classes says {args.classes}")
        feats = images_to_batch(ds.images, LocalMap("affine"), "unit_local")
        ev = evaluate_accuracy(obj, feats, ds.labels, L)
        return {"model": args.model, "n_samples": len(ds), **ev.as_dict()}
    else:
        raise ArgumentError(f"{args.model} does not hold a trained classifier")
    L = head.n_labels
    if args.classes is not None and args.classes != L:
        raise ShapeError(f"model has {L} labels, --classes says {args.classes}")
    if ds.n_labels > L:
        raise ShapeError(f"data has labels up to {ds.n_labels - 1}, model only {L}")
    return {"model": args.model, **_eval_metrics(head, tree, ds, L)}


def _summary(header: dict) -> str:
    meta = header.get("meta", {})
    lines = [f"kind: {header['kind']}  (format version {header['format_version']})",
             f"payload: {header['payload_bytes']} bytes, sha256 {header['payload_sha256'][:16]}..."]
    t = meta.get("tree")
    if t:
        lines.append(f"tree: {len(t['layers'])} layers, map {t['local_map']}, scale mode "
                     f"{t['scale_mode']}, mu {t['mu']}")
        for k, (lm, dims) in enumerate(zip(t["layers"], t["bond_profile"])):
            errs = lm["truncation_errors"]
            lines.append(f"  layer {k + 1}: dims {dims}, max truncation error "
                         f"{max(errs) if errs else 0:.3g}")
    for key in ("mps", "top"):
        m = meta.get(key)
        if m:
            lines.append(f"{key}: {m['n_sites']} sites, bonds {m['bond_dims']}, label site {m['label_site']}")
    if "head" in meta and "chi" in meta["head"]:
        lines.append(f"chi: {meta['head']['chi']}")
    for a in header["arrays"]:
        lines.append(f"  array {a['name']}: shape {tuple(a['shape'])}")
    hp = meta.get("hyperparameters")
    if hp:
        lines.append("hyperparameters: " + json.dumps(hp, sort_keys=True))
    return "\n".join(lines)


def cmd_inspect(args) -> dict:
    header = load_header(args.model)
    load(args.model)  # verify the checksum too
    print(_summary(header), file=sys.stderr)
    meta = header.get("meta", {})
    out = {"kind": header["kind"], "format_version": header["format_version"],
           "payload_bytes": header["payload_bytes"],
           "arrays": {a["name"]: a["shape"] for a in header["arrays"]}}
    if "tree" in meta:
        t = meta["tree"]
        out["tree"] = {"n_layers": len(t["layers"]), "bond_profile": t["bond_profile"],
                       "truncation_errors": [lm["truncation_errors"] for lm in t["layers"]],
                       "mu": t["mu"], "scale_mode": t["scale_mode"], "local_map": t["local_map"]}
        spectra = {}
        for l, lm in enumerate(t["layers"]):
            spectra[str(l + 1)] = [a["shape"][0] for a in header["arrays"]
                                   if a["name"].startswith(f"tree.L{l}.S")]
        out["tree"]["spectrum_lengths"] = spectra
    if "hyperparameters" in meta:
        out["hyperparameters"] = meta["hyperparameters"]
    return out


COMMANDS = {
    "build-tree": cmd_build_tree,
    "lift-linear": cmd_lift_linear,
    "train-top": cmd_train_top,
    "train-curtain": cmd_train_curtain,
    "evaluate": cmd_evaluate,
    "inspect": cmd_inspect,
}


def emit(metrics: dict, args) -> str:
    doc = {"command": args.command, **metrics}
    text = json.dumps(_jsonable(doc), sort_keys=True, indent=2) + "\n"
    if args.metrics_out:
        atomic_write(args.metrics_out, text.encode("utf-8"))
    sys.stdout.write(text)
    return text


def _jsonable(obj):
    from .data_io import _clean

    return _clean(obj)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        resolve(args)
        emit(COMMANDS[args.command](args), args)
    except CoarseGrainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IO_EXIT
    return 0


if __name__ == "__main__":
    sys.exit(main())
