"""``equimap`` command-line interface.

Every subcommand accepts ``--seed``, ``--config FILE.json`` (keys are the
long flag names with dashes or underscores; flags given on the command
line override the file), ``--dry-run``, ``--threads N``, ``--verbose
{0,1,2}`` and ``-o/--output DIR``.  Metrics are written as CSV with a
header row, summaries as JSON, logs go to standard error.

Exit status: 0 on success, 2 on invalid configuration, 1 on runtime errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

log = logging.getLogger("equimap")


class ConfigError(Exception):
    """Invalid command configuration (exit status 2)."""


# ---------------------------------------------------------------------------
# option tables: (flag, type, default, help, extra argparse kwargs)

COMMON = [
    ("--seed", int, 0, "random seed", {}),
    ("--threads", int, None, "cap on BLAS/OpenMP worker threads", {}),
    ("--verbose", int, 1, "log level: 0 warnings, 1 info, 2 debug", {"choices": [0, 1, 2]}),
    ("--output", str, "out", "output directory", {}),
]

FEAT = [
    ("--feat", str, "hog", "representation: hog, or net:<checkpoint-dir>:<probe>", {}),
    ("--cell-size", int, 8, "HOG cell size in pixels", {}),
    ("--size", int, 64, "image side length for synthesized data", {}),
]

REGRESSION = [
    ("--method", str, "fs", "solver", {"choices": ["ls", "rr", "fs"]}),
    ("--k", str, "5", "maximum nonzeros per row, or 'inf'", {}),
    ("--m", str, "3", "neighborhood side, or 'inf'", {}),
    ("--lam", float, 0.1, "ridge strength (rr)", {}),
    ("--crop", str, "interior", "output sites kept for training", {"choices": ["interior", "none"]}),
]

NET_TRAIN = [
    ("--epochs", int, 20, "training epochs", {}),
    ("--lr", float, 0.02, "learning rate", {}),
    ("--momentum", float, 0.9, "momentum", {}),
    ("--weight-decay", float, 5e-4, "weight decay", {}),
    ("--batch-size", int, 32, "minibatch size", {}),
]

COMMANDS = {
    "synth": ("write a synthetic dataset (images + index.json)", [
        ("--kind", str, "class", "dataset kind", {"choices": ["class", "generic", "pose-rotation", "pose-affine"]}),
        ("--n", int, 1000, "number of images", {}),
        ("--size", int, 64, "image side length", {}),
        ("--split", str, "train", "split name (changes the random stream)", {}),
        ("--classes", int, 2, "number of classes (kind=class)", {}),
    ]),
    "extract": ("extract HOG fields for a dataset directory", [
        ("--data", str, None, "dataset directory written by synth", {}),
        ("--cell-size", int, 8, "HOG cell size", {}),
    ]),
    "train-net": ("train the T3 network on a synthetic classification set", [
        ("--data", str, None, "training dataset directory (default: synthesize)", {}),
        ("--n", int, 3000, "training images when synthesizing", {}),
        ("--n-test", int, 1000, "test images when synthesizing", {}),
        ("--size", int, 32, "image side length", {}),
        ("--classes", int, 2, "number of classes", {}),
        ("--augment", str, None, "training augmentation", {"choices": ["hflip"]}),
    ] + NET_TRAIN),
    "learn-map": ("learn an equivariant map M_g by sparse regression", FEAT + REGRESSION + [
        ("--g", str, "rot:45", "transform spec (id, hflip, vflip, rot90, rot:<deg>, scale:<s>, ...)", {}),
        ("--data", str, None, "training image directory (default: synthesize generic images)", {}),
        ("--n-train", int, 200, "training images when synthesizing", {}),
        ("--n-test", int, 100, "held-out images when synthesizing", {}),
        ("--metric", str, "hellinger", "error metric", {"choices": ["hellinger", "l2", "chi2"]}),
    ]),
    "eval-map": ("evaluate a saved map on held-out images", FEAT + [
        ("--map", str, None, "map file written by learn-map", {}),
        ("--g", str, None, "transform spec (default: the one stored in the map)", {}),
        ("--data", str, None, "test image directory (default: synthesize)", {}),
        ("--n-test", int, 100, "test images when synthesizing", {}),
        ("--metric", str, "hellinger", "error metric", {"choices": ["hellinger", "l2", "chi2"]}),
    ]),
    "learn-translayer": ("train a transformation layer inside a network on the task loss", [
        ("--net", str, None, "network checkpoint directory", {}),
        ("--probe", int, 1, "conv layer after which the layer is inserted", {}),
        ("--g", str, "vflip", "transform spec", {}),
        ("--mode", str, "round", "permutation mode", {"choices": ["round", "bilinear"]}),
        ("--m", int, 3, "filter size", {}),
        ("--init", str, "regression", "filter initialization", {"choices": ["identity", "random", "regression"]}),
        ("--n", int, 3000, "training images", {}),
        ("--n-test", int, 2000, "test images", {}),
        ("--classes", int, 2, "number of classes", {}),
        ("--epochs", int, 3, "epochs", {}),
        ("--lr", float, 3e-4, "learning rate", {}),
        ("--momentum", float, 0.9, "momentum", {}),
        ("--batch-size", int, 32, "minibatch size", {}),
        ("--eval-every", int, None, "record validation error every this many samples", {}),
    ]),
    "stitch": ("stitch the lower part of net A into the upper part of net B", [
        ("--net-a", str, None, "checkpoint of net A", {}),
        ("--net-b", str, None, "checkpoint of net B", {}),
        ("--probe", int, 1, "split point (conv layer index)", {}),
        ("--s", int, 1, "stitch filter size", {}),
        ("--init", str, "identity", "stitch initialization", {"choices": ["identity", "random", "regression"]}),
        ("--n", int, 3000, "training images", {}),
        ("--n-test", int, 2000, "test images", {}),
        ("--classes", int, 2, "number of classes", {}),
        ("--epochs", int, 3, "epochs", {}),
        ("--lr", float, 1e-3, "learning rate", {}),
        ("--momentum", float, 0.9, "momentum", {}),
        ("--batch-size", int, 32, "minibatch size", {}),
    ]),
    "invariance": ("find the largest set of invariant channels for g at a probe", [
        ("--net", str, None, "network checkpoint directory", {}),
        ("--layer", str, None, "trained transformation layer directory (default: train one)", {}),
        ("--probe", int, 1, "probe index", {}),
        ("--g", str, "hflip", "transform spec", {}),
        ("--rel-tol", float, 0.05, "allowed relative error increase", {}),
        ("--n", int, 3000, "training images for the layer", {}),
        ("--n-test", int, 2000, "evaluation images", {}),
        ("--classes", int, 2, "number of classes", {}),
        ("--epochs", int, 3, "layer training epochs", {}),
        ("--lr", float, 1e-3, "layer learning rate", {}),
    ]),
    "compensate": ("linear HOG classifier accuracy on rotated images, with and without M_g", [
        ("--angles", str, "0:90:15", "rotation grid start:stop:step in degrees (inclusive)", {}),
        ("--size", int, 64, "image side length", {}),
        ("--cell-size", int, 8, "HOG cell size", {}),
        ("--n-train", int, 1000, "classifier training images", {}),
        ("--n-map", int, 300, "map training images", {}),
        ("--n-test", int, 600, "test images", {}),
    ] + REGRESSION[:3]),
    "bench-pose": ("pose regression: direct vs equivariant scoring", [
        ("--feat", str, "hog", "representation", {"choices": ["hog"]}),
        ("--family", str, "rotation", "pose family", {"choices": ["rotation", "affine"]}),
        ("--size", int, 64, "image side length", {}),
        ("--cell-size", int, 8, "HOG cell size", {}),
        ("--n-train", int, 300, "training images", {}),
        ("--n-test", int, 300, "test images", {}),
        ("--epochs", int, 10, "structured trainer epochs", {}),
        ("--warmup", int, 3, "untimed warm-up predictions", {}),
    ] + REGRESSION[:3]),
    "selftest": ("run the exact-case invariant suite", [
        ("--n", int, 10, "random images per check", {}),
    ]),
}


def _dest(flag):
    return flag.lstrip("-").replace("-", "_")


def _options(command):
    seen, out = set(), []
    for opt in COMMON + COMMANDS[command][1]:
        if opt[0] not in seen:
            seen.add(opt[0])
            out.append(opt)
    return out


def build_parser():
    parser = argparse.ArgumentParser(prog="equimap", description="Equivariant, invariant and equivalent "
                                     "maps between image representations.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, (help_text, _) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", type=str, default=None, help="JSON file of option values (flags override)")
        p.add_argument("--dry-run", action="store_true", help="print the resolved plan and exit")
        for flag, typ, default, help_opt, extra in _options(name):
            names = [flag, "-o"] if flag == "--output" else [flag]
            shown = "" if default is None else f" (default: {default})"
            # default=None marks "not given" so that config-file values can fill in
            p.add_argument(*names, dest=_dest(flag), type=typ, default=None, help=help_opt + shown, **extra)
    return parser


def resolve_config(command, args):
    """Merge defaults, the JSON config file and explicit flags (in that order)."""
    opts = {_dest(f): (typ, default, extra) for f, typ, default, _, extra in _options(command)}
    cfg = {k: v[1] for k, v in opts.items()}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config file {args.config}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, value in data.items():
            k = key.replace("-", "_")
            if k == "command":
                if value != command:
                    raise ConfigError(f"config is for command {value!r}, not {command!r}")
                continue
            if k not in opts:
                raise ConfigError(f"unknown config key {key!r} for {command}")
            typ, _, extra = opts[k]
            try:
                value = None if value is None else typ(value)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"config key {key!r}: {e}") from e
            if value is not None and "choices" in extra and value not in extra["choices"]:
                raise ConfigError(f"config key {key!r} must be one of {extra['choices']}")
            cfg[k] = value
    for k in opts:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    cfg["command"] = command
    return cfg


def _inf_or_int(value, name, low=1):
    if str(value).lower() in ("inf", "infinity"):
        return float("inf")
    try:
        v = int(value)
    except ValueError as e:
        raise ConfigError(f"--{name} must be an integer >= {low} or 'inf', got {value!r}") from e
    if v < low:
        raise ConfigError(f"--{name} must be at least {low}, got {v}")
    return v


def _validate(cfg):
    for key, low in (("k", 0), ("m", 1)):
        if key in cfg and isinstance(cfg[key], str):
            cfg[key] = _inf_or_int(cfg[key], key, low)
    for key in ("n", "n_train", "n_test", "n_map", "epochs", "size", "cell_size", "batch_size", "classes"):
        if key in cfg and cfg[key] is not None and cfg[key] < (0 if key == "epochs" else 1):
            raise ConfigError(f"--{key.replace('_', '-')} must be positive, got {cfg[key]}")
    if cfg.get("threads") is not None and cfg["threads"] < 1:
        raise ConfigError("--threads must be at least 1")
    required = {"extract": ["data"], "eval-map": ["map"], "learn-translayer": ["net"],
                "stitch": ["net_a", "net_b"], "invariance": ["net"]}
    for key in required.get(cfg["command"], []):
        if not cfg.get(key):
            raise ConfigError(f"--{key.replace('_', '-')} is required for {cfg['command']}")
    if cfg["command"] == "compensate":
        try:
            a, b, s = (float(v) for v in cfg["angles"].split(":"))
        except ValueError as e:
            raise ConfigError("--angles must be start:stop:step") from e
        if s <= 0 or b < a:
            raise ConfigError("--angles needs step > 0 and stop >= start")
    return cfg


def _set_threads(n):
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _setup_logging(level):
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        level={0: logging.WARNING, 1: logging.INFO, 2: logging.DEBUG}[level], force=True)


# ---------------------------------------------------------------------------
# helpers shared by the commands


def _transform(spec, shape):
    from .imaging import parse_transform

    try:
        return parse_transform(spec, shape)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _extractor(cfg):
    from .hog import HOGTransformer

    feat = cfg.get("feat", "hog")
    if feat == "hog":
        return HOGTransformer(cfg.get("cell_size", 8))
    if feat.startswith("net:"):
        parts = feat.split(":")
        if len(parts) != 3:
            raise ConfigError("--feat net form is net:<checkpoint-dir>:<probe>")
        from .featnet import ProbeExtractor, load_network

        return ProbeExtractor(load_network(parts[1]).probe(int(parts[2])))
    raise ConfigError(f"unknown representation {feat!r}")


def _images_for(cfg, key_n, split, default_kind="generic"):
    from .imaging import load_dataset, synth_classification_set, synth_generic_images

    if cfg.get("data"):
        ds = load_dataset(cfg["data"])
        return ds.images
    size = cfg.get("size", 64)
    if default_kind == "generic":
        return synth_generic_images(cfg["seed"], cfg[key_n], size, split).images
    return synth_classification_set(cfg["seed"], cfg[key_n], cfg.get("classes", 2), size, split).images


def _class_sets(cfg, size):
    from .imaging import synth_classification_set

    tr = synth_classification_set(cfg["seed"], cfg["n"], cfg.get("classes", 2), size, "train")
    te = synth_classification_set(cfg["seed"], cfg["n_test"], cfg.get("classes", 2), size, "test")
    return tr, te


def _out(cfg):
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg):
    from .imaging import (save_dataset, synth_classification_set, synth_generic_images, synth_pose_set)

    kind, n, size, split, seed = cfg["kind"], cfg["n"], cfg["size"], cfg["split"], cfg["seed"]
    if kind == "class":
        ds = synth_classification_set(seed, n, cfg["classes"], size, split)
    elif kind == "generic":
        ds = synth_generic_images(seed, n, size, split)
    else:
        ds = synth_pose_set(seed, n, kind.split("-")[1], size, split)
    path = save_dataset(ds, cfg["output"])
    log.info("wrote %d images to %s", len(ds), cfg["output"])
    return {"index": str(path), "n": len(ds)}


def cmd_extract(cfg):
    from .fields import write_field
    from .hog import HogConfig, extract_hog
    from .imaging import load_dataset

    ds = load_dataset(cfg["data"])
    out = _out(cfg)
    hc = HogConfig(cfg["cell_size"])
    for i, x in enumerate(ds.images):
        write_field(out / f"{i:06d}.eqf", extract_hog(x, hc))
    log.info("wrote %d fields to %s", len(ds), out)
    return {"n": len(ds)}


def cmd_train_net(cfg):
    from .analysis import write_csv, write_json
    from .featnet import TrainConfig, build_t3, save_network, train
    from .imaging import load_dataset

    if cfg.get("data"):
        tr = load_dataset(cfg["data"])
        te = None
    else:
        tr, te = _class_sets(cfg, cfg["size"])
    net = build_t3(cfg["classes"], seed=cfg["seed"], input_size=tr.images.shape[1])
    tc = TrainConfig(cfg["lr"], cfg["momentum"], cfg["weight_decay"], cfg["batch_size"], cfg["epochs"],
                     cfg["seed"], augment=cfg.get("augment"))
    _, hist = train(net, tr, tc, val=te)
    out = _out(cfg)
    save_network(net, out / "net", hyper=tc)
    rows = [{"epoch": i, "loss": v} for i, v in enumerate(hist["loss"])]
    for r, e in zip(rows[1:], hist.get("val_error", [])):
        r["val_error"] = e
    write_csv(rows, out / "train-history.csv")
    summary = {"train_error": net.error(tr.images, tr.labels)}
    if te is not None:
        summary["test_error"] = net.error(te.images, te.labels)
    write_json(summary, out / "train-summary.json")
    return summary


def cmd_learn_map(cfg):
    from .analysis import report_name, write_csv, write_json
    from .equilearn import RegressionConfig, evaluate_map, learn_map

    ext = _extractor(cfg)
    train_imgs = _images_for(cfg, "n_train", "train")
    test_imgs = _images_for({**cfg, "data": None}, "n_test", "test")
    g = _transform(cfg["g"], train_imgs.shape[1:3])
    rc = RegressionConfig(cfg["method"], cfg["k"], cfg["m"], cfg["lam"], cfg["metric"])
    M = learn_map(ext, g, train_imgs, rc, crop=cfg["crop"])
    out = _out(cfg)
    M.save(out / "map.eqm")
    stats = evaluate_map(M, ext, g, test_imgs, cfg["metric"])
    row = {"feat": cfg["feat"], "g": cfg["g"], "method": cfg["method"], "k": cfg["k"], "m": cfg["m"],
           "lam": cfg["lam"], "n_train": len(train_imgs), "fit_time": M.fit_time, **stats}
    write_csv([row], out / report_name("learn-map", cfg["g"], cfg["feat"].split(":")[-1]))
    write_json(row, out / "learn-map.json")
    return row


def cmd_eval_map(cfg):
    from .analysis import report_name, write_csv
    from .equilearn import EquivariantMap, evaluate_map

    M = EquivariantMap.load(cfg["map"])
    ext = _extractor(cfg)
    imgs = _images_for(cfg, "n_test", "test")
    g = _transform(cfg["g"], imgs.shape[1:3]) if cfg.get("g") else M.g
    if g is None:
        raise ConfigError("the map stores no transform; pass --g")
    stats = evaluate_map(M, ext, g, imgs, cfg["metric"])
    row = {"map": cfg["map"], "g": cfg.get("g") or g.name, **stats}
    write_csv([row], _out(cfg) / report_name("eval-map", row["g"], cfg["feat"].split(":")[-1]))
    return row


def _translayer(cfg, net, g, tr, te):
    from .featnet import TrainConfig
    from .netsurgery import train_transformation_layer

    tc = TrainConfig(cfg["lr"], cfg.get("momentum", 0.9), 0.0, cfg.get("batch_size", 32), cfg["epochs"], cfg["seed"])
    return train_transformation_layer(net.probe(cfg["probe"]), g, tr, tc, m=cfg.get("m", 3),
                                      mode=cfg.get("mode", "round"), val=te, eval_every=cfg.get("eval_every"),
                                      seed=cfg["seed"], init=cfg.get("init", "regression"))


def cmd_learn_translayer(cfg):
    from .analysis import report_name, write_csv, write_json
    from .featnet import load_network
    from .netsurgery import compensated_error, save_layer

    net = load_network(cfg["net"])
    size = net.input_shape[0]
    tr, te = _class_sets(cfg, size)
    g = _transform(cfg["g"], (size, size))
    layer, hist = _translayer(cfg, net, g, tr, te)
    split = net.probe(cfg["probe"])
    out = _out(cfg)
    save_layer(layer, out / "translayer")
    original = net.error(te.images, te.labels)
    unc = compensated_error(split, None, g, te)
    comp = compensated_error(split, layer, g, te)
    rows = [{"samples": s, "train_error": a, "val_error": b}
            for s, a, b in zip(hist["samples"], hist["train_error"], hist["val_error"])]
    write_csv(rows, out / report_name("translayer", cfg["g"], f"probe{cfg['probe']}"))
    summary = {"g": cfg["g"], "probe": cfg["probe"], "mode": layer.mode, "original": original,
               "uncompensated": unc, "compensated": comp,
               "recovery": (unc - comp) / (unc - original) if unc != original else float("nan")}
    write_json(summary, out / "translayer-summary.json")
    return summary


def cmd_stitch(cfg):
    from .analysis import report_name, write_csv, write_json
    from .featnet import TrainConfig, load_network
    from .netsurgery import evaluate_franken, learn_stitch

    a, b = load_network(cfg["net_a"]), load_network(cfg["net_b"])
    tr, te = _class_sets(cfg, a.input_shape[0])
    sa, sb = a.probe(cfg["probe"]), b.probe(cfg["probe"])
    init_layer, _ = learn_stitch(sa, sb, tr, TrainConfig(epochs=0), s=cfg["s"], seed=cfg["seed"])
    tc = TrainConfig(cfg["lr"], cfg["momentum"], 0.0, cfg["batch_size"], cfg["epochs"], cfg["seed"])
    layer, hist = learn_stitch(sa, sb, tr, tc, s=cfg["s"], init=cfg["init"], seed=cfg["seed"])
    summary = {"probe": cfg["probe"], "error_b": b.error(te.images, te.labels),
               "error_identity": evaluate_franken(sa, init_layer, sb, te),
               "error_learned": evaluate_franken(sa, layer, sb, te)}
    out = _out(cfg)
    write_csv([summary], out / report_name("stitch", "AtoB", f"probe{cfg['probe']}"))
    write_json(summary, out / "stitch-summary.json")
    return summary


def cmd_invariance(cfg):
    from .analysis import max_invariant_set, report_name, write_csv, write_json
    from .featnet import load_network
    from .netsurgery import load_layer

    net = load_network(cfg["net"])
    size = net.input_shape[0]
    tr, te = _class_sets(cfg, size)
    g = _transform(cfg["g"], (size, size))
    if cfg.get("layer"):
        layer = load_layer(cfg["layer"])
    else:
        layer, _ = _translayer({**cfg, "init": "identity"}, net, g, tr, None)
    rep = max_invariant_set(layer, net.probe(cfg["probe"]), te, g, cfg["rel_tol"])
    out = _out(cfg)
    write_csv(rep.rows(), out / report_name("invariance", cfg["g"], f"probe{cfg['probe']}"))
    write_json(rep.to_dict(), out / "invariance-summary.json")
    return {"p": rep.p, "D": rep.D, "error_full": rep.error_full, "error_invariant": rep.error_invariant}


def cmd_compensate(cfg):
    import numpy as np

    from .analysis import LinearHingeClassifier, compensated_classification, report_name, write_csv
    from .equilearn import RegressionConfig, learn_map
    from .hog import HOGTransformer
    from .imaging import parse_transform, synth_classification_set

    size, seed = cfg["size"], cfg["seed"]
    tr = synth_classification_set(seed, cfg["n_train"], 2, size, "train")
    te = synth_classification_set(seed, cfg["n_test"], 2, size, "test")
    ext = HOGTransformer(cfg["cell_size"])
    clf = LinearHingeClassifier(random_state=seed).fit(ext.features(tr.images), tr.labels)
    a, b, s = (float(v) for v in cfg["angles"].split(":"))
    angles = np.arange(a, b + 1e-9, s)
    grid = [(f"rot:{x:g}", parse_transform(f"rot:{x:g}", (size, size))) for x in angles]
    rc = RegressionConfig(cfg["method"], cfg["k"], cfg["m"])
    maps = {n: learn_map(ext, g, tr.images[:cfg["n_map"]], rc, crop="none") for n, g in grid}
    rows = compensated_classification(clf, maps, grid, ext, te)
    for r, x in zip(rows, angles):
        r["angle"] = float(x)
    write_csv(rows, _out(cfg) / report_name("compensate", "rot", "hog"))
    return {"points": len(rows)}


def cmd_bench_pose(cfg):
    from .analysis import report_name, write_csv, write_json
    from .equilearn import RegressionConfig
    from .hog import HOGTransformer
    from .imaging import synth_pose_set
    from .structreg import bench, build_pose_set, learn_pose_maps, train_pose_model

    fam, size = cfg["family"], cfg["size"]
    tr = synth_pose_set(cfg["seed"], cfg["n_train"], fam, size, "train")
    te = synth_pose_set(cfg["seed"], cfg["n_test"], fam, size, "test")
    ext = HOGTransformer(cfg["cell_size"])
    G = build_pose_set(fam, size)
    maps = learn_pose_maps(ext, G, tr.images, RegressionConfig(cfg["method"], cfg["k"], cfg["m"]))
    model = train_pose_model(ext, tr, G, maps, fam, cfg["epochs"], seed=cfg["seed"])
    res = bench(model, te, tr, warmup=cfg["warmup"], feature=cfg["feat"])
    out = _out(cfg)
    cols = ["feature", "family", "mode", "error", "ms_per_transform", "speedup"]
    write_csv([{k: r[k] for k in cols} for r in res.rows], out / report_name("bench-pose", fam, cfg["feat"]))
    write_json({"rows": res.rows}, out / "bench-pose.json")
    return {r["mode"]: r["error"] for r in res.rows}


def cmd_selftest(cfg):
    from .selftest import run_selftest

    results = run_selftest(n=cfg["n"], seed=cfg["seed"])
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    failed = [r for r in results if not r[1]]
    if failed:
        raise RuntimeError(f"{len(failed)} self-test check(s) failed")
    return {"checks": len(results)}


HANDLERS = {
    "synth": cmd_synth, "extract": cmd_extract, "train-net": cmd_train_net, "learn-map": cmd_learn_map,
    "eval-map": cmd_eval_map, "learn-translayer": cmd_learn_translayer, "stitch": cmd_stitch,
    "invariance": cmd_invariance, "compensate": cmd_compensate, "bench-pose": cmd_bench_pose,
    "selftest": cmd_selftest,
}


def _dumps(obj, indent=None):
    from .analysis import _jsonable

    return json.dumps(_jsonable(obj), indent=indent, sort_keys=True, default=str)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = _validate(resolve_config(args.command, args))
    except ConfigError as e:
        print(f"equimap {args.command}: error: {e}", file=sys.stderr)
        return 2
    _set_threads(cfg.get("threads"))
    _setup_logging(cfg["verbose"])
    if args.dry_run:
        print(_dumps({"plan": args.command, "config": cfg}, indent=2))
        return 0
    t0 = time.perf_counter()
    try:
        result = HANDLERS[args.command](cfg)
    except ConfigError as e:
        print(f"equimap {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report any runtime failure as exit 1
        log.debug("failure", exc_info=True)
        print(f"equimap {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    log.info("%s finished in %.2fs", args.command, time.perf_counter() - t0)
    if result is not None:
        print(_dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
