"""Command-line entry point: ``advcompose <subcommand> ...``.

Every subcommand first resolves its arguments into a plain config dict with
all defaults filled in, writes that as a run manifest, then executes from
the manifest alone.  ``advcompose replay`` re-executes a saved manifest.

Exit codes: 0 ok, 1 check failure, 2 config error, 3 data error,
4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__, gradcheck, theory
from .attacks import (AttackConfig, attack_suite, builtin_configs, chained_attack, run_attack)
from .classifier import ConvNet, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train
from .errors import AttackDiverged, FormatError, NoWitness, TrainingDiverged
from .imagecore import diff_image, encode_ppm, load_dataset_spec, load_ppm, save_ppm
from .metrics import lp_distance, lpips_style, ssim
from .threat import DeltaThreat, FlowThreat

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4
SCHEMA_VERSION = 1
DEFAULT_ATTACKS = ("identity", "fgsm", "delta", "rt", "delta+rt", "stadv", "delta+stadv",
                   "delta-ce", "rt-ce", "delta+rt-ce", "stadv-ce", "delta+stadv-ce")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# -- output helpers ----------------------------------------------------------


def fmt(value):
    """Locale-independent, 6 significant digits."""
    return f"{float(value):.6g}"


def fmt_accuracy(value):
    return f"{float(value):.4f}"


def write_csv(path, header, rows, comment=None):
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    _write_text(path, buf.getvalue())


def write_json(path, doc):
    _write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_text(path, text):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def file_sha256(path):
    try:
        with open(path, "rb") as fh:
            return hashlib.sha256(fh.read()).hexdigest()
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None


def _load_net(path, expected_sha=None):
    digest = file_sha256(path)
    if expected_sha is not None and digest != expected_sha:
        raise DataError(f"checkpoint {path} changed since the manifest was written")
    return load_checkpoint(path)


def _load_data(cfg):
    try:
        return load_dataset_spec(cfg["data"], seed=cfg["data_seed"], count=cfg["count"], size=cfg["size"])
    except FileNotFoundError as exc:
        raise DataError(f"data path not found: {exc.args[0] if exc.args else cfg['data']}") from None


def _parse_list(text, cast=str):
    items = [t.strip() for t in text.split(",") if t.strip()]
    try:
        return [cast(t) for t in items]
    except ValueError:
        raise ConfigError(f"cannot parse list {text!r}") from None


def resolve_attack(spec, overrides=None):
    """Builtin name, JSON file path, or dict (optionally ``{"base": name, ...fields}``) to a config dict."""
    table = builtin_configs()
    if isinstance(spec, str):
        if spec in table:
            doc = table[spec].to_dict()
        elif os.path.exists(spec):
            with open(spec, encoding="utf-8") as fh:
                doc = json.load(fh)
        else:
            raise ConfigError(f"unknown attack {spec!r}; builtins are {', '.join(table)}")
    else:
        doc = dict(spec)
    if "base" in doc:
        base = doc.pop("base")
        if base not in table:
            raise ConfigError(f"unknown base attack {base!r}")
        layer_lr = doc.pop("layer_lr", None)
        merged = table[base].to_dict()
        merged.update(doc)
        if layer_lr is not None:
            merged["layers"] = [dict(l, lr=layer_lr) for l in merged["layers"]]
        doc = merged
    cfg = AttackConfig.from_dict(doc)
    if overrides and cfg.layers and cfg.optimizer == "adam":
        cfg = replace(cfg, **overrides)
    return cfg.to_dict()


def _iteration_overrides(args):
    out = {}
    if args.min_iterations is not None:
        out["min_iterations"] = args.min_iterations
    if args.max_iterations is not None:
        out["max_iterations"] = args.max_iterations
    if "min_iterations" in out and "max_iterations" not in out:
        out["max_iterations"] = max(out["min_iterations"], AttackConfig().max_iterations)
    return out


# -- train -------------------------------------------------------------------


def resolve_train(args):
    doc = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            doc = json.load(fh)
    doc = dict(doc)
    doc.setdefault("seed", args.seed)
    adv = doc.get("adversarial")
    if adv is not None:
        doc["adversarial"] = {"attack": resolve_attack(adv["attack"]), "mix": adv.get("mix", 0.5)}
    cfg = TrainConfig.from_dict(doc)
    return {
        "data": args.data, "data_seed": args.data_seed, "count": args.count, "size": args.size,
        "net_seed": args.seed, "train": cfg.to_dict(),
        "outputs": {"checkpoint": args.out, "log": args.out + ".log.csv"},
    }


def run_train(cfg):
    data = _load_data(cfg)
    net = ConvNet(in_channels=data.image_shape[0], size=data.image_shape[1],
                  num_classes=data.num_classes, seed=cfg["net_seed"])
    net, log = train(net, data, TrainConfig.from_dict(cfg["train"]))
    save_checkpoint(net, cfg["outputs"]["checkpoint"])
    rows = [(i + 1, fmt(l), fmt(a)) for i, (l, a) in enumerate(zip(log.epoch_loss, log.epoch_accuracy))]
    write_csv(cfg["outputs"]["log"], ["epoch", "loss", "train_accuracy"], rows)
    print(f"trained {len(log.epoch_loss)} epochs; final train accuracy {fmt(log.epoch_accuracy[-1]) if rows else 'n/a'}")
    return EXIT_OK


# -- matrix ------------------------------------------------------------------


def _defense_name(path):
    return os.path.splitext(os.path.basename(path))[0]


def resolve_matrix(args):
    defenses = _parse_list(args.defenses)
    if not defenses:
        raise ConfigError("need at least one defense checkpoint")
    attacks = [resolve_attack(a, _iteration_overrides(args)) for a in _parse_list(args.attacks)]
    if not attacks:
        raise ConfigError("need at least one attack")
    names = [a["name"] for a in attacks]
    if len(set(names)) != len(names):
        raise ConfigError("attack names must be unique")
    stem = os.path.splitext(args.out)[0]
    return {
        "data": args.data, "data_seed": args.data_seed, "count": args.count, "size": args.size,
        "defenses": [{"path": d, "name": _defense_name(d), "sha256": file_sha256(d)} for d in defenses],
        "attacks": attacks,
        "outputs": {"matrix": args.out, "defended": stem + ".defended.csv", "metrics": stem + ".metrics.csv"},
    }


def run_matrix(cfg):
    data = _load_data(cfg)
    configs = {a["name"]: AttackConfig.from_dict(a) for a in cfg["attacks"]}
    header = ["defense", "Ground", *configs]
    robust_rows, defended_rows, metric_rows = [], [], []
    for d in cfg["defenses"]:
        net = _load_net(d["path"], d["sha256"])
        result = attack_suite(net, data, configs)
        ground = fmt_accuracy(result.clean_accuracy)
        robust_rows.append([d["name"], ground, *(fmt_accuracy(e.robust_accuracy) for e in result.entries.values())])
        defended_rows.append([d["name"], ground, *(fmt_accuracy(e.defended_accuracy) for e in result.entries.values())])
        for name, e in result.entries.items():
            m = e.mean_metrics
            metric_rows.append([d["name"], name, e.attacked, e.successes,
                                *(fmt(m.get(k, 0.0)) for k in ("linf", "l2", "one_minus_ssim", "lpips_style"))])
        print(f"{d['name']}: " + " ".join(f"{k}={v}" for k, v in zip(header[1:], robust_rows[-1][1:])))
    out = cfg["outputs"]
    write_csv(out["matrix"], header, robust_rows)
    write_csv(out["defended"], header, defended_rows)
    write_csv(out["metrics"], ["defense", "attack", "attacked", "successes", "linf", "l2", "one_minus_ssim",
                               "lpips_style"], metric_rows)
    return EXIT_OK


# -- sweep -------------------------------------------------------------------


def resolve_sweep(args):
    delta_grid = _parse_list(args.delta_grid, float)
    flow_grid = _parse_list(args.flow_grid, float)
    if not delta_grid or not flow_grid:
        raise ConfigError("delta and flow grids must be non-empty")
    if any(v < 0 for v in delta_grid + flow_grid):
        raise ConfigError("grid values must be >= 0")
    if sorted(delta_grid) != delta_grid or sorted(flow_grid) != flow_grid:
        raise ConfigError("grid values must be listed in increasing order")
    base = resolve_attack("delta+stadv", _iteration_overrides(args))
    out = args.out
    return {
        "data": args.data, "data_seed": args.data_seed, "count": args.count, "size": args.size,
        "defense": {"path": args.defense, "name": _defense_name(args.defense), "sha256": file_sha256(args.defense)},
        "delta_grid_255": delta_grid, "flow_grid_px": flow_grid, "attack": base,
        "outputs": {
            "accuracy_csv": os.path.join(out, "accuracy.csv"),
            "metrics_csv": os.path.join(out, "metrics.csv"),
            "accuracy_heatmap": os.path.join(out, "accuracy.pgm"),
            "lpips_heatmap": os.path.join(out, "lpips_style.pgm"),
            "ranges": os.path.join(out, "heatmap_ranges.json"),
        },
    }


def heatmap(values):
    """Linear map of a 2-D array onto [0, 1] gray levels; returns (image (1, H, W), lo, hi)."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo
    scaled = (values - lo) / span if span > 0 else np.zeros_like(values)
    return scaled[None], lo, hi


def sweep_config(base, delta_255, flow_px):
    """The combined attack at one grid point; layer order and all other fields come from ``base``."""
    base = AttackConfig.from_dict(base)
    layers = []
    for layer in base.layers:
        if layer.kind == "delta":
            layers.append(replace(layer, threat=DeltaThreat(delta_255 / 255)))
        elif layer.kind == "flow":
            layers.append(replace(layer, threat=FlowThreat(flow_px)))
        else:
            layers.append(layer)
    return replace(base, name=f"sweep[{delta_255:g},{flow_px:g}]", layers=tuple(layers))


def run_sweep_grid(net, data, base, delta_grid, flow_grid):
    """Grid of (robust accuracy, mean metrics over successes); solutions chain from tighter bounds."""
    clean, mask = evaluate(net, data)
    idx = np.flatnonzero(mask)
    x, y = data.images[idx], data.labels[idx]
    memo = {}
    solved = {}
    acc = np.zeros((len(delta_grid), len(flow_grid)))
    lp = np.zeros_like(acc)
    rows = []
    for i, d in enumerate(delta_grid):
        for j, f in enumerate(flow_grid):
            cfg = sweep_config(base, d, f)
            previous = [solved[k].params for k in ((i - 1, j), (i, j - 1)) if k in solved]
            if len(x):
                batch = chained_attack(net, x, y, cfg, previous=previous, memo=memo)
                solved[(i, j)] = batch
                ok = np.flatnonzero(batch.success)
            else:
                ok = np.zeros(0, dtype=np.int64)
            acc[i, j] = (len(idx) - len(ok)) / len(data)
            if len(ok):
                xs, ys = x[ok], batch.perturbed[ok]
                m = (float(np.mean(lpips_style(net, xs, ys))), float(np.mean(1.0 - np.atleast_1d(ssim(xs, ys)))),
                     float(np.mean(lp_distance(xs, ys, np.inf))), float(np.mean(lp_distance(xs, ys, 2))))
            else:
                m = (0.0, 0.0, 0.0, 0.0)
            lp[i, j] = m[0]
            rows.append((d, f, acc[i, j], len(ok), *m))
    return clean, acc, lp, rows


def run_sweep(cfg):
    data = _load_data(cfg)
    net = _load_net(cfg["defense"]["path"], cfg["defense"]["sha256"])
    _, acc, lp, rows = run_sweep_grid(net, data, cfg["attack"], cfg["delta_grid_255"], cfg["flow_grid_px"])
    out = cfg["outputs"]
    write_csv(out["accuracy_csv"], ["delta_255", "flow_px", "accuracy"],
              [(fmt(d), fmt(f), fmt(a)) for d, f, a, *_ in rows])
    write_csv(out["metrics_csv"], ["delta_255", "flow_px", "successes", "lpips_style", "one_minus_ssim", "linf", "l2"],
              [(fmt(d), fmt(f), n, *(fmt(v) for v in m)) for d, f, _, n, *m in rows])
    ranges = {}
    for key, grid, name in (("accuracy_heatmap", acc, "accuracy"), ("lpips_heatmap", lp, "lpips_style")):
        img, lo, hi = heatmap(grid)
        with open(out[key], "wb") as fh:
            fh.write(encode_ppm(img))
        ranges[name] = {"min": lo, "max": hi, "rows": "delta_255", "cols": "flow_px"}
    write_json(out["ranges"], ranges)
    for d, f, a, *_ in rows:
        print(f"delta={d:g}/255 flow={f:g}px accuracy={fmt_accuracy(a)}")
    return EXIT_OK, {"heatmap_ranges": ranges}


# -- theorem -----------------------------------------------------------------


def resolve_theorem(args):
    if (args.image is None) == (args.data is None):
        raise ConfigError("give exactly one of --image or --data")
    if not args.eps > 0 or args.eps > 1:
        raise ConfigError("--eps is a fraction of a pixel in (0, 1]")
    if args.delta < 0:
        raise ConfigError("--delta must be >= 0")
    stem = os.path.splitext(args.out)[0]
    cfg = {"delta": args.delta, "eps": args.eps, "outputs": {"certificates": args.out, "scan": stem + ".scan.csv"}}
    if args.image is not None:
        cfg["source"] = {"image": args.image}
    else:
        cfg["source"] = {"data": args.data, "data_seed": args.data_seed, "count": args.count, "size": args.size}
    cfg["scan_samples"] = args.scan_samples
    cfg["scan_seed"] = args.scan_seed
    return cfg


def witness_entry(image, delta, eps):
    """JSON-ready certificate (or reason for its absence) and whether it re-verified."""
    try:
        cert = theory.theorem_witness(image, delta, eps)
    except NoWitness as exc:
        return {"witness": None, "reason": exc.reason}, True
    verified = theory.verify_certificate(image, cert)
    return {"witness": cert.to_json(), "reason": None, "verified": verified}, verified


def run_theorem(cfg):
    src = cfg["source"]
    delta, eps = cfg["delta"], cfg["eps"]
    out = cfg["outputs"]
    if "image" in src:
        try:
            images = load_ppm(src["image"])[None]
        except FileNotFoundError:
            raise DataError(f"image not found: {src['image']}") from None
        labels = [src["image"]]
    else:
        data = _load_data(src)
        images = data.images
        labels = list(range(len(data)))
    entries, violations, failed = [], 0, 0
    for label, image in zip(labels, images):
        entry, ok = witness_entry(image, delta, eps)
        entry["image"] = label
        entries.append(entry)
        failed += not ok
        violations += theory.disjointness_violations(image, delta, eps)
    found = sum(e["witness"] is not None for e in entries)
    header = {"delta": delta, "eps": eps, "schema_version": SCHEMA_VERSION}
    if "image" in src:
        doc = {**header, **entries[0], "disjointness_violations": violations}
    else:
        doc = {**header, "results": entries,
               "summary": {"images": len(entries), "certificates": found, "verified": found - failed,
                           "disjointness_violations": violations}}
    write_json(out["certificates"], doc)

    count = cfg["scan_samples"] if cfg["scan_samples"] is not None else len(images)
    rows, every = theory.contrast_scan(images, delta, eps, min(count, len(images)), cfg["scan_seed"])
    write_csv(out["scan"], ["image_index", "low_fraction", "high_fraction"],
              [(i, fmt(lo), fmt(hi)) for i, lo, hi in rows],
              comment=f"contrast scan delta={fmt(delta)} eps={fmt(eps)} every_image_has_both={every}")
    print(f"certificates: {found}/{len(entries)}; failed re-verification: {failed}; "
          f"disjointness violations: {violations}")
    return EXIT_CHECK if failed or violations else EXIT_OK


# -- attack ------------------------------------------------------------------


def resolve_attack_cmd(args):
    out = args.out
    return {
        "input": args.input, "label": args.label,
        "checkpoint": {"path": args.ckpt, "sha256": file_sha256(args.ckpt)},
        "attack": resolve_attack(args.attack, _iteration_overrides(args)),
        "outputs": {"perturbed": os.path.join(out, "perturbed.ppm"), "diff": os.path.join(out, "diff.ppm"),
                    "result": os.path.join(out, "result.json")},
    }


def run_attack_cmd(cfg):
    try:
        x = load_ppm(cfg["input"])
    except FileNotFoundError:
        raise DataError(f"image not found: {cfg['input']}") from None
    net = _load_net(cfg["checkpoint"]["path"], cfg["checkpoint"]["sha256"])
    if x.shape != net.input_shape:
        raise DataError(f"image shape {x.shape} does not match network input {net.input_shape}")
    if not 0 <= cfg["label"] < net.num_classes:
        raise ConfigError(f"label {cfg['label']} outside [0, {net.num_classes})")
    attack = AttackConfig.from_dict(cfg["attack"])
    result = run_attack(net, x[None], np.array([cfg["label"]]), attack).sample(0, net, x, cfg["label"])
    out = cfg["outputs"]
    os.makedirs(os.path.dirname(os.path.abspath(out["perturbed"])), exist_ok=True)
    save_ppm(result.perturbed, out["perturbed"])
    save_ppm(diff_image(x, result.perturbed), out["diff"])
    doc = result.to_json()
    doc["metrics"] = {k: (None if math.isnan(v) else v) for k, v in doc["metrics"].items()}
    doc["predicted"] = int(net.predict(result.perturbed))
    doc["attack"] = attack.name
    write_json(out["result"], doc)
    print(f"success={result.success} iterations={result.iterations} predicted={doc['predicted']}")
    return EXIT_OK


# -- gradcheck ---------------------------------------------------------------


def resolve_gradcheck(args):
    return {"seed": args.seed, "points": args.points, "step": gradcheck.STEP, "corrupt": args.corrupt,
            "outputs": {"report": args.out} if args.out else {}}


def run_gradcheck_cmd(cfg):
    reports = gradcheck.run_gradcheck(cfg["seed"], cfg["points"], cfg["corrupt"], cfg["step"])
    for r in reports:
        print(r.line())
    failed = [r.name for r in reports if not r.passed]
    if cfg["outputs"].get("report"):
        write_json(cfg["outputs"]["report"], {
            "seed": cfg["seed"],
            "ops": [{"name": r.name, "max_rel_error": r.max_rel_error, "tolerance": r.tolerance,
                     "points": r.points, "passed": r.passed} for r in reports],
        })
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


# -- manifest and dispatch ---------------------------------------------------

COMMANDS = {
    "train": (resolve_train, run_train),
    "matrix": (resolve_matrix, run_matrix),
    "sweep": (resolve_sweep, run_sweep),
    "theorem": (resolve_theorem, run_theorem),
    "attack": (resolve_attack_cmd, run_attack_cmd),
    "gradcheck": (resolve_gradcheck, run_gradcheck_cmd),
}


def manifest_path(subcommand, cfg):
    out = cfg["outputs"]
    if subcommand == "train":
        return out["checkpoint"] + ".manifest.json"
    if subcommand == "matrix":
        return os.path.splitext(out["matrix"])[0] + ".manifest.json"
    if subcommand in ("sweep", "attack"):
        first = next(iter(out.values()))
        return os.path.join(os.path.dirname(first), "manifest.json")
    if subcommand == "theorem":
        return os.path.splitext(out["certificates"])[0] + ".manifest.json"
    report = out.get("report")
    return os.path.splitext(report)[0] + ".manifest.json" if report else None


def build_manifest(subcommand, cfg):
    seed = cfg.get("net_seed", cfg.get("seed", cfg.get("data_seed")))
    return {"schema_version": SCHEMA_VERSION, "tool": "advcompose", "version": __version__,
            "subcommand": subcommand, "seed": seed, "config": cfg, "outputs": cfg["outputs"]}


def execute(subcommand, cfg):
    """Write the manifest, then run; returns the exit code."""
    path = manifest_path(subcommand, cfg)
    manifest = build_manifest(subcommand, cfg)
    if path:
        write_json(path, manifest)
    code = COMMANDS[subcommand][1](cfg)
    if isinstance(code, tuple):
        code, results = code
        if path:
            write_json(path, {**manifest, "results": results})
    return code


def _remap_outputs(cfg, out_dir):
    cfg = json.loads(json.dumps(cfg))
    mapped = {k: os.path.join(out_dir, os.path.basename(v)) for k, v in cfg["outputs"].items()}
    cfg["outputs"] = mapped
    return cfg


def run_replay(args):
    try:
        with open(args.manifest, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"manifest not found: {args.manifest}") from None
    subcommand = manifest.get("subcommand")
    if subcommand not in COMMANDS or manifest.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"{args.manifest} is not a replayable manifest")
    cfg = manifest["config"]
    if args.out_dir:
        cfg = _remap_outputs(cfg, args.out_dir)
    return execute(subcommand, cfg)


def _data_args(p, seed, count):
    p.add_argument("--data", default="synth", help="'synth' or 'cifar:<path>' (default: synth)")
    p.add_argument("--data-seed", type=int, default=seed)
    p.add_argument("--count", type=int, default=count, help="synthetic samples per class")
    p.add_argument("--size", type=int, default=16, help="synthetic image side")


def _iteration_args(p):
    p.add_argument("--min-iterations", type=int, default=None, help="override for PGD attacks")
    p.add_argument("--max-iterations", type=int, default=None, help="override for PGD attacks")


def build_parser():
    parser = argparse.ArgumentParser(prog="advcompose", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"advcompose {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a classifier (optionally adversarially)")
    _data_args(p, 1, 200)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--seed", type=int, default=0, help="weight initialization seed")

    p = sub.add_parser("matrix", help="defense x attack accuracy matrix")
    _data_args(p, 2, 100)
    p.add_argument("--defenses", required=True, help="comma-separated checkpoint paths")
    p.add_argument("--attacks", default=",".join(DEFAULT_ATTACKS), help="comma-separated builtin names or JSON paths")
    p.add_argument("--out", required=True, help="matrix CSV path")
    _iteration_args(p)

    p = sub.add_parser("sweep", help="delta x flow strength sweep of the combined attack")
    _data_args(p, 2, 100)
    p.add_argument("--defense", required=True, help="checkpoint path")
    p.add_argument("--delta-grid", required=True, help="comma-separated delta bounds on the 0-255 scale")
    p.add_argument("--flow-grid", required=True, help="comma-separated flow bounds in pixels")
    p.add_argument("--out", required=True, help="output directory")
    _iteration_args(p)

    p = sub.add_parser("theorem", help="contrast scan and delta+flow witness construction")
    p.add_argument("--image", help="PPM/PGM image")
    p.add_argument("--data", help="'synth' or 'cifar:<path>'")
    p.add_argument("--data-seed", type=int, default=1)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--delta", type=float, default=8 / 255, help="intensity bound on the [0, 1] scale")
    p.add_argument("--eps", type=float, default=theory.eps_from_pixels(1.6), help="flow bound in (0, 1] pixels")
    p.add_argument("--scan-samples", type=int, default=None)
    p.add_argument("--scan-seed", type=int, default=0)
    p.add_argument("--out", required=True, help="certificate JSON path")

    p = sub.add_parser("attack", help="attack one image")
    p.add_argument("--input", required=True, help="PPM/PGM image")
    p.add_argument("--label", type=int, required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--attack", default="delta+stadv", help="builtin name or JSON path")
    p.add_argument("--out", required=True, help="output directory")
    _iteration_args(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--points", type=int, default=gradcheck.POINTS)
    p.add_argument("--out", help="optional JSON report")
    p.add_argument("--corrupt", default=None, choices=gradcheck.check_names(), help=argparse.SUPPRESS)

    p = sub.add_parser("replay", help="re-run a saved manifest")
    p.add_argument("manifest")
    p.add_argument("--out-dir", help="write outputs here instead of the recorded paths")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "replay":
            return run_replay(args)
        resolve = COMMANDS[args.command][0]
        try:
            cfg = resolve(args)
        except (FormatError, DataError):
            raise
        except (KeyError, TypeError, ValueError, OSError) as exc:
            raise ConfigError(str(exc)) from None
        return execute(args.command, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, AttackDiverged) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
