"""Command-line entry point.

Exit codes: 0 on success, 2 for usage and configuration errors, 3 for
numerical failures (divergence, singular matrices).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, experiments, metrics, network, numerics, stitching, trainer
from .errors import ConfigError, FormatError, NumericalError
from .intertwiner import Activation, random_element
from .network import GroupAssignment, act_on_weights, random_assignment

OUT_ENV = "INTERTWINERS_OUT"
DEFAULT_OUT_ROOT = "runs"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


# --------------------------------------------------------------------------
# helpers


def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {what} {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} {path} is not valid JSON ({exc.msg} at line {exc.lineno})") from exc


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def config_hash(obj) -> str:
    return hashlib.sha256(_canonical(obj).encode()).hexdigest()


def _out_dir(args, command: str, fingerprint: dict) -> Path:
    if getattr(args, "out", None):
        out = Path(args.out)
    else:
        root = Path(os.environ.get(OUT_ENV, DEFAULT_OUT_ROOT))
        out = root / f"{command}-{config_hash(fingerprint)[:12]}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out_dir: Path, command: str, fingerprint: dict, seeds, artifacts, started: float) -> Path:
    """Write ``manifest.json``: enough to re-run ``command`` and find its outputs."""
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": fingerprint,
        "config_hash": config_hash(fingerprint),
        "seeds": list(seeds),
        "artifacts": sorted(str(Path(a).name) for a in artifacts),
        "tool_version": __version__,
        "format_version": network.FORMAT_VERSION,
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def write_csv(path, rows, fields=None) -> None:
    rows = list(rows)
    fields = fields or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _task_args(p):
    p.add_argument("--data", required=True, choices=trainer.DATASET_KINDS, help="synthetic task")
    p.add_argument("--data-seed", type=int, default=0, help="seed of the task itself (shared by compared models)")
    p.add_argument("--n-train", type=int, default=8000)
    p.add_argument("--n-val", type=int, default=2000)


def _task(args, n0: int, classes: int):
    if args.n_train < 1 or args.n_val < 1:
        raise ConfigError("--n-train and --n-val must be positive")
    return trainer.synth_split(args.data, n0, classes, args.n_train, args.n_val, args.data_seed)


def _task_fingerprint(args):
    return {"data": args.data, "data_seed": args.data_seed, "n_train": args.n_train, "n_val": args.n_val}


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    started = time.time()
    spec = network.NetworkSpec.from_json(_read_json(args.spec, "spec"))
    cfg_dict = _read_json(args.config, "training config") if args.config else {}
    if args.epochs is not None:
        cfg_dict["epochs"] = args.epochs
    if args.lr is not None:
        cfg_dict["learning_rate"] = args.lr
    cfg_dict["seed"] = args.seed
    cfg = trainer.TrainConfig.from_dict(cfg_dict)
    fingerprint = {"spec": spec.to_json(), "train": cfg_dict, **_task_fingerprint(args)}
    out = _out_dir(args, "train", fingerprint)
    tr, va = _task(args, spec.dims[0], spec.dims[-1])
    w0 = network.init_weights(spec, numerics.make_rng(args.seed))
    w, history = trainer.train(spec, w0, tr, cfg, va)
    weights_path, hist_path = out / "weights.json", out / "history.csv"
    network.save_weights(weights_path, spec, w)
    trainer.write_history_csv(hist_path, history)
    write_manifest(out, "train", fingerprint, [args.seed], [weights_path, hist_path], started)
    best = max(r["val_acc"] for r in history)
    print(f"best val_acc {best:.4f}; wrote {weights_path}")
    return EXIT_OK


def cmd_transform(args) -> int:
    started = time.time()
    spec, w = network.load_weights(args.weights)
    if args.assignment == "random":
        ga = random_assignment(spec, numerics.make_rng(args.seed), permutations_only=args.permutations_only)
    elif args.assignment == "identity":
        ga = GroupAssignment.identity(spec)
    else:
        ga = GroupAssignment.from_json(_read_json(args.assignment, "assignment"))
    w2 = act_on_weights(spec, w, ga, force=args.force)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    network.save_weights(out, spec, w2)
    deviation = network.verify_function_equal(spec, w, w2, args.n_samples, numerics.make_rng(args.seed + 1))
    report = {"max_deviation": deviation, "n_samples": args.n_samples, "assignment": ga.to_json(),
              "forced": bool(args.force)}
    report_path = Path(args.report) if args.report else out.with_suffix(".report.json")
    report_path.write_text(json.dumps(report, indent=2) + "\n")
    fingerprint = {"weights": str(args.weights), "assignment": args.assignment, "force": bool(args.force),
                   "permutations_only": bool(args.permutations_only), "n_samples": args.n_samples}
    write_manifest(out.parent, "transform", fingerprint, [args.seed], [out, report_path], started)
    print(f"max deviation {deviation:.3e}; wrote {out}")
    return EXIT_OK


def _format_value(v: float) -> str:
    return f"{v:#.10g}"


def cmd_metric(args) -> int:
    x, _ = metrics.read_features(args.x)
    y, _ = metrics.read_features(args.y)
    value = metrics.compute(args.metric, x, y)
    print(_format_value(value))
    if args.csv:
        path = Path(args.csv)
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            if new:
                writer.writerow(["metric", "x", "y", "value"])
            writer.writerow([args.metric, args.x, args.y, repr(value)])
    return EXIT_OK


def cmd_features(args) -> int:
    started = time.time()
    spec, w = network.load_weights(args.weights)
    tr, va = _task(args, spec.dims[0], spec.dims[-1])
    data = va if args.split == "val" else tr
    x = data.inputs[:args.n] if args.n else data.inputs
    feats = network.forward_upto(spec, w, x, args.layer)
    if isinstance(feats, tuple):
        feats = feats[1]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"layer": args.layer, "model_id": str(args.weights), "seed": args.data_seed}
    metrics.write_features(out, feats, meta)
    artifacts = [out, Path(str(out) + ".json")]
    if args.transformed:
        e = random_element(Activation.relu(), feats.shape[1], numerics.make_rng(args.seed))
        t_out = Path(args.transformed)
        metrics.write_features(t_out, e.apply(feats), {**meta, "transform": e.to_json()})
        artifacts += [t_out, Path(str(t_out) + ".json")]
    fingerprint = {"weights": str(args.weights), "layer": args.layer, "split": args.split, "n": args.n,
                   **_task_fingerprint(args)}
    write_manifest(out.parent, "features", fingerprint, [args.seed], artifacts, started)
    print(f"wrote {out} with shape {feats.shape}")
    return EXIT_OK


_IDENTITY = "identity"


def _stitch_cell(job):
    f_path, g_path, layer, variant, seed, cfg_dict, task, out = job
    f = network.load_weights(f_path)
    g = network.load_weights(g_path)
    tr, va = trainer.synth_split(task["data"], f[0].dims[0], f[0].dims[-1], task["n_train"], task["n_val"],
                                 task["data_seed"])
    if variant == _IDENTITY:
        phi = stitching.FullAffine(np.eye(f[0].dims[layer]))
        st = stitching.Stitched(f[0], f[1], g[0], g[1], layer, phi)
        stitching.bn_recalibrate(st, tr)
        _, acc_f = trainer.evaluate(*f, va)
        _, acc_g = trainer.evaluate(*g, va)
        _, acc_s = st.evaluate(va)
        res = stitching.StitchResult(layer, variant, seed, 100.0 * (0.5 * (acc_f + acc_g) - acc_s), acc_f, acc_g,
                                     acc_s, phi)
    else:
        cfg = stitching.StitchConfig.from_dict(cfg_dict)
        res = stitching.stitch_pipeline(f, g, layer, variant, tr, va, cfg, seed)
    layer_path = Path(out) / f"stitch_l{layer}_{variant}_s{seed}.json"
    stitching.save_stitch_layer(layer_path, res.phi)
    return res.row(), str(layer_path)


def cmd_stitch(args) -> int:
    started = time.time()
    for v in args.variant:
        if v not in stitching.VARIANTS + (_IDENTITY,):
            raise ConfigError(f"unknown variant {v!r}; expected one of {stitching.VARIANTS + (_IDENTITY,)}")
    cfg_dict = _read_json(args.config, "stitch config") if args.config else {}
    stitching.StitchConfig.from_dict(cfg_dict)
    f_spec, _ = network.load_weights(args.f)
    g_spec, _ = network.load_weights(args.g)
    for layer in args.layer:
        if not 1 <= layer < min(f_spec.depth, g_spec.depth):
            raise ConfigError(f"--layer {layer} is not a hidden layer of both networks")
        if f_spec.dims[layer] != g_spec.dims[layer]:
            raise ConfigError(f"--layer {layer}: widths differ ({f_spec.dims[layer]} vs {g_spec.dims[layer]})")
    task = _task_fingerprint(args)
    fingerprint = {"f": str(args.f), "g": str(args.g), "layers": args.layer, "variants": args.variant,
                   "seeds": args.seed, "stitch": cfg_dict, **task}
    out = _out_dir(args, "stitch", fingerprint)
    jobs = [(str(args.f), str(args.g), layer, v, s, cfg_dict, task, str(out))
            for layer in args.layer for v in args.variant for s in args.seed]
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_stitch_cell, jobs))
    else:
        results = [_stitch_cell(j) for j in jobs]
    rows = [r for r, _ in results]
    csv_path = out / "penalties.csv"
    write_csv(csv_path, rows, ["layer", "variant", "seed", "penalty", "acc_f", "acc_g", "acc_stitched"])
    write_manifest(out, "stitch", fingerprint, args.seed, [csv_path] + [p for _, p in results], started)
    for r in rows:
        print(f"layer {r['layer']} {r['variant']} seed {r['seed']}: penalty {r['penalty']:.2f} points")
    return EXIT_OK


def cmd_experiment(args) -> int:
    started = time.time()
    if args.name not in experiments.EXPERIMENTS:
        raise ConfigError(f"unknown experiment {args.name!r}; expected one of {experiments.EXPERIMENTS}")
    user_cfg = _read_json(args.config, "experiment config") if args.config else {}
    cfg = experiments.resolve_config(args.name, user_cfg)
    fingerprint = {"name": args.name, "config": cfg}
    out = _out_dir(args, f"experiment-{args.name}", fingerprint)
    artifacts = []
    seeds = cfg.get("seeds", cfg.get("model_seeds", [cfg.get("model_seed")]))
    if args.name == "min-stitch":
        rows = experiments.min_stitch(cfg)
        path = out / "penalties.csv"
        write_csv(path, rows)
        artifacts.append(path)
        for v in sorted({r["variant"] for r in rows}):
            print(f"{v}: mean penalty {np.mean([r['penalty'] for r in rows if r['variant'] == v]):.2f} points")
    elif args.name == "rotation-penalty":
        rows, summary = experiments.rotation_penalty(cfg)
        write_csv(out / "penalties.csv", rows)
        write_csv(out / "summary.csv", summary)
        artifacts += [out / "penalties.csv", out / "summary.csv"]
        for s in summary:
            print(f"{s['transform']}: mean penalty {s['mean_penalty']:.2f} points")
    elif args.name == "residual-failure":
        report = experiments.residual_failure(cfg)
        path = out / "report.json"
        path.write_text(json.dumps(report, indent=2) + "\n")
        artifacts.append(path)
        t = report["trials"]
        print(f"unequal deviation min {min(r['unequal_deviation'] for r in t):.3e}; "
              f"equal deviation max {max(r['equal_deviation'] for r in t):.3e}")
        print(f"in-block penalty min {min(r['in_block_penalty'] for r in t):.2f}; "
              f"at-connection penalty max {max(r['connection_penalty'] for r in t):.2f}")
    else:
        grids = experiments.metric_grid(cfg)
        layers = cfg["layers"]
        for name, grid in grids.items():
            path = out / f"{name}.csv"
            rows = [{"layer": a, **{f"l{b}": float(grid[i, j]) for j, b in enumerate(layers)}}
                    for i, a in enumerate(layers)]
            write_csv(path, rows)
            artifacts.append(path)
            print(f"{name}: diagonal {np.round(np.diag(grid), 4).tolist()}")
    write_manifest(out, f"experiment {args.name}", fingerprint, seeds, artifacts, started)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="intertwiners", description="Intertwiner-group symmetries, stitching and similarity metrics.")
    p.add_argument("--version", action="version",
                   version=f"intertwiners {__version__} (weights format {network.FORMAT_VERSION}, "
                           f"features {metrics.FEATURE_MAGIC.decode()}, stitch format {stitching.FORMAT_VERSION})")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a network on a synthetic task")
    t.add_argument("--spec", required=True, help="network spec JSON")
    _task_args(t)
    t.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/train-<hash>)")
    t.add_argument("--seed", type=int, default=0, help="initialization and shuffling seed")
    t.add_argument("--config", help="training config JSON")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.set_defaults(func=cmd_train)

    x = sub.add_parser("transform", help="apply a group assignment to a weight file")
    x.add_argument("--weights", required=True)
    x.add_argument("--assignment", required=True, help="assignment JSON, 'random' or 'identity'")
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--out", required=True, help="output weight file")
    x.add_argument("--report", help="report path (default: <out>.report.json)")
    x.add_argument("--force", action="store_true", help="allow unequal residual elements")
    x.add_argument("--permutations-only", action="store_true")
    x.add_argument("--n-samples", type=int, default=1000)
    x.set_defaults(func=cmd_transform)

    m = sub.add_parser("metric", help="similarity of two feature files")
    m.add_argument("--x", required=True)
    m.add_argument("--y", required=True)
    m.add_argument("--metric", required=True, choices=metrics.METRICS)
    m.add_argument("--csv", help="append a result row to this CSV")
    m.set_defaults(func=cmd_metric)

    fe = sub.add_parser("features", help="write hidden features of a network as an ITWF1 file")
    fe.add_argument("--weights", required=True)
    fe.add_argument("--layer", type=int, required=True)
    _task_args(fe)
    fe.add_argument("--split", choices=("train", "val"), default="val")
    fe.add_argument("--n", type=int, default=0, help="number of examples (0 = all)")
    fe.add_argument("--out", required=True)
    fe.add_argument("--transformed", help="also write the features under a random G_ReLU element")
    fe.add_argument("--seed", type=int, default=0)
    fe.set_defaults(func=cmd_features)

    s = sub.add_parser("stitch", help="train stitching layers between two networks")
    s.add_argument("--f", required=True, help="head network weights")
    s.add_argument("--g", required=True, help="tail network weights")
    s.add_argument("--layer", type=int, nargs="+", required=True)
    s.add_argument("--variant", nargs="+", required=True,
                   help=f"one or more of {', '.join(stitching.VARIANTS + (_IDENTITY,))}")
    _task_args(s)
    s.add_argument("--seed", type=int, nargs="+", default=[0])
    s.add_argument("--config", help="stitching config JSON")
    s.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/stitch-<hash>)")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_stitch)

    e = sub.add_parser("experiment", help="run a named desk-scale experiment")
    e.add_argument("--name", required=True, help=f"one of {', '.join(experiments.EXPERIMENTS)}")
    e.add_argument("--config", help="experiment config JSON (overrides defaults)")
    e.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/experiment-<name>-<hash>)")
    e.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
