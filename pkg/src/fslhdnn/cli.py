"""``fhdnn`` command line: cluster, simulate, hdc-train, hdc-infer, episodes, costs.

Every run writes a JSON manifest (flattened config, seed, sha256 of each
artifact). ``fhdnn --replay MANIFEST`` re-executes the recorded command.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__, harness, hdc, pesim, wclust

log = logging.getLogger("fhdnn")

EXIT_DATA = 1
EXIT_USAGE = 2


class DataError(Exception):
    pass


def write_atomic(path: str | Path, data: bytes | str) -> None:
    path = Path(path)
    if path.exists() and not path.is_file():
        # renaming over a device or directory would destroy it
        raise DataError(f"{path} exists and is not a regular file")
    if isinstance(data, str):
        data = data.encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def read_kv_config(path: str | Path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Keys may use dashes or underscores."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


# -- subcommands ----------------------------------------------------------

def cmd_cluster(args) -> dict:
    with open(args.weights, "rb") as fh:
        banks = wclust.read_dense_model(fh)
    layers = tuple(wclust.share_patterns(b, args.G, args.group_size) for b in banks)
    buf = io.BytesIO()
    wclust.write_model(buf, wclust.ClusteredModel(layers))
    write_atomic(args.out, buf.getvalue())
    print(f"clustered {len(layers)} layers (G={args.G}) -> {args.out}")
    return {"outputs": [args.out], "inputs": [args.weights]}


def cmd_simulate(args) -> dict:
    model = wclust.load_model(args.model)
    if not 0 <= args.layer < len(model.layers):
        raise DataError(f"layer {args.layer} out of range: model has {len(model.layers)} layers")
    layer = model.layers[args.layer]
    cfg = pesim.ArrayConfig(rows=args.rows, cols=args.cols)
    report = pesim.simulate_layer(layer, cfg)
    payload = report.to_dict() | {"layer": args.layer}
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    outputs = []
    if args.json:
        write_atomic(args.json, text + "\n")
        outputs.append(args.json)
    if args.report:
        path = Path(args.report)
        old = path.read_text() if path.exists() else "layer,cycles,utilization,ops\n"
        row = f"{args.layer},{report.cycles},{report.pe_utilization:.6f},{report.accum_ops + report.mult_ops}\n"
        write_atomic(path, old + row)
        outputs.append(args.report)
    return {"outputs": outputs, "inputs": [args.model]}


def _load_labeled(args) -> harness.LabeledFeatures:
    return harness.load_features(args.features, args.labels)


def cmd_hdc_train(args) -> dict:
    data = _load_labeled(args)
    N = args.N if args.N is not None else int(data.labels.max()) + 1
    cfg = hdc.HdcConfig(F=data.F, D=args.D, N=N, seed=args.seed, update_rule=args.update_rule)
    mem = hdc.fsl_train_single_pass(zip(data.features, data.labels), hdc.ClassMemory.empty(N, cfg.D), cfg)
    buf = io.BytesIO()
    hdc.write_memory(buf, mem)
    write_atomic(args.out, buf.getvalue())
    print(f"trained {N} classes on {len(data)} samples (D={cfg.D}, {mem.saturation_events} saturations) -> {args.out}")
    return {"outputs": [args.out], "inputs": [args.features, args.labels or str(harness.label_path(args.features))]}


def cmd_hdc_infer(args) -> dict:
    mem = hdc.load_memory(args.memory)
    data = _load_labeled(args)
    cfg = hdc.HdcConfig(F=data.F, D=mem.D, N=mem.N, infer_bits=args.infer_bits, seed=args.seed)
    H = hdc.encode(data.features, hdc.CrpSeedBlock.from_seed(cfg.seed), cfg.D, cfg.binarize)
    pred, dist = hdc.classify_batch(H, mem, cfg.infer_bits)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "predicted", "label", "min_distance"])
    for i, (p, y) in enumerate(zip(pred, data.labels)):
        w.writerow([i, int(p), int(y), int(dist[i].min())])
    write_atomic(args.out, buf.getvalue())
    print(f"accuracy {np.mean(pred == data.labels):.4f} on {len(data)} samples -> {args.out}")
    return {"outputs": [args.out], "inputs": [args.memory, args.features]}


def cmd_episodes(args) -> dict:
    # validate every sweep point before doing any work
    hdc_seed = args.seed if args.hdc_seed is None else args.hdc_seed
    if args.features:
        data = _load_labeled(args)
    else:
        classes = args.classes or 2 * args.way
        data = harness.make_synthetic_dataset(classes, args.per_class, args.F, args.spread, args.seed)
    cfgs = [hdc.HdcConfig(F=data.F, D=D, N=args.way, infer_bits=b, seed=hdc_seed,
                          update_rule=args.update_rule)
            for D in args.D for b in args.infer_bits]
    reports = []
    for shot in args.shot:
        for cfg in cfgs:
            reports.extend(harness.run_episodes(data, cfg, args.way, shot, args.query,
                                                args.episodes, args.seed, args.k, args.workers))
    write_atomic(args.out, harness.report_csv(reports))
    outputs = [args.out]
    summary = harness.summarize(reports)
    summary["sweep"] = {"D": args.D, "infer_bits": args.infer_bits, "shot": args.shot}
    summary_path = args.summary or str(Path(args.out).with_suffix(".json"))
    write_atomic(summary_path, harness.summary_json(summary))
    outputs.append(summary_path)
    print(f"{len(reports)} episodes: hdc {summary['hdc_acc']['mean']:.4f} "
          f"+/- {summary['hdc_acc']['stderr']:.4f}, knn {summary['knn_acc']['mean']:.4f} "
          f"+/- {summary['knn_acc']['stderr']:.4f}")
    return {"outputs": outputs, "inputs": [args.features] if args.features else []}


def cmd_costs(args) -> dict:
    if args.weights:
        with open(args.weights, "rb") as fh:
            specs = [b.spec for b in wclust.read_dense_model(fh)]
    else:
        specs = harness.vgg16_specs()
    rows = harness.cost_table(specs, args.G, args.group_size)
    cols = list(rows[0])
    buf = io.StringIO()
    w = csv.DictWriter(buf, cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: f"{v:.4f}" if isinstance(v, float) else v for k, v in r.items()})
    print(f"{'layer':>6} {'shape':>18} {'dense ops':>15} {'clust ops':>15} {'ops x':>8} "
          f"{'dense B':>12} {'clust B':>10} {'params x':>9}")
    for r in rows:
        print(f"{r['layer']:>6} {r['shape']:>18} {r['dense_ops']:>15,} {r['clustered_ops']:>15,} "
              f"{r['ops_reduction']:>8.2f} {r['dense_bytes']:>12,} {r['clustered_bytes']:>10,} "
              f"{r['params_reduction']:>9.2f}")
    outputs = []
    if args.out:
        write_atomic(args.out, buf.getvalue())
        outputs.append(args.out)
    return {"outputs": outputs, "inputs": [args.weights] if args.weights else []}


# -- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fhdnn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--replay", metavar="MANIFEST", help="re-run the command recorded in a manifest")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    def common(sp):
        sp.add_argument("--config", help="key=value file merged beneath command-line flags")
        sp.add_argument("--manifest", help="manifest path (default: <first output>.manifest.json)")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("cluster", help="cluster a dense model file into a FHC1 model")
    common(sp)
    sp.add_argument("--weights", required=True, help="FHD1 dense model")
    sp.add_argument("--G", type=int, default=16)
    sp.add_argument("--group-size", type=int, default=None, help="channels per pattern group (default: all)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_cluster)

    sp = sub.add_parser("simulate", help="simulate one clustered layer on the PE array")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--layer", type=int, default=0)
    sp.add_argument("--report", help="CSV file to append (layer,cycles,utilization,ops)")
    sp.add_argument("--json", help="also write the SimReport JSON here")
    sp.add_argument("--rows", type=int, default=4)
    sp.add_argument("--cols", type=int, default=16)
    sp.set_defaults(func=cmd_simulate)

    for name, func in (("hdc-train", cmd_hdc_train), ("hdc-infer", cmd_hdc_infer)):
        sp = sub.add_parser(name)
        common(sp)
        sp.add_argument("--features", required=True, help="FHT1 feature file (n x 1 x F)")
        sp.add_argument("--labels", help="FHL1 label file (default: <features>.labels)")
        sp.add_argument("--out", required=True)
        if name == "hdc-train":
            sp.add_argument("--D", type=int, default=4096)
            sp.add_argument("--N", type=int, default=None)
            sp.add_argument("--update-rule", choices=hdc.UPDATE_RULES, default="paper-literal")
        else:
            sp.add_argument("--memory", required=True)
            sp.add_argument("--infer-bits", type=int, default=16)
        sp.set_defaults(func=func)

    sp = sub.add_parser("episodes", help="few-shot episode sweep, HDC vs kNN-L1")
    common(sp)
    sp.add_argument("--way", type=int, default=10)
    sp.add_argument("--shot", type=int_list, default=[5])
    sp.add_argument("--query", type=int, default=15)
    sp.add_argument("--episodes", type=int, default=20)
    sp.add_argument("--D", type=int_list, default=[4096])
    sp.add_argument("--infer-bits", type=int_list, default=[16])
    sp.add_argument("--update-rule", choices=hdc.UPDATE_RULES, default="paper-literal")
    sp.add_argument("--hdc-seed", type=int, default=None, help="seed-block seed (default: --seed)")
    sp.add_argument("--k", type=int, default=1)
    sp.add_argument("--F", type=int, default=64)
    sp.add_argument("--classes", type=int, default=None, help="synthetic classes (default: 2 x way)")
    sp.add_argument("--per-class", type=int, default=40)
    sp.add_argument("--spread", type=float, default=1.8)
    sp.add_argument("--features", help="use this FHT1 feature file instead of synthetic data")
    sp.add_argument("--labels")
    sp.add_argument("--workers", type=int, default=None)
    sp.add_argument("--out", default="episodes.csv")
    sp.add_argument("--summary", help="JSON summary path (default: <out>.json)")
    sp.set_defaults(func=cmd_episodes)

    sp = sub.add_parser("costs", help="dense vs clustered op/param table")
    common(sp)
    sp.add_argument("--model", choices=["vgg16"], default="vgg16")
    sp.add_argument("--weights", help="FHD1 dense model to cost instead of the built-in table")
    sp.add_argument("--G", type=int, default=16)
    sp.add_argument("--group-size", type=int, default=None)
    sp.add_argument("--out", help="write the table as CSV")
    sp.set_defaults(func=cmd_costs)
    return p


def parse(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        kv = read_kv_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(kv) - known
        if unknown:
            raise DataError(f"{args.config}: unknown keys {sorted(unknown)}")
        # string defaults go through each option's type conversion
        sub.set_defaults(**kv)
        args = parser.parse_args(argv)
    return args


def normalized_argv(args: argparse.Namespace) -> list[str]:
    """Flattened flag list reproducing ``args`` without any config file."""
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices[args.command]
    out = [args.command]
    for action in sub._actions:
        if not action.option_strings or action.dest in ("help", "config", "manifest"):
            continue
        value = getattr(args, action.dest, None)
        if value is None:
            continue
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        out += [action.option_strings[0], str(value)]
    return out


def write_manifest(args: argparse.Namespace, result: dict, argv: list[str]) -> str:
    outputs = [o for o in result.get("outputs", []) if o]
    path = args.manifest or (f"{outputs[0]}.manifest.json" if outputs else f"fhdnn-{args.command}.manifest.json")
    config = {k: v for k, v in vars(args).items() if k not in ("func", "replay", "verbose")}
    manifest = {
        "tool": "fhdnn",
        "version": __version__,
        "command": args.command,
        "argv": normalized_argv(args),
        "original_argv": argv,
        "seed": args.seed,
        "config": config,
        "env": {"FHDNN_THREADS": os.environ.get("FHDNN_THREADS")},
        "artifacts": {
            "outputs": {o: sha256(o) for o in outputs},
            "inputs": {i: sha256(i) for i in result.get("inputs", []) if i and Path(i).exists()},
        },
    }
    write_atomic(path, json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse(argv)
    except SystemExit as e:  # argparse usage errors and --help
        return int(e.code or 0)
    except (DataError, OSError, ValueError) as e:
        _error(e)
        return EXIT_DATA
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.replay:
        try:
            manifest = json.loads(Path(args.replay).read_text())
            replay = manifest["argv"]
        except (OSError, ValueError, KeyError) as e:
            _error(e)
            return EXIT_DATA
        if manifest.get("config", {}).get("manifest"):
            replay = replay + ["--manifest", manifest["config"]["manifest"]]
        return main(replay)
    if not args.command:
        build_parser().print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        result = args.func(args)
        write_manifest(args, result, argv)
    except (DataError, OSError, ValueError, KeyError) as e:
        _error(e)
        return EXIT_DATA
    return 0


def _error(exc: Exception) -> None:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
