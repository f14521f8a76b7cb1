"""Command line entry point: generate-data, train, benchmark, report, plot.

Output directories default to ``$PROTOALIGN_OUT/<subcommand>`` (``runs/`` if unset).
The exit status is 0 only if every requested artifact was written.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from .benchmark import PGDParams
from .data import SyntheticDatasetSpec, generate_synthetic, tree_digest
from .harness import RunManifest, output_root, run_benchmark_job, run_train
from .model import ModelConfig
from .reporting import mean_aggregates, plot_reports, read_report
from .training import TrainConfig, load_config

log = logging.getLogger("protoalign")


def _on_off(v: str) -> bool:
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return v == "on"


def _out(args, name: str) -> str:
    return args.out or os.path.join(output_root(), name)


def cmd_generate_data(args) -> list[str]:
    spec = SyntheticDatasetSpec(num_classes=args.num_classes, train_per_class=args.train_per_class,
                                test_per_class=args.test_per_class, image_size=args.image_size,
                                seed=args.seed)
    if args.part_size:
        spec.part_size = tuple(args.part_size)
    out = _out(args, "data")
    # manifest lives next to the tree so it does not enter the dataset digest
    meta_dir = out.rstrip("/") + ".meta"
    manifest = RunManifest("generate-data", dataclasses.asdict(spec), [args.seed])
    manifest.write(meta_dir)
    generate_synthetic(spec, out)
    digest_path = os.path.join(meta_dir, "tree.sha256")
    with open(digest_path, "w") as fh:
        fh.write(tree_digest(out) + "\n")
    outputs = [os.path.join(out, "split.txt"), digest_path]
    manifest.complete(meta_dir, outputs)
    print(out)
    return outputs


def cmd_train(args) -> list[str]:
    if args.config:
        model_cfg, cfg = load_config(args.config)
    else:
        model_cfg, cfg = ModelConfig(), TrainConfig()
    overrides = {}
    if args.lambda_align is not None:
        overrides["lambda_align"] = args.lambda_align
    if args.masking_aug is not None:
        overrides["masking_augmentation"] = args.masking_aug
    if args.smooth_mask is not None:
        overrides["smooth_mask"] = args.smooth_mask
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.skip_prune:
        overrides["prune"] = False
    cfg = dataclasses.replace(cfg, **overrides)
    return run_train(model_cfg, cfg, args.data, _out(args, "train"), args.split)


def cmd_benchmark(args) -> list[str]:
    params = PGDParams(args.eps_total, args.eps_step, args.iters)
    outputs = run_benchmark_job(args.checkpoint, args.data, _out(args, "benchmark"), params,
                                seed=args.seed, split_file=args.split, split=args.split_name,
                                batch_size=args.batch_size)
    agg = read_report(outputs[0]).aggregates
    print(json.dumps(agg, sort_keys=True))
    return outputs


def _named_reports(items) -> dict:
    """``name=path`` pairs; several paths with the same name are kept as a list (seeds)."""
    groups = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = os.path.basename(os.path.dirname(os.path.abspath(item))) or item, item
        groups.setdefault(name, []).append(read_report(path))
    return groups


def cmd_report(args) -> list[str]:
    groups = _named_reports(args.reports)
    rows = {name: mean_aggregates(reps) for name, reps in sorted(groups.items())}
    cols = ["PLC", "PAC", "PRC", "AC", "acc_before", "acc_after", "delta_lb", "n"]
    print("variant".ljust(24) + "".join(c.rjust(11) for c in cols))
    for name, agg in rows.items():
        print(name.ljust(24) + "".join(f"{agg[c]:11.3f}" for c in cols))
    if not args.out:
        return []
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "summary.json")
    with open(path, "w") as fh:
        json.dump(rows, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return [path]


def cmd_plot(args) -> list[str]:
    groups = _named_reports(args.reports)
    for name, reps in groups.items():
        if len(reps) > 1:
            # pool the per-image records of every seed of a variant
            merged = dataclasses.replace(reps[0], records=[r for rep in reps for r in rep.records])
            groups[name] = [merged]
    out = _out(args, "plots")
    result = plot_reports({k: v[0] for k, v in groups.items()}, out)
    for f in result["files"]:
        print(f)
    return result["files"]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="protoalign", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write the synthetic shapes dataset")
    g.add_argument("--out")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--num-classes", type=int, default=8)
    g.add_argument("--train-per-class", type=int, default=120)
    g.add_argument("--test-per-class", type=int, default=40)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--part-size", type=int, nargs=2, metavar=("MIN", "MAX"))
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="run the full training schedule")
    t.add_argument("--config", help="JSON with model/train/aug sections")
    t.add_argument("--data", required=True)
    t.add_argument("--split", help="split file (default: <data>/split.txt)")
    t.add_argument("--lambda-align", type=float)
    t.add_argument("--masking-aug", type=_on_off, metavar="{on,off}")
    t.add_argument("--smooth-mask", type=_on_off, metavar="{on,off}")
    t.add_argument("--seed", type=int)
    t.add_argument("--skip-prune", action="store_true")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("benchmark", help="run the misalignment benchmark on a checkpoint")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--split", help="split file (default: <data>/split.txt)")
    b.add_argument("--split-name", default="test", choices=("train", "test"))
    b.add_argument("--eps-total", type=float, default=0.4)
    b.add_argument("--eps-step", type=float, default=0.01)
    b.add_argument("--iters", type=int, default=40)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--batch-size", type=int, default=64)
    b.add_argument("--out")
    b.set_defaults(func=cmd_benchmark)

    r = sub.add_parser("report", help="tabulate aggregates, averaging reports that share a name")
    r.add_argument("reports", nargs="+", metavar="[NAME=]REPORT.json")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    pl = sub.add_parser("plot", help="bar chart and per-image densities")
    pl.add_argument("reports", nargs="+", metavar="[NAME=]REPORT.json")
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        outputs = args.func(args)
    except Exception as exc:  # report and fail; the manifest keeps status "running"
        log.error("%s failed: %s", args.command, exc)
        if args.verbose:
            raise
        return 1
    missing = [o for o in outputs if not os.path.exists(o)]
    if missing:
        log.error("missing artifacts: %s", missing)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
