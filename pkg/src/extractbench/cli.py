"""Command line entry point: ``bench run|sweep|report|gen-sbm``."""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys

from . import harness
from .graph import generate_sbm, make_splits, save_graph_bundle
from .report import REPORT_KINDS, report, write_csv

log = logging.getLogger("extractbench")


def _seeds(text):
    return [int(s) for s in text.split(",") if s.strip()]


def _load_config(args):
    cfg = harness.ExperimentConfig.load(args.config)
    if getattr(args, "track", None):
        cfg.track = args.track
    if getattr(args, "seeds", None):
        cfg.seeds = args.seeds
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    if getattr(args, "workers", None):
        cfg.workers = args.workers
    cfg.__post_init__()
    return cfg


def _emit(cfg, records, stem):
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = os.path.join(cfg.output_dir, f"{stem}.jsonl")
    harness.write_jsonl(records, path)
    with open(os.path.join(cfg.output_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
    errors = sum(1 for r in records if r.get("error"))
    over = harness.check_budget_accounting(records)
    print(f"{len(records)} records ({errors} errors) -> {path}")
    if over:
        print(f"budget accounting violated in {len(over)} runs", file=sys.stderr)
        return 2
    return 0


def cmd_run(args):
    cfg = _load_config(args)
    return _emit(cfg, harness.run_track(cfg), cfg.track)


def cmd_sweep(args):
    cfg = _load_config(args)
    return _emit(cfg, harness.sweep(cfg), "sweep")


def cmd_report(args):
    paths = sorted(glob.glob(os.path.join(args.inp, "*.jsonl"))) if os.path.isdir(args.inp) else [args.inp]
    if not paths:
        print(f"no .jsonl files under {args.inp}", file=sys.stderr)
        return 1
    records = [r for p in paths for r in harness.read_jsonl(p)]
    cols, rows = report(records, args.kind)
    write_csv(cols, rows, args.out)
    print(f"{args.kind}: {len(rows)} rows -> {args.out}")
    return 0


def cmd_gen_sbm(args):
    g = generate_sbm(args.nodes, args.classes, args.p_in, args.p_out, args.feat_dim, args.feat_signal,
                     args.seed, name=args.name)
    splits = make_splits(g, tuple(args.fractions), args.seed)
    save_graph_bundle(g, splits, args.out)
    print(f"wrote {g.num_nodes} nodes, {g.num_edges} edges -> {args.out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="bench", description="Graph model extraction and ownership benchmark")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one track over a config grid")
    r.add_argument("--config", required=True)
    r.add_argument("--track", choices=harness.TRACKS)
    r.add_argument("--out")
    r.add_argument("--seeds", type=_seeds)
    r.add_argument("--workers", type=int)
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("sweep", help="expand the config's sweep grid")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--workers", type=int)
    s.set_defaults(fn=cmd_sweep)

    rep = sub.add_parser("report", help="summarise JSONL records to CSV")
    rep.add_argument("--in", dest="inp", required=True)
    rep.add_argument("--kind", choices=REPORT_KINDS, required=True)
    rep.add_argument("--out", required=True)
    rep.set_defaults(fn=cmd_report)

    g = sub.add_parser("gen-sbm", help="write a stochastic block model graph bundle")
    g.add_argument("--out", required=True)
    g.add_argument("--nodes", type=int, default=600)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--p-in", type=float, default=0.05)
    g.add_argument("--p-out", type=float, default=0.005)
    g.add_argument("--feat-dim", type=int, default=32)
    g.add_argument("--feat-signal", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--name", default=None)
    g.add_argument("--fractions", type=float, nargs=4, default=list(harness.DEFAULT_FRACTIONS),
                   metavar=("TRAIN", "VAL", "TEST", "QUERY"))
    g.set_defaults(fn=cmd_gen_sbm)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
