"""Command line entry point.

Subcommands (each takes --config <file>, --seed <int>, --out <dir>):

  gen-data   write the configured dataset as JSONL (plus taxonomy.tsv when
             the dataset is taxonomy-style)
  train      one training run; persists record.jsonl / metrics.csv /
             checkpoint.npz / curves.dat under <out>/<run_id>/
  eval       re-evaluate a saved checkpoint (--checkpoint, or <out>/<run_id>)
  sweep      one run per value of the configured sweep axis; writes
             sweep_<axis>.csv (--axis/--values override the config block)
  capacity   distance-permutation and softmax-bottleneck reports
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import data as data_mod
from . import harness
from .evaluation import arr_score_fn, evaluate_examples
from .models import load_checkpoint


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output directory")


def cmd_gen_data(args) -> int:
    config = harness.load_config(args.config)
    out = Path(args.out or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = config.dataset
    if spec.kind == "taxonomy":
        tax = data_mod.gen_taxonomy(spec.num_nodes, spec.max_branching, seed=spec.seed)
        tax.save(out / "taxonomy.tsv")
    examples = harness.build_dataset(spec)
    data_mod.save_examples(examples, out / "dataset.jsonl")
    print(f"wrote {len(examples)} examples to {out / 'dataset.jsonl'}")
    return 0


def cmd_train(args) -> int:
    config = harness.load_config(args.config)
    record = harness.train(config, seed=args.seed, out_root=args.out or config.out_dir)
    row = harness.metrics_row(config, record)
    print(json.dumps(row, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    config = harness.load_config(args.config)
    if config.model.arch != "arr":
        raise SystemExit("eval supports saved autoregressive checkpoints")
    ckpt = args.checkpoint
    if ckpt is None:
        raise SystemExit("--checkpoint is required for eval")
    model = load_checkpoint(ckpt)
    examples = harness.build_dataset(config.dataset)
    n_eval = config.train.eval_examples or len(examples)
    report = evaluate_examples(arr_score_fn(model), examples[:n_eval],
                               config.eval.k_list)
    row = report.as_row()
    print(json.dumps(row, sort_keys=True))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        harness._write_csv(out / "metrics.csv", [row])
    return 0


def cmd_sweep(args) -> int:
    config = harness.load_config(args.config)
    block = config.sweep or {}
    axis = args.axis or block.get("axis")
    values = ([float(v) for v in args.values.split(",")] if args.values
              else block.get("values"))
    if axis is None or values is None:
        raise SystemExit("sweep needs an axis and values (config block or flags)")
    rows = harness.sweep(config, axis, values, seed=args.seed,
                         out_root=args.out or config.out_dir)
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return 0


def cmd_capacity(args) -> int:
    config = harness.load_config(args.config)
    bundle = harness.run_capacity_suite(config.capacity, seed=args.seed,
                                        out_dir=args.out or config.out_dir)
    print(harness.format_capacity_table(bundle), end="")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ranklab",
                                     description="rank-aware ranking laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("gen-data", cmd_gen_data), ("train", cmd_train),
                     ("eval", cmd_eval), ("sweep", cmd_sweep),
                     ("capacity", cmd_capacity)):
        p = sub.add_parser(name)
        _add_common(p)
        if name == "eval":
            p.add_argument("--checkpoint", default=None)
        if name == "sweep":
            p.add_argument("--axis", default=None, choices=("alpha", "beta"))
            p.add_argument("--values", default=None,
                           help="comma-separated sweep values")
        p.set_defaults(fn=fn)
    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
