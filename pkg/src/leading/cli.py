"""Command-line entry point: gen-data, profile, train, eval.

Exit codes: 0 success, 1 usage error, 2 data error, 3 non-finite numerics.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import archive
from .config import ConfigError, dump_config, load_config
from .encoder import EncoderParams
from .graph import GraphFormatError, TextAttributedGraph, build_normalized_adjacency, \
    load_graph_dir, save_graph_dir, synthetic_graph
from .sampler import FanoutSpec, profile_encoding_redundancy
from .trainer import NonFiniteError, TrainConfig, downstream_details, generate_embeddings, train

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load(path: str) -> TextAttributedGraph:
    try:
        return load_graph_dir(path)
    except (GraphFormatError, OSError) as e:
        raise DataError(str(e)) from e


# --
# commands

def cmd_gen_data(args) -> int:
    try:
        g = synthetic_graph(args.nodes, args.classes, args.intra_p, args.inter_p,
                            tokens_per_node=args.tokens_per_node,
                            vocab_per_class=args.vocab_per_class, shared_vocab=args.shared_vocab,
                            seed=args.seed, train_per_class=args.train_per_class,
                            num_val=args.num_val)
    except ValueError as e:
        raise UsageError(str(e)) from e
    try:
        save_graph_dir(g, args.out)
    except OSError as e:
        raise DataError(f"cannot write {args.out}: {e}") from e
    print(f"N={g.num_nodes} M={g.num_edges} train={g.train_ids().size} "
          f"val={g.val_ids().size} test={g.test_ids().size}")
    return 0


def cmd_profile(args) -> int:
    g = _load(args.data)
    try:
        fanout = FanoutSpec.parse(args.fanout)
    except ValueError as e:
        raise UsageError(str(e)) from e
    targets = g.train_ids() if args.targets == "train" else None
    rep = profile_encoding_redundancy(g, args.batch_size, fanout, args.epochs, args.schedule,
                                      args.seed, pipeline2_batch=args.pipeline2_batch or None,
                                      target_ids=targets)
    if args.out:
        Path(args.out).write_text(rep.to_json() + "\n", encoding="utf-8")
    print(f"target {rep.mean_target:.2f}, neighbor {rep.mean_neighbor:.2f}, "
          f"total {rep.mean_total:.2f}")
    return 0


def _train_config(args) -> TrainConfig:
    try:
        cfg = load_config(args.config) if args.config else TrainConfig()
        over = {k: getattr(args, k) for k in ("mode", "seed", "epochs", "schedule", "batch_size",
                                              "fanout") if getattr(args, k) is not None}
        return replace(cfg, **over)
    except (ConfigError, ValueError) as e:
        raise UsageError(str(e)) from e
    except OSError as e:
        raise UsageError(f"cannot read config: {e}") from e


def cmd_train(args) -> int:
    cfg = _train_config(args)
    g = _load(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train(g, cfg)
    m = res.metrics
    (out / "metrics.jsonl").write_text(m.to_jsonl(), encoding="utf-8")
    summary = dict(m.final, enc_with_grad=m.enc_with_grad, enc_no_grad=m.enc_no_grad,
                   peak_cache_rows=m.peak_cache_rows, spmm_madds=m.spmm_madds)
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    archive.save(out / "encoder.bin", res.params.tensors())
    archive.save(out / "head.bin", res.head.tensors())
    if res.bank is not None:
        res.bank.save(out / "bank.bin")
    if res.state is not None:
        archive.save(out / "state.bin", res.state.tensors())
    print(f"{cfg.mode}: test_acc {summary.get('test_acc', summary['head_test_acc']):.4f}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    try:
        cfg = load_config(ckpt / "config.txt")
        params = EncoderParams.from_tensors(archive.load(ckpt / "encoder.bin"),
                                            cfg.encoder.activation)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"bad checkpoint {ckpt}: {e}") from e
    g = _load(args.data)
    emb = generate_embeddings(params, g)
    if emb.shape[0] != g.num_nodes:
        raise DataError("checkpoint does not match graph")
    d = downstream_details(emb, g, cfg.downstream, cfg.seed,
                           build_normalized_adjacency(g, cfg.self_loops))
    target = Path(args.out) if args.out else ckpt / "eval.json"
    target.write_text(json.dumps(d, indent=1) + "\n", encoding="utf-8")
    print(f"val_acc {d['val_acc']:.4f} test_acc {d['test_acc']:.4f}")
    return 0


# --
# parser

class _Help(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action):
        text = action.help or ""
        hidden = action.default is None or action.default is False \
            or action.default == argparse.SUPPRESS
        if not hidden and not action.required and "%(default)" not in text:
            text += " (default: %(default)s)"
        return text


def build_parser() -> argparse.ArgumentParser:
    fmt = _Help
    p = _Parser(prog="leading", description="Decoupled encoder fine-tuning on text graphs.",
                formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic text-attributed graph",
                       formatter_class=fmt)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--nodes", type=int, default=200, help="number of nodes")
    g.add_argument("--classes", type=int, default=2, help="number of classes")
    g.add_argument("--intra-p", type=float, default=0.8, help="edge probability within a class")
    g.add_argument("--inter-p", type=float, default=0.05, help="edge probability across classes")
    g.add_argument("--tokens-per-node", type=int, default=16, help="tokens per node text")
    g.add_argument("--vocab-per-class", type=int, default=50, help="class-specific vocabulary size")
    g.add_argument("--shared-vocab", type=int, default=200, help="shared vocabulary size")
    g.add_argument("--train-per-class", type=int, default=20, help="labeled train nodes per class")
    g.add_argument("--num-val", type=int, default=500, help="validation nodes (capped at half the rest)")
    g.add_argument("--seed", type=int, default=0, help="random seed")
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("profile", help="count encoder invocations per node",
                       formatter_class=fmt)
    r.add_argument("--data", required=True, help="graph directory")
    r.add_argument("--batch-size", type=int, default=16, help="target batch size")
    r.add_argument("--fanout", default="10,5", help="per-hop neighbor caps")
    r.add_argument("--epochs", type=int, default=1, help="epochs to replay")
    r.add_argument("--schedule", choices=("coupled", "leading"), default="coupled", help="which training loop to count")
    r.add_argument("--pipeline2-batch", type=int, default=0, help="0 means --batch-size")
    r.add_argument("--targets", choices=("all", "train"), default="all", help="target node set")
    r.add_argument("--seed", type=int, default=0, help="run seed")
    r.add_argument("--out", default=None, help="report JSON path")
    r.set_defaults(func=cmd_profile)

    t = sub.add_parser("train", help="fine-tune the encoder", formatter_class=fmt)
    t.add_argument("--data", required=True, help="graph directory")
    t.add_argument("--config", default=None, help="key = value config file")
    t.add_argument("--mode", choices=("leading", "coupled", "cascaded"), default=None,
                   help="overrides config (config default: leading)")
    t.add_argument("--seed", type=int, default=None, help="overrides config (default 0)")
    t.add_argument("--epochs", type=int, default=None, help="overrides config (default 50)")
    t.add_argument("--batch-size", type=int, default=None, help="overrides config (default 10)")
    t.add_argument("--fanout", default=None, help="overrides config (default 10,5)")
    t.add_argument("--schedule", choices=("sequential", "concurrent"), default=None,
                   help="overrides config (default sequential)")
    t.add_argument("--out", required=True, help="run directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="downstream accuracy from a checkpoint", formatter_class=fmt)
    e.add_argument("--data", required=True, help="graph directory")
    e.add_argument("--checkpoint", required=True, help="run directory written by train")
    e.add_argument("--out", default=None, help="result JSON (default CHECKPOINT/eval.json)")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
