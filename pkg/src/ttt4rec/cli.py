"""Command-line entry point: ``ttt4rec {synth,prepare,train,eval,recommend,gradcheck}``.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""
import argparse
import csv
import dataclasses
import hashlib
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import _accel
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .data import (RegimeSpec, build_dataset, cycle_regime, is_prepared, parse_interactions,
                   read_prepared, sparse_regime, summary_rows, synth_generate, write_prepared)
from .errors import CheckpointError, ConfigError, DataError, NumericalError
from .gradcheck import MicroConfig, run_suite
from .metrics import evaluate
from .model import TTT4Rec, fit, recommend

log = logging.getLogger("ttt4rec")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


def _comment_block(lines):
    return "".join(f"# {line}\n" for line in lines)


def _load_dataset(run):
    if not run.data:
        raise ConfigError(["data: path to an interaction or prepared dataset file is required"])
    if is_prepared(run.data):
        return read_prepared(run.data)
    parsed = parse_interactions(run.data, strict=run.strict_parse)
    return build_dataset(parsed, run.min_seq_len, run.ratios)


def cmd_synth(args):
    rng = np.random.default_rng(args.seed)
    if args.cycle:
        regimes = [cycle_regime(args.items)]
    else:
        supports = [None] * args.regimes
        if args.disjoint and args.regimes > 1:
            supports = np.array_split(np.arange(1, args.items + 1), args.regimes)
        regimes = [sparse_regime(args.items, rng, args.branching, s) for s in supports]
    switches = [int(s) for s in args.switch.split(",")] if args.switch else []
    spec = RegimeSpec(args.items, args.length, regimes, switches)
    synth_generate(args.seed, args.users, spec, args.out)
    print(f"wrote {args.users * args.length} interactions to {args.out}")
    return EXIT_OK


def cmd_prepare(args):
    parsed = parse_interactions(args.input, strict=args.strict)
    dataset = build_dataset(parsed, args.min_len, args.ratios)
    write_prepared(dataset, args.out, source=args.input)
    summary_path = Path(str(args.out) + ".summary.csv")
    buf = io.StringIO()
    buf.write(_comment_block([f"ratios={args.ratios}", f"min_seq_len={args.min_len}",
                              f"malformed_rows={parsed.malformed}"]))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["statistic", "value"])
    writer.writerows(summary_rows(dataset))
    summary_path.write_text(buf.getvalue(), encoding="utf-8")
    sys.stdout.write(buf.getvalue())
    digest = hashlib.sha256(Path(args.out).read_bytes()).hexdigest()
    print(f"# dataset_sha256={digest}")
    return EXIT_OK


def cmd_train(args):
    run = load_config(args.config)
    T.set_check_finite(run.check_finite)
    dataset = _load_dataset(run)
    model = TTT4Rec(run.model, dataset.n_items)
    report_dir = Path(run.report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    rows = []

    def on_epoch(epoch, loss):
        rows.append((epoch, loss))
        print(f"epoch {epoch} loss {loss:.6f}", file=sys.stderr)

    fit(model, dataset, on_epoch=on_epoch)
    save_checkpoint(model, run.checkpoint, dataset.items)
    with open(report_dir / "train_loss.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(_comment_block(run.lines()))
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss"])
        for epoch, loss in rows:
            writer.writerow([epoch, f"{loss:.10f}"])
    print(f"saved checkpoint to {run.checkpoint}")
    return EXIT_OK


def cmd_eval(args):
    run = load_config(args.config)
    T.set_check_finite(run.check_finite)
    dataset = _load_dataset(run)
    model, _ = load_checkpoint(args.checkpoint or run.checkpoint, run.model)
    adapt = run.adapt_at_eval and not args.no_adapt
    run = dataclasses.replace(run, adapt_at_eval=adapt)  # header records the effective setting
    report = evaluate(model, dataset, args.segment, run.cutoff_values, adapt,
                      run.eval_batch_size, run.model.max_context)
    report_dir = Path(run.report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    suffix = "" if adapt else "_frozen"
    buf = io.StringIO()
    report.write_csv(buf, run.lines())
    (report_dir / f"eval_{args.segment}{suffix}.csv").write_text(buf.getvalue(), encoding="utf-8")
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_recommend(args):
    model, header = load_checkpoint(args.checkpoint)
    items = header.get("items")
    if not items:
        raise CheckpointError("checkpoint carries no item vocabulary")
    vocab = {item: i + 1 for i, item in enumerate(items)}
    query = [s.strip() for s in args.items.split(",") if s.strip()]
    unknown = [s for s in query if s not in vocab]
    if unknown:
        raise DataError(f"unknown item ids: {', '.join(unknown)}")
    if not query:
        raise DataError("--items must name at least one item")
    ranked = recommend(model, [vocab[s] for s in query], args.top_k, adapt=not args.no_adapt)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["rank", "item_id", "probability"])
    for r, (idx, prob) in enumerate(ranked, start=1):
        writer.writerow([r, items[idx - 1], f"{prob:.8f}"])
    return EXIT_OK


def cmd_gradcheck(args):
    micro = MicroConfig()
    if args.micro_config:
        try:
            micro = MicroConfig.from_text(Path(args.micro_config).read_text(encoding="utf-8"))
        except (KeyError, ValueError) as exc:
            raise ConfigError([str(exc)]) from None
    if args.tol is not None:
        micro = MicroConfig(**{**micro.__dict__, "tol": args.tol})
    reports = run_suite(micro, corrupt=args.inject_fault)
    for r in reports:
        print(r)
    failed = [r.name for r in reports if not r.passed]
    worst = max(r.max_rel_error for r in reports)
    print(f"# {len(reports) - len(failed)}/{len(reports)} passed, worst rel err {worst:.3e}")
    return EXIT_NUMERIC if failed else EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="ttt4rec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic Markov interaction file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--items", type=int, default=200)
    p.add_argument("--length", type=int, default=40)
    p.add_argument("--regimes", type=int, default=1)
    p.add_argument("--switch", default="", help="comma-separated positions where regimes change")
    p.add_argument("--branching", type=int, default=3)
    p.add_argument("--disjoint", action="store_true", help="give each regime its own item subset")
    p.add_argument("--cycle", action="store_true", help="single deterministic cycle over all items")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="filter, split and summarise an interaction file")
    p.add_argument("--input", required=True)
    p.add_argument("--ratios", default="3:2:5")
    p.add_argument("--min-len", type=int, default=5)
    p.add_argument("--out", required=True)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="HR@K / NDCG@K on a split segment")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--segment", choices=("train", "val", "test"), default="test")
    p.add_argument("--no-adapt", action="store_true", help="frozen ablation (inner lr forced to 0)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("recommend", help="top-K next items for an ad-hoc sequence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--items", required=True, help='comma-separated item ids, oldest first: "a,b,c"')
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--no-adapt", action="store_true")
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--micro-config")
    p.add_argument("--tol", type=float)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _accel.apply_thread_cap()
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
