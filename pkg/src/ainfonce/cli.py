"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import analysis
from .data import save_csv_dataset
from .encoder import MlpEncoder, Model
from .persistence import (CsvWriter, RunConfig, load_checkpoint, load_config,
                          save_checkpoint)
from .train_eval import METRIC_FIELDS, TrainingDiverged, evaluate, finetune, pretrain

log = logging.getLogger("ainfonce")

COMMANDS = ("pretrain", "finetune", "eval", "sweep-alpha", "dist-hist", "gradcheck", "gen-data")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    train_set, _ = cfg.datasets()
    metrics_path = args.metrics or f"{args.out}.metrics.csv"
    state = {}

    def on_epoch(row, enc):
        writer.write(row)
        state["enc"] = enc.copy()

    with CsvWriter(metrics_path, METRIC_FIELDS, cfg) as writer:
        try:
            enc, _ = pretrain(cfg.train_config(), train_set, on_epoch=on_epoch)
        except TrainingDiverged:
            if "enc" in state:
                save_checkpoint(state["enc"], args.out)
                log.error("training diverged; last good checkpoint written to %s", args.out)
            raise
    save_checkpoint(enc, args.out)
    print(f"checkpoint: {args.out}\nmetrics: {metrics_path}")
    return 0


def _encoder_of(obj) -> MlpEncoder:
    return obj.encoder if isinstance(obj, Model) else obj


def cmd_finetune(args) -> int:
    cfg = _config(args)
    train_set, _ = cfg.datasets()
    enc = _encoder_of(load_checkpoint(args.checkpoint))
    mode = args.mode or cfg.finetune.mode
    model = finetune(enc, train_set, mode, cfg.finetune_config())
    save_checkpoint(model, args.out)
    print(f"model ({mode}): {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    _, test_set = cfg.datasets()
    model = load_checkpoint(args.checkpoint)
    if not isinstance(model, Model):
        raise UsageError("eval needs a finetuned checkpoint (encoder + classifier)")
    report = evaluate(model, test_set, cfg.eval_attack, seed=cfg.seed).as_dict()
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_sweep_alpha(args) -> int:
    cfg = _config(args)
    rows = analysis.alpha_sweep(cfg, args.alphas, args.epochs, args.finetune_epochs)
    with CsvWriter(args.out, analysis.SWEEP_FIELDS, cfg) as w:
        for r in rows:
            w.write(r)
    for r in rows:
        print(f"alpha={r['alpha']:.3f} SA={r['SA']:.4f} RA={r['RA']:.4f} collapse={r['collapse']:.4f}")
    return 0


def cmd_dist_hist(args) -> int:
    cfg = _config(args)
    _, test_set = cfg.datasets()
    enc = _encoder_of(load_checkpoint(args.checkpoint))
    rows = analysis.distance_histogram(enc, test_set, args.bins)
    with CsvWriter(args.out, analysis.HIST_FIELDS, cfg) as w:
        for r in rows:
            w.write(r)
    print(f"mean negative-pair distance: {analysis.mean_negative_distance(enc, test_set):.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    results = analysis.run_gradcheck(seed, args.suite or None)
    failed = [r for r in results if not r.ok]
    by_suite = {}
    for r in results:
        by_suite.setdefault(r.suite, []).append(r)
    for suite, rs in by_suite.items():
        worst = max(rs, key=lambda r: r.error)
        status = "PASS" if all(r.ok for r in rs) else "FAIL"
        print(f"{status} {suite}: {len(rs)} checks, worst {worst.name} rel.err {worst.error:.3e} "
              f"(tol {worst.tol:g})")
    for r in failed:
        print(f"  failed {r.suite}/{r.name}: {r.error:.3e}")
    return 0 if not failed else 2


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    train_set, test_set = cfg.datasets()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_csv_dataset(train_set, out / "train.csv")
    save_csv_dataset(test_set, out / "test.csv")
    print(f"wrote {train_set.n} train / {test_set.n} test rows to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ainfonce", description="Asymmetric InfoNCE adversarial contrastive lab")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}",
                           parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        return sp

    sp = common(sub.add_parser("pretrain", help="adversarial contrastive pretraining"))
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--metrics", help="metrics CSV (default: <out>.metrics.csv)")
    sp.set_defaults(fn=cmd_pretrain)

    sp = common(sub.add_parser("finetune", help="LP / ALF / AFF finetuning"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mode", choices=("LP", "ALF", "AFF"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_finetune)

    sp = common(sub.add_parser("eval", help="standard and robust accuracy"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", help="write the JSON report here as well")
    sp.set_defaults(fn=cmd_eval)

    sp = common(sub.add_parser("sweep-alpha", help="fixed-alpha sweep (CSV alpha,SA,RA,collapse)"))
    sp.add_argument("--alphas", type=_float_list, required=True)
    sp.add_argument("--epochs", type=int, help="pretraining epochs per alpha")
    sp.add_argument("--finetune-epochs", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_sweep_alpha)

    sp = common(sub.add_parser("dist-hist", help="negative-pair distance histogram"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--bins", type=int, default=20)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_dist_hist)

    sp = common(sub.add_parser("gradcheck", help="run the gradient-check suites"), config=False)
    sp.add_argument("--suite", action="append", choices=sorted(analysis.GRAD_SUITES))
    sp.set_defaults(fn=cmd_gradcheck)

    sp = common(sub.add_parser("gen-data", help="write the configured dataset as CSV"))
    sp.add_argument("--out", required=True, help="output directory (train.csv, test.csv)")
    sp.set_defaults(fn=cmd_gen_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
