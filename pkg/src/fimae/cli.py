"""Command-line entry point: gen-data | pretrain | finetune | track | eval.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
Artifacts are written atomically (temp file + rename); a run is fully
reproducible from its echoed configuration and seed.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile

from . import metrics, synthdata
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, format_config, load_config
from .masking import MaskingError
from .modelio import load_tracker, pretrain_entries, tracker_entries
from .pretrain import pretrain
from .synthdata import DataFormatError, GenSpecError
from .tensor import NumericError, ShapeError
from .tracker import TrackerModel, finetune, track_sequence

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _atomic_write_text(path: str, text: str) -> None:
    dirname = os.path.dirname(os.path.abspath(path))
    os.makedirs(dirname, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _add_config_args(p: argparse.ArgumentParser, config_flag: str = "--config") -> None:
    p.add_argument(config_flag, default=None, help="config file (sectioned key = value)")
    p.add_argument("--seed", type=int, default=None, help="override run.seed")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a single config key")
    p.add_argument("--print-config", action="store_true",
                   help="echo the resolved config and exit")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fimae")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic sequence corpus")
    _add_config_args(p, "--spec")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None, help="loss log CSV (default: <out>.log.csv)")

    p = sub.add_parser("finetune", help="supervised tracker training")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--init-ckpt", default=None, help="pretraining checkpoint to start from")
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)

    p = sub.add_parser("track", help="track one sequence from a known initial tip")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sequence", required=True, help="sequence directory")
    p.add_argument("--init", required=True, metavar="U,V", help="initial tip, u=column")
    p.add_argument("--out", required=True, help="trajectory CSV")

    p = sub.add_parser("eval", help="evaluate a tracker over a dataset")
    _add_config_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report CSV")
    p.add_argument("--noise", action="store_true",
                   help="append initialization-noise harness rows")
    return parser


def _maybe_print_config(args) -> "object | None":
    cfg = load_config(getattr(args, "config", None) or getattr(args, "spec", None),
                      overrides=args.set, seed=args.seed)
    if args.print_config:
        sys.stdout.write(format_config(cfg))
        return None
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _maybe_print_config(args)
    if cfg is None:
        return EXIT_OK
    if args.count < 1:
        raise ConfigError(f"--count must be positive, got {args.count}")
    samples = []
    for i in range(args.count):
        category = synthdata.CATEGORIES[i % len(synthdata.CATEGORIES)]
        samples.append(synthdata.generate(cfg.gen_spec(seed=cfg.seed + i, category=category)))
    synthdata.write_dataset(samples, args.out)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _maybe_print_config(args)
    if cfg is None:
        return EXIT_OK
    dataset = synthdata.read_dataset(args.data)
    log = args.log or (args.out + ".log.csv")
    pretrain(dataset, cfg.backbone(), cfg.pretrain_decoder(), cfg.pretrain_settings(),
             seed=cfg.seed, out_ckpt=args.out, log_path=log,
             extra_state=pretrain_entries(cfg.backbone(), cfg.pretrain_decoder()))
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _maybe_print_config(args)
    if cfg is None:
        return EXIT_OK
    dataset = synthdata.read_dataset(args.data)
    pretrained = load_checkpoint(args.init_ckpt) if args.init_ckpt else None
    v = cfg.values
    model = TrackerModel(cfg.backbone(), cfg.tracker_decoder(),
                         template_size=v["tracker.template_size"],
                         search_size=v["tracker.search_size"], seed=cfg.seed)
    log = args.log or (args.out + ".log.csv")
    finetune(dataset, model, pretrained, cfg.finetune_settings(), seed=cfg.seed,
             out_ckpt=args.out, log_path=log, extra_state=tracker_entries(model))
    return EXIT_OK


def cmd_track(args) -> int:
    try:
        u, v = (float(p) for p in args.init.split(","))
    except ValueError as exc:
        raise ConfigError(f"--init expects 'u,v', got {args.init!r}") from exc
    model = load_tracker(args.ckpt)
    sequence = synthdata.read_sequence(args.sequence)
    tips = track_sequence(sequence, (u, v), model)
    rows = ["frame_index,u,v"]
    rows += [f"{t},{tip[0]!r},{tip[1]!r}" for t, tip in enumerate(tips)]
    _atomic_write_text(args.out, "\n".join(rows) + "\n")
    return EXIT_OK


_REPORT_COLUMNS = ("kind,seq_id,category,length,frames_scored,"
                   "median,mean,std,p95,max,tsuc_frame,tsuc_sequence,noise_px,update_first")


def cmd_eval(args) -> int:
    cfg = _maybe_print_config(args)
    if cfg is None:
        return EXIT_OK
    model = load_tracker(args.ckpt)
    samples = synthdata.read_dataset(args.data)
    threshold = cfg["eval.threshold_mm"]
    records = metrics.evaluate_tracker(model, samples, seed=cfg.seed)

    rows = [_REPORT_COLUMNS]

    def fmt_row(kind, seq_id, category, length, scored, agg, tsuc_frame,
                tsuc_sequence="", noise_px="", update_first=""):
        return (f"{kind},{seq_id},{category},{length},{scored},"
                f"{agg['median']!r},{agg['mean']!r},{agg['std']!r},{agg['p95']!r},"
                f"{agg['max']!r},{tsuc_frame!r},{tsuc_sequence},{noise_px},{update_first}")

    for rec in records:
        rows.append(fmt_row("sequence", rec.seq_id, rec.category, rec.length,
                            len(rec.errors_mm), rec.aggregates,
                            metrics.tsuc(rec.errors_mm, threshold)))
    pooled = metrics.pooled_errors(records)
    overall = metrics.aggregate(pooled)
    seq_tsuc = metrics.tsuc([r.errors_mm for r in records], threshold, level="sequence")
    rows.append(fmt_row("overall", "-", "all", len(records), len(pooled), overall,
                        metrics.tsuc(pooled, threshold), repr(seq_tsuc)))

    if args.noise:
        for row in metrics.noise_harness(model, samples,
                                         noise_levels=cfg["eval.noise_levels"],
                                         threshold_mm=threshold, seed=cfg.seed):
            agg = {k: row[k] for k in ("median", "mean", "std", "p95", "max")}
            rows.append(fmt_row("noise", "-", "all", len(records), len(pooled), agg,
                                row["tsuc_frame"], "", repr(row["noise_px"]),
                                repr(row["update_first"])))

    _atomic_write_text(args.out, "\n".join(rows) + "\n")
    return EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "track": cmd_track,
    "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, MaskingError, GenSpecError, ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, CheckpointError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
