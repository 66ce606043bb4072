"""Command-line entry point: ``aftcil {synth,ingest,train,eval,report,grid}``."""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .aft import NumericError
from .backbone import BackboneConfig, load_checkpoint
from .container import ContainerError
from .data import SIMILAR_PAIR, DataError, SyntheticSpec, ingest, synth_generate
from .engine import RunConfig, TrainState, evaluate, make_task_sequence, pair_confusion, run_method
from .frontend import AudioError
from .report import (
    RunDirError,
    format_table,
    load_config,
    load_run,
    rank_rows,
    render_report,
    split_config,
    summary_rows,
    write_run,
)

log = logging.getLogger("aftcil")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# the search grid used for the loss weights
DEFAULT_ALPHAS = (0.1, 1.0, 1.5, 2.0)
DEFAULT_BETAS = (1.0, 5.0, 15.0, 18.0, 20.0)
DEFAULT_GAMMAS = (1.0, 5.0, 15.0, 18.0, 20.0)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file of run settings; flags override it")
    p.add_argument("--dataset", help="manifest CSV or dataset directory")
    p.add_argument("--method", help="Finetune, Joint, Base, Base+AFT, Base+AFT+POS (alias AFT)")
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--selective", choices=["on", "off"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int, dest="batch_size")
    p.add_argument("--workers", type=int, default=1, help="parallel feature extraction threads")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aftcil", description="Exemplar-free class-incremental sound classification.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate the synthetic benchmark corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--clips", type=int, default=40, help="clips per class")
    p.add_argument("--seconds", type=float, default=3.0)

    p = sub.add_parser("ingest", help="validate a dataset and cache its MFCCs")
    p.add_argument("--dataset", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--test-folds", help="comma-separated folds to use as the test split")

    p = sub.add_parser("train", help="run one method over the task sequence")
    _add_run_flags(p)
    p.add_argument("--out", help="run directory to create")

    p = sub.add_parser("eval", help="re-evaluate a stored run's checkpoint")
    p.add_argument("run", help="run directory")
    p.add_argument("--dataset", help="defaults to the dataset recorded in the run")

    p = sub.add_parser("report", help="tabulate stored runs and draw the accuracy curve")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", required=True, help="directory for summary.csv and the curve")

    p = sub.add_parser("grid", help="sweep the loss weights and rank the cells")
    _add_run_flags(p)
    p.add_argument("--out", help="directory holding one run directory per cell")
    p.add_argument("--alphas", type=_floats, default=list(DEFAULT_ALPHAS))
    p.add_argument("--betas", type=_floats, default=list(DEFAULT_BETAS))
    p.add_argument("--gammas", type=_floats, default=list(DEFAULT_GAMMAS))
    return parser


def resolve_run_config(args) -> tuple[RunConfig, dict]:
    data = load_config(args.config) if args.config else {}
    for key in ("method", "seed", "alpha", "beta", "gamma", "epochs", "batch_size"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    if getattr(args, "selective", None) is not None:
        data["selective"] = args.selective == "on"
    for key in ("dataset", "out"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    try:
        cfg, rest = split_config(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    unknown = sorted(set(rest) - {"dataset", "out"})
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    if not rest.get("dataset"):
        raise UsageError("no dataset given (use --dataset or a 'dataset' config key)")
    return cfg, rest


def _pair_rate(report, class_names) -> Optional[float]:
    # the planted similar pair only exists in corpora built by ``synth``
    if report.config["method"] == "Joint" or max(SIMILAR_PAIR) >= len(class_names):
        return None
    try:
        return pair_confusion(report, SIMILAR_PAIR)
    except (ValueError, IndexError):
        return None


def _train_one(cfg: RunConfig, dataset: str, out: Optional[str], workers: int = 1):
    _, data, _ = ingest(dataset, workers=workers)
    report = run_method(cfg, data)
    rate = _pair_rate(report, data.class_names)
    if out:
        write_run(report, out, dataset=str(Path(dataset).resolve()), pair_rate=rate)
    return report


def cmd_synth(args) -> int:
    manifest = synth_generate(
        SyntheticSpec(n_classes=args.classes, clips_per_class=args.clips, seconds=args.seconds, seed=args.seed),
        args.out)
    print(f"wrote {len(manifest.entries)} clips in {len(manifest.class_names)} classes to {args.out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    folds = args.test_folds.split(",") if args.test_folds else None
    _, data, summary = ingest(args.dataset, workers=args.workers, use_fold_split=folds)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, rest = resolve_run_config(args)
    report = _train_one(cfg, rest["dataset"], rest.get("out"), args.workers)
    bwt = "-" if report.bwt is None else f"{report.bwt:.4f}"
    print(f"{cfg.method} seed {cfg.seed}: ACC {report.acc:.4f} BWT {bwt}")
    if rest.get("out"):
        print(f"run written to {rest['out']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run = load_run(args.run)
    cfg, rest = split_config(run["config"])
    dataset = args.dataset or rest.get("dataset")
    if not dataset:
        raise UsageError("the run records no dataset; pass --dataset")
    _, data, _ = ingest(dataset)
    seq = make_task_sequence(data.labels, data.n_classes, cfg, data.splits)
    model, head, extra = load_checkpoint(Path(args.run) / "model.ckpt",
                                         BackboneConfig(in_channels=data.features.shape[1]))
    order = [int(c) for c in extra["class_order"]]
    if order != seq.class_order:
        raise DataError([f"class order of the checkpoint {order} does not match the dataset split {seq.class_order}"])
    hidx = seq.head_index()
    y_head = np.array([hidx[int(c)] for c in data.labels], dtype=np.int64)
    x = data.features
    if "standardizer_mean" in extra:
        x = (x - extra["standardizer_mean"][None, :, None]) / extra["standardizer_std"][None, :, None]
    with T.default_dtype(cfg.dtype):
        state = TrainState(model, head)
        accs, _ = evaluate(state, seq.tasks, x.astype(T.get_default_dtype()), y_head)
    stored = list(run["matrix"].final_row())
    out = {"per_task": accs, "acc": float(np.mean(accs)), "matches_stored": accs == stored}
    print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_report(args) -> int:
    rows = render_report(args.runs, args.out)
    print(format_table(rows))
    print(f"summary, curve CSV and SVG written to {args.out}")
    return EXIT_OK


def cmd_grid(args) -> int:
    base, rest = resolve_run_config(args)
    out = Path(rest.get("out") or "grid")
    rows = []
    for a, b, g in itertools.product(args.alphas, args.betas, args.gammas):
        cell = out / f"a{a:g}_b{b:g}_g{g:g}"
        cfg = RunConfig.from_dict({**base.to_dict(), "alpha": a, "beta": b, "gamma": g})
        report = _train_one(cfg, rest["dataset"], str(cell), args.workers)
        log.info("cell %s: ACC %.4f", cell.name, report.acc)
        rows.extend(summary_rows([load_run(cell)]))
    ranked = rank_rows(rows)
    with open(out / "grid_ranking.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(ranked[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(ranked)
    print(format_table(ranked))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "ingest": cmd_ingest, "train": cmd_train, "eval": cmd_eval,
            "report": cmd_report, "grid": cmd_grid}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"aftcil: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"aftcil: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"aftcil: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, AudioError, ContainerError, RunDirError) as exc:
        print(f"aftcil: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"aftcil: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
