"""Command line interface: ``dabench <subcommand> [options]``.

Every subcommand exits 0 on success. On failure it prints one line to
stderr, ``error: <ErrorType>: <message>`` (or a JSON object with
``--format json``), and exits 2 for invalid input or 1 for failed steps.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import torch

__all__ = ["main", "build_parser"]


def _global_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--manifest", type=Path, help="experiment manifest (JSON)")
    p.add_argument("--seed", type=int, default=None, help="seed (synth) or single fine-tuning seed override")
    p.add_argument("--profile", choices=("paper", "desk"), default=None)
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--threads", type=int, default=1, help="torch threads; 1 is the deterministic reference")
    p.add_argument("--format", choices=("csv", "json"), default="csv", dest="fmt")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_options()
    parser = argparse.ArgumentParser(prog="dabench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="build the synthetic benchmark")
    p.add_argument("--cases-per-domain", type=int, default=8)
    p.add_argument("--shape", type=int, nargs=3, default=(64, 64, 32))

    p = sub.add_parser("ingest", parents=[common], help="convert external volumes to native format")
    p.add_argument("--cases", type=Path, required=True, help="CSV with id,domain,image,mask[,spacing]")
    p.add_argument("--axial-axis", type=int, default=2, choices=(0, 1, 2))

    for name, helptext in (("train-source", "train one model per source domain"),
                           ("oracle", "cross-validated oracle scores per domain"),
                           ("transfer", "baseline scores of source models on other domains"),
                           ("finetune", "fine-tune source models on target data and score them"),
                           ("study", "run the full study (resumable)")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--domain", default=None, help="restrict to one source/target domain")
        p.add_argument("--source", default=None)
        p.add_argument("--target", default=None)
        p.add_argument("--strategy", default=None)

    p = sub.add_parser("evaluate", parents=[common], help="Dice / surface Dice for mask pairs")
    p.add_argument("--pairs", type=Path, required=True, help="CSV with case_id,prediction,ground_truth")
    p.add_argument("--tolerance", type=float, default=1.0, help="surface Dice tolerance in mm")

    p = sub.add_parser("report", parents=[common], help="aggregate a record store into tables and figures")
    p.add_argument("--records", type=Path, default=None, help="record store (default: <output_dir>/records.jsonl)")
    p.add_argument("--levels", nargs="*", default=None)
    p.add_argument("--strategies", nargs="*", default=None)
    return parser


class UsageError(ValueError):
    pass


def _manifest(args):
    from .study import validate_manifest

    if args.manifest is None:
        raise UsageError(f"{args.command} needs --manifest")
    seeds = [args.seed] if args.seed is not None else None
    return validate_manifest(args.manifest, profile=args.profile, output_dir=args.out, seeds=seeds)


def _emit(args, rows: list[dict]) -> None:
    if args.fmt == "json":
        print(json.dumps(rows, indent=2, sort_keys=True))
        return
    if not rows:
        return
    writer = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)


def _cmd_synth(args) -> int:
    from .synth import DEFAULT_DOMAINS, build_benchmark

    out = args.out or Path("benchmark")
    path = build_benchmark(DEFAULT_DOMAINS, args.cases_per_domain, tuple(args.shape), (1.0, 1.0, 1.0),
                           seed=args.seed if args.seed is not None else 0, out_dir=out)
    _emit(args, [{"manifest": str(path)}])
    return 0


def _cmd_ingest(args) -> int:
    from .ingest import ingest_cases

    path = ingest_cases(args.cases, args.out or Path("ingested"), args.axial_axis)
    _emit(args, [{"manifest": str(path)}])
    return 0


_STAGES = {
    "train-source": ("source",),
    "oracle": ("oracle",),
    "transfer": ("transfer",),
    "finetune": ("finetune",),
    "study": ("source", "oracle", "transfer", "finetune", "report"),
}


def _cmd_stage(args) -> int:
    from .study import Study

    manifest = _manifest(args)
    filters = {"source": args.source or args.domain, "target": args.target or args.domain,
               "strategy": args.strategy}
    if args.command == "oracle":
        filters = {"target": args.domain or args.target}
    outcomes = Study(manifest, threads=args.threads).run(_STAGES[args.command], filters)
    _emit(args, [{"step": o.step, "status": o.status, "error": o.error or ""} for o in outcomes])
    failed = [o for o in outcomes if o.status in ("failed", "blocked")]
    if failed:
        first = failed[0]
        raise StepError(f"{len(failed)} step(s) did not complete; first: {first.step}: {first.error}")
    return 0


class StepError(RuntimeError):
    pass


def _cmd_evaluate(args) -> int:
    from .metrics import dice, surface_dice
    from .volume import Mask, load_native

    if not args.pairs.exists():
        raise FileNotFoundError(f"pairs file not found: {args.pairs}")
    rows = []
    with args.pairs.open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            pred = load_native(args.pairs.parent / row["prediction"])
            truth = load_native(args.pairs.parent / row["ground_truth"])
            if not isinstance(pred, Mask) or not isinstance(truth, Mask):
                raise ValueError(f"case {row['case_id']}: both files must be u8 masks")
            rows.append({
                "case_id": row["case_id"],
                "dice": f"{dice(pred, truth).value:.12g}",
                "surface_dice": f"{surface_dice(pred, truth, args.tolerance).value:.12g}",
                "tolerance_mm": f"{args.tolerance:g}",
            })
    if args.out is not None and args.fmt == "csv":
        args.out.parent.mkdir(parents=True, exist_ok=True)
        with args.out.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["case_id", "dice", "surface_dice", "tolerance_mm"],
                                    lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    else:
        _emit(args, rows)
    return 0


def _cmd_report(args) -> int:
    from .evaluation import RecordStore
    from .study import report_from_records

    manifest = _manifest(args) if args.manifest is not None else None
    records_path = args.records or (manifest.output_dir / "records.jsonl" if manifest else None)
    if records_path is None:
        raise UsageError("report needs --records or --manifest")
    records = RecordStore(records_path).read()
    if manifest is not None:
        domains, levels, strategies = manifest.domains, manifest.levels, manifest.strategies
    else:
        domains = sorted({r.target_domain for r in records} | {r.source_domain for r in records})
        levels = args.levels or sorted({r.availability for r in records if r.availability})
        strategies = args.strategies or sorted({r.method for r in records if r.availability})
    out = args.out or (manifest.output_dir / "report" if manifest else records_path.parent / "report")
    files = report_from_records(records, domains, levels, strategies, out)
    _emit(args, [{"file": str(f)} for f in files])
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "ingest": _cmd_ingest,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    handler = _COMMANDS.get(args.command, _cmd_stage)
    try:
        return handler(args)
    except StepError as exc:
        return _fail(args, exc, 1)
    except (ValueError, KeyError, FileNotFoundError, OSError, RuntimeError) as exc:
        return _fail(args, exc, 2)


def _fail(args, exc: Exception, code: int) -> int:
    message = str(exc).replace("\n", " ")
    if args.fmt == "json":
        print(json.dumps({"error": type(exc).__name__, "message": message}), file=sys.stderr)
    else:
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
