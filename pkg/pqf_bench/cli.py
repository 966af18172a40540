"""Command-line entry point: ``pqf-bench <command> [options]``."""

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from typing import Callable, Dict, List, Optional, Sequence

from pqf_bench import __version__
from pqf_bench.engine import (
    CampaignResult,
    ExperimentPlan,
    compare_species,
    evaluate_pqf,
    run_campaign,
    simulate_campaign,
)
from pqf_bench.fields import canonical_dumps
from pqf_bench.io import export_results, ingest_clicks, write_clicks
from pqf_bench.linalg import FockPattern
from pqf_bench.models import ResourceModel
from pqf_bench.routing import maps_to_canonical, plan_routing, routing_unitary
from pqf_bench.samplers import BudgetExceededError, Species
from pqf_bench.stats import Pooling, chebyshev_sample_size, lemma_series_gap

logger = logging.getLogger("pqf_bench")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_ERROR = 2

SPECIES = [species.value for species in Species]


def _species_list(value: str) -> List[Species]:
    try:
        return [Species(item.strip()) for item in value.split(",") if item.strip()]
    except ValueError as error:
        raise argparse.ArgumentTypeError(str(error))


def _int_list(value: str) -> List[int]:
    try:
        return [int(item) for item in value.split(",") if item.strip()]
    except ValueError as error:
        raise argparse.ArgumentTypeError(str(error))


def _pattern(value: str) -> FockPattern:
    items = value.split(",") if "," in value else list(value)
    try:
        return FockPattern(int(item) for item in items)
    except ValueError as error:
        raise argparse.ArgumentTypeError(f"invalid pattern {value!r}: {error}")


def _add_output(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--output", "-o", help="write here instead of standard output")


def _add_campaign(parser: argparse.ArgumentParser, n_required: bool = True) -> None:
    group = parser.add_argument_group("campaign")
    if n_required:
        group.add_argument("--n", type=int, required=True, help="photons per run")
    group.add_argument("--gamma", type=float, default=0.5, help="m = ceil(n^(2+gamma))")
    group.add_argument("--m", type=int, help="modes (overrides --gamma)")
    group.add_argument("--loss", type=float, default=0.0, help="loss probability per photon")
    group.add_argument("--overlap", type=float, default=1.0, help="internal-state overlap x")
    group.add_argument("--kprime", type=int, default=10_000, help="runs per unitary")
    group.add_argument("--kdoubleprime", type=int, default=20, help="Haar unitaries")
    group.add_argument("--seed", type=int, default=0)
    group.add_argument("--bunching-modes", type=int, help="K of the bunching test")
    group.add_argument("--dad-alpha", type=float, help="mixing weight of the dad species")
    group.add_argument(
        "--dad-matched",
        action="store_true",
        help="dad species matches the oracle bunching mean instead of the formula",
    )
    group.add_argument("--confidence", type=float, default=0.99, help="loss window confidence")
    group.add_argument("--reference", choices=("auto", "oracle", "formula"), default="auto")
    group.add_argument(
        "--pooling", choices=[pooling.value for pooling in Pooling], default="per_unitary"
    )
    group.add_argument("--workers", type=int, default=1, help="processes, 1 runs in-process")


def _plan_values(args: argparse.Namespace) -> Dict:
    values = {
        "gamma": args.gamma,
        "m": args.m,
        "runs": args.kprime,
        "unitaries": args.kdoubleprime,
        "seed": args.seed,
        "noise": {"loss": args.loss, "overlap": args.overlap},
        "confidence": args.confidence,
        "bunching_modes": args.bunching_modes,
        "dad_alpha": args.dad_alpha,
        "dad_matched": args.dad_matched,
        "reference": args.reference,
        "pooling": args.pooling,
        "thresholds": {"gamma": args.gamma},
    }
    if getattr(args, "n", None) is not None:
        values["n"] = args.n
    if getattr(args, "species", None) is not None and not isinstance(args.species, list):
        values["species"] = args.species
    return values


def _timestamp(args: argparse.Namespace) -> Optional[datetime]:
    return datetime.now(timezone.utc) if args.timestamp else None


def _emit(args: argparse.Namespace, document: Dict) -> None:
    text = canonical_dumps(document)
    if args.output:
        with open(args.output, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _emit_report(args: argparse.Namespace, report: ResourceModel) -> None:
    if args.output:
        export_results(report, args.output)
    else:
        sys.stdout.write(canonical_dumps(report.to_document()))


def _has_failures(results: Sequence[CampaignResult]) -> bool:
    return any(verdict.status == "fail" for result in results for verdict in result.verdicts)


def _log_verdicts(result: CampaignResult) -> None:
    for verdict in result.verdicts:
        logger.info(
            "%-18s %-12s deviation=%s bound=%s error=%s",
            verdict.id,
            verdict.status,
            verdict.deviation,
            verdict.bound,
            verdict.error,
        )


def handle_simulate(args: argparse.Namespace) -> int:
    plan = ExperimentPlan(**_plan_values(args))
    runs = simulate_campaign(plan, workers=args.workers)
    write_clicks(
        args.output,
        [run.batch for run in runs],
        {run.batch.unitary_id: run.unitary for run in runs},
        device={"simulator": f"pqf-bench {__version__}", "species": plan.species.value},
        plan=plan.to_json(),
        inline=args.inline_unitaries,
    )
    return EXIT_OK


def handle_test(args: argparse.Namespace) -> int:
    data = ingest_clicks(args.clicks)
    records = data.records
    logger.info(
        "%d records over %d unitaries, sectors %s", records.count(), len(records), records.sectors()
    )
    values = dict(data.header.get("plan") or {})
    values.update(
        n=data.n,
        m=data.m,
        runs=max([len(batch) for batch in data.batches] + [1]),
        unitaries=len(data.batches),
    )
    for name in ("confidence", "reference", "pooling"):
        if getattr(args, name) is not None:
            values[name] = getattr(args, name)
    plan = ExperimentPlan(**values)
    result = run_campaign(plan, data.batches, data.unitaries, workers=args.workers)
    result.created = _timestamp(args)
    _log_verdicts(result)
    _emit_report(args, result)
    return EXIT_FAILED if args.strict and _has_failures([result]) else EXIT_OK


def handle_pqf(args: argparse.Namespace) -> int:
    if args.plans:
        with open(args.plans) as f:
            plans = [ExperimentPlan(**values) for values in json.load(f)]
    elif args.schedule:
        base = _plan_values(args)
        plans = [ExperimentPlan(**{**base, "n": n}) for n in args.schedule]
    else:
        raise ValueError("pqf needs --schedule or --plans")
    results = [run_campaign(plan, workers=args.workers) for plan in plans]
    report = evaluate_pqf(results, _timestamp(args))
    logger.info("PQF = %s", report.pqf if report.pqf is not None else "none")
    _emit_report(args, report)
    return EXIT_FAILED if args.strict and _has_failures(results) else EXIT_OK


def handle_compare(args: argparse.Namespace) -> int:
    plan = ExperimentPlan(**_plan_values(args))
    comparison = compare_species(plan, args.species, workers=args.workers)
    for species, row in comparison.matrix.items():
        logger.info("%-16s %s", species, " ".join(f"{t}={s}" for t, s in row.items()))
    _emit_report(args, comparison)
    return EXIT_OK


def handle_route(args: argparse.Namespace) -> int:
    plan = plan_routing(args.pattern)
    _emit(
        args,
        {
            "m": plan.m,
            "pattern": list(plan.source),
            "target": list(plan.target),
            "gadgets": plan.to_json(),
            "verified": maps_to_canonical(routing_unitary(plan), plan.source),
        },
    )
    return EXIT_OK


def handle_plan_samples(args: argparse.Namespace) -> int:
    runs = chebyshev_sample_size(args.precision, args.confidence, args.variance_bound)
    _emit(
        args,
        {
            "precision": args.precision,
            "confidence": args.confidence,
            "variance_bound": args.variance_bound,
            "runs": runs,
        },
    )
    return EXIT_OK


def handle_lemma(args: argparse.Namespace) -> int:
    gap = lemma_series_gap(args.x, args.n)
    _emit(args, {"n": args.n, "x": args.x, **gap._asdict()})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pqf-bench",
        description="Simulate noisy BosonSampling devices and run the PQF certification tests.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    commands = parser.add_subparsers(dest="command", metavar="command")
    commands.required = True

    command = commands.add_parser("simulate", help="write a click file for one campaign")
    command.add_argument("--species", choices=SPECIES, default=Species.IDEAL.value)
    _add_campaign(command)
    command.add_argument("--output", "-o", required=True, help="click file to write")
    command.add_argument(
        "--inline-unitaries",
        action="store_true",
        help="embed unitaries in the header instead of a sibling directory",
    )
    command.set_defaults(handler=handle_simulate)

    command = commands.add_parser("test", help="run the five tests on a click file")
    command.add_argument("clicks", help="click file")
    command.add_argument("--confidence", type=float)
    command.add_argument("--reference", choices=("auto", "oracle", "formula"))
    command.add_argument("--pooling", choices=[pooling.value for pooling in Pooling])
    command.add_argument("--workers", type=int, default=1)
    command.add_argument("--strict", action="store_true", help="exit 1 on failing verdicts")
    command.add_argument("--timestamp", action="store_true", help="record creation time")
    _add_output(command)
    command.set_defaults(handler=handle_test)

    command = commands.add_parser("pqf", help="campaigns over increasing n and the resulting PQF")
    command.add_argument(
        "--schedule", type=_int_list, help="comma-separated photon numbers, e.g. 3,4,5"
    )
    command.add_argument("--plans", help="JSON file holding a list of campaign plans")
    command.add_argument("--species", choices=SPECIES, default=Species.IDEAL.value)
    _add_campaign(command, n_required=False)
    command.add_argument("--strict", action="store_true", help="exit 1 on failing verdicts")
    command.add_argument("--timestamp", action="store_true", help="record creation time")
    _add_output(command)
    command.set_defaults(handler=handle_pqf)

    command = commands.add_parser("compare", help="the same campaign for several species")
    command.add_argument(
        "--species",
        type=_species_list,
        default=list(Species),
        help="comma-separated species, default all",
    )
    _add_campaign(command)
    _add_output(command)
    command.set_defaults(handler=handle_compare)

    command = commands.add_parser("route", help="swap gadgets moving a pattern to 1^n 0^(m-n)")
    command.add_argument("pattern", type=_pattern, help="occupations, e.g. 00111 or 0,0,1,1,1")
    _add_output(command)
    command.set_defaults(handler=handle_route)

    command = commands.add_parser("plan-samples", help="runs per unitary from Chebyshev")
    command.add_argument("--precision", type=float, required=True)
    command.add_argument("--confidence", type=float, required=True)
    command.add_argument(
        "--variance-bound",
        type=float,
        default=0.25,
        help="variance bound of the estimated quantity (0.25 for a click indicator)",
    )
    _add_output(command)
    command.set_defaults(handler=handle_plan_samples)

    command = commands.add_parser("lemma", help="geometric series against its expansion")
    command.add_argument("--n", type=int, required=True)
    command.add_argument("--x", type=float, required=True)
    _add_output(command)
    command.set_defaults(handler=handle_lemma)
    return parser


def configure_logging(args: argparse.Namespace) -> logging.Handler:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logger.handlers = [handler]
    logger.setLevel(level)
    return handler


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as stop:
        return stop.code if isinstance(stop.code, int) else EXIT_ERROR
    log_handler = configure_logging(args)
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except (ValueError, OSError, BudgetExceededError) as error:
        print(f"pqf-bench {args.command}: {error}", file=sys.stderr)
        return EXIT_ERROR
    finally:
        logger.removeHandler(log_handler)


if __name__ == "__main__":
    sys.exit(main())
