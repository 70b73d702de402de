import argparse
import logging
import sys
from dataclasses import replace
from typing import Optional, Sequence

from tools.common import settings
from tools.common.errors import SimulationException
from tools.plasmode.plasmode_tables import write_plasmode_tables
from tools.report.report_builder import build_report
from tools.simulate.harness import RunConfig, run, summarize_run
from tools.truth.truth_engine import DEFAULT_BATCHES, ORACLE, TruthCache, compute_truth

_logger = logging.getLogger("confounder_sim")

EXIT_USAGE = 2


def _load_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.from_yaml(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.n_jobs is not None:
        overrides["n_jobs"] = args.n_jobs
    if getattr(args, "output_dir", None):
        overrides["output_dir"] = args.output_dir
    return replace(config, **overrides) if overrides else config


def cmd_truth(args: argparse.Namespace) -> int:
    cache_path = settings.truth_cache_path(args.cache)
    truth = compute_truth(
        args.scenario, args.estimand, args.flavor, draws=args.draws, seed=args.seed or 0,
        batches=args.batches, n_jobs=settings.n_jobs(args.n_jobs),
        cache=TruthCache(cache_path) if cache_path else None,
    )
    print("scenario,estimand,flavor,value,mc_draws,mc_se")
    print(f"{truth.scenario},{truth.estimand},{truth.flavor},{truth.value:.10g},{truth.mc_draws},{truth.mc_se:.4g}")
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    result = run(_load_config(args))
    print(result.records_path)
    for path in result.summary_paths:
        print(path)
    print(result.manifest_path)
    return 0


def cmd_summarize(args: argparse.Namespace) -> int:
    config = _load_config(args)
    for path in summarize_run(args.records, config, args.output_dir):
        print(path)
    return 0


def cmd_plasmode_generate(args: argparse.Namespace) -> int:
    paths = write_plasmode_tables(
        args.outcome, n=args.n, seed=args.seed or 0, out_dir=settings.output_dir(args.output_dir),
        cohort_size=args.cohort_size, replicate=args.replicate,
    )
    for path in paths.values():
        print(path)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    result = build_report(args.summaries, settings.output_dir(args.output_dir))
    print(result.text_path)
    print(result.html_path)
    for panel in result.panels:
        print(panel)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="confounder-sim",
                                     description="Missing-confounder estimation simulations.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    truth = sub.add_parser("truth", help="Monte-Carlo truth for one scenario and estimand")
    truth.add_argument("scenario", help='scenario id, e.g. "X1/Y1.1/M1.1" or "plasmode-1yr"')
    truth.add_argument("--estimand", default="mRD")
    truth.add_argument("--flavor", default=ORACLE, choices=["oracle", "census"])
    truth.add_argument("--draws", type=int, default=2_000_000)
    truth.add_argument("--batches", type=int, default=DEFAULT_BATCHES)
    truth.add_argument("--seed", type=int)
    truth.add_argument("--n-jobs", type=int)
    truth.add_argument("--cache", help="truth cache file")
    truth.set_defaults(func=cmd_truth)

    simulate = sub.add_parser("simulate", help="run a scenario grid")
    simulate.add_argument("--config", required=True)
    simulate.add_argument("--seed", type=int)
    simulate.add_argument("--n-jobs", type=int)
    simulate.add_argument("--output-dir")
    simulate.set_defaults(func=cmd_simulate)

    summarize = sub.add_parser("summarize", help="recompute summaries from a records file")
    summarize.add_argument("--config", required=True)
    summarize.add_argument("--records", required=True)
    summarize.add_argument("--seed", type=int)
    summarize.add_argument("--n-jobs", type=int)
    summarize.add_argument("--output-dir")
    summarize.set_defaults(func=cmd_summarize)

    plasmode = sub.add_parser("plasmode-generate", help="write the stand-in cohort and one plasmode draw")
    plasmode.add_argument("--outcome", default="1yr", choices=["1yr", "5yr"])
    plasmode.add_argument("--n", type=int, default=2000)
    plasmode.add_argument("--cohort-size", type=int, default=50337)
    plasmode.add_argument("--replicate", type=int, default=0)
    plasmode.add_argument("--seed", type=int)
    plasmode.add_argument("--output-dir")
    plasmode.set_defaults(func=cmd_plasmode_generate)

    report = sub.add_parser("report", help="text report and panels from summary files")
    report.add_argument("summaries", nargs="*")
    report.add_argument("--output-dir")
    report.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SimulationException as e:
        _logger.debug("命令失败", exc_info=True)
        print(str(e), file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
