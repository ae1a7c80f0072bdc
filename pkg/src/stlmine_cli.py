"""
Command-line entry point for STL requirement mining.

Subcommands: gen-data, build-db, mine, query, eval-retrieval.
"""
import argparse
import sys
import time
from pathlib import Path

from dotenv import load_dotenv

from utils.json_utils import dumps
from utils.logging_utils import get_logger, set_log_level
from stlmine.config import ConfigError, load_config
from stlmine.pipeline import DATASET_KINDS, StlMiningPipeline

logger = get_logger("stlmine_cli")


def _fmt(value):
    return "n/a" if value is None else f"{value:.3f}"


# COMMAND REGISTRY


class Command:
    """Base class for subcommands."""

    help = ""

    def __init__(self, name):
        self.name = name

    def add_arguments(self, parser):
        """Register the subcommand's own flags."""

    def overrides(self, args):
        """Dotted config keys set by the subcommand's flags."""
        return {}

    def run(self, pipeline, args):
        """Run the subcommand; return the exit status."""
        raise NotImplementedError("Commands must implement run()")


class GenDataCommand(Command):
    help = "Generate a benchmark dataset CSV"

    def __init__(self):
        super().__init__("gen-data")

    def add_arguments(self, parser):
        parser.add_argument("kind", choices=DATASET_KINDS, help="Dataset generator")
        parser.add_argument("--out", required=True, help="Output CSV path")

    def run(self, pipeline, args):
        manifest = pipeline.gen_data(args.kind, args.out)
        print(dumps(manifest))
        return 0


class BuildDbCommand(Command):
    help = "Build the reference set and the semantic formula database"

    def __init__(self):
        super().__init__("build-db")

    def add_arguments(self, parser):
        parser.add_argument("--out", required=True, help="Index file path")
        parser.add_argument("--reference", help="Reference-set file path (default: <out>.ref)")
        parser.add_argument("--max-nodes", type=int, help="Template node budget")
        parser.add_argument("--n-vars", type=int, help="Number of signal variables")

    def overrides(self, args):
        return {"enumeration.max_nodes": args.max_nodes, "enumeration.n_vars": args.n_vars}

    def run(self, pipeline, args):
        summary = pipeline.build(args.out, args.reference)
        print(dumps(summary))
        return 0


class MineCommand(Command):
    help = "Mine a formula with cross-validation on a labeled dataset"

    def __init__(self):
        super().__init__("mine")

    def add_arguments(self, parser):
        parser.add_argument("data", help="Dataset CSV")
        parser.add_argument("--db", required=True, help="Index file")
        parser.add_argument("--reference", help="Reference-set file (default: <db>.ref)")
        parser.add_argument("--out", help="JSON report path")
        parser.add_argument("--max-nodes", type=int, help="Node budget of the shards searched first")
        parser.add_argument("--single-fold", action="store_true", default=None,
                            help="One stratified 80/20 split instead of 5 folds")
        parser.add_argument("--escalate-mcr", type=float,
                            help="Retry on larger shards when the training MCR exceeds this")

    def overrides(self, args):
        return {"bo.max_nodes": args.max_nodes, "bo.escalate_mcr": args.escalate_mcr,
                "cross_validation.single_fold": args.single_fold, "paths.reference": args.reference}

    def run(self, pipeline, args):
        report = pipeline.mine(args.data, args.db, args.out)
        for fold in report["cross_validation"]["folds"]:
            test = fold["test"]
            print(f"fold {fold['fold']}: MCR={_fmt(test['mcr'])} precision={_fmt(test['precision'])} "
                  f"recall={_fmt(test['recall'])}  {fold['formula']}")
        for metric, stats in report["cross_validation"]["test_summary"].items():
            if stats["mean"] is not None:
                print(f"{metric}: {stats['mean']:.3f} +- {stats['std']:.3f}")
        print(f"best formula: {report['best_formula']}")
        return 0


class QueryCommand(Command):
    help = "Retrieve the stored formulae nearest to a formula"

    def __init__(self):
        super().__init__("query")

    def add_arguments(self, parser):
        parser.add_argument("db", help="Index file")
        parser.add_argument("formula", help="Formula in grammar text, e.g. 'F[0,10] (x0 >= 1)'")
        parser.add_argument("-k", type=int, default=5, help="Number of results")
        parser.add_argument("--reference", help="Reference-set file (default: <db>.ref)")
        parser.add_argument("--max-nodes", type=int, help="Restrict to shards with this node budget")

    def overrides(self, args):
        return {"paths.reference": args.reference}

    def run(self, pipeline, args):
        for hit in pipeline.query(args.db, args.formula, args.k, args.max_nodes):
            print(f"{hit.rank:>3}  {hit.distance:.6f}  {hit.text}")
        return 0


class EvalRetrievalCommand(Command):
    help = "Measure retrieval effectiveness (AP@k, NDCG@k, kernel similarity)"

    def __init__(self):
        super().__init__("eval-retrieval")

    def add_arguments(self, parser):
        parser.add_argument("db", help="Index file")
        parser.add_argument("--reference", help="Reference-set file (default: <db>.ref)")
        parser.add_argument("--out", help="JSON report path")
        parser.add_argument("--csv-out", help="Per-query rows as CSV")
        parser.add_argument("--n-queries", type=int, help="Number of sampled queries")

    def overrides(self, args):
        return {"retrieval_eval.n_queries": args.n_queries, "paths.reference": args.reference}

    def run(self, pipeline, args):
        report = pipeline.eval_retrieval(args.db, args.out, args.csv_out)
        print(dumps(report["summary"]))
        return 0


# Global command registry
_commands = {}


def register_command(command):
    """Register a subcommand."""
    _commands[command.name] = command


def get_command(name):
    """Get a registered subcommand by name."""
    return _commands.get(name)


def list_commands():
    """List all registered subcommands."""
    return list(_commands.keys())


for _command in (GenDataCommand(), BuildDbCommand(), MineCommand(), QueryCommand(), EvalRetrievalCommand()):
    register_command(_command)


def build_parser():
    parser = argparse.ArgumentParser(prog="stlmine", description="Retrieval-augmented STL requirement mining")
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="Seed for every random stage")
    parser.add_argument("--threads", type=int, help="Worker cap (also applied to torch)")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in list_commands():
        command = get_command(name)
        command.add_arguments(subparsers.add_parser(name, help=command.help))
    return parser


def main(argv=None):
    """
    Parse arguments, load the configuration and run one subcommand.

    Returns:
        0 on success, 1 on failure (usage errors exit with 2 from argparse)
    """
    args = build_parser().parse_args(argv)
    env_path = Path(__file__).parent.parent / ".env"
    load_dotenv(dotenv_path=env_path)

    command = get_command(args.command)
    overrides = {"seed": args.seed, "threads": args.threads, **command.overrides(args)}
    try:
        config = load_config(args.config, overrides)
    except ConfigError as exc:
        logger.error(f"Invalid configuration: {exc}")
        return 1
    set_log_level("DEBUG" if args.verbose else config.log_level)

    logger.info(f"Running {command.name} (seed={config.seed})")
    start_time = time.time()
    try:
        status = command.run(StlMiningPipeline(config), args)
    except Exception as exc:
        elapsed = time.time() - start_time
        logger.error(f"{command.name} failed after {elapsed:.2f}s: {exc}", exc_info=args.verbose)
        return 1
    elapsed = time.time() - start_time
    logger.info(f"{command.name} finished in {elapsed:.2f}s")
    return status


if __name__ == "__main__":
    sys.exit(main())
