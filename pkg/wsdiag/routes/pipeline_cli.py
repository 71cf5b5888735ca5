import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from wsdiag import __version__
from wsdiag.app.exceptions import ParameterError, WsdiagError
from wsdiag.app.main import STAGES, PipelineRunner
from wsdiag.app.schemas.schemas import PipelineConfig

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wsdiag",
        description="Weakly supervised disease labelling of discharge letters",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="pipeline configuration (JSON)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--output", type=Path, help="output directory")
    common.add_argument("--corpus", type=Path, help="ingest this JSONL corpus instead of generating one")
    common.add_argument("--rules", type=Path, help="extraction rules (JSON)")
    common.add_argument("--abbreviations", type=Path, help="abbreviation table (JSON)")
    common.add_argument("--definitions", type=Path, help="disease definitions (JSON)")
    common.add_argument("--embedder", choices=["hashed_ngram", "external"], help="embedding provider")
    common.add_argument("--external-embeddings", type=Path, help="JSONL of precomputed string vectors")
    common.add_argument("--embed-dim", type=int, help="hashed embedding dimension")
    common.add_argument("--pca-dim", type=int, help="PCA output dimension")
    common.add_argument("--variant", choices=["with_diagnosis", "without_diagnosis"], action="append",
                        help="input variant to evaluate (repeatable)")
    common.add_argument("--labels", choices=["weak", "gold"], help="training label source")
    common.add_argument("--selection-level", type=int, choices=[1, 2], help="cluster level used for labelling")

    subparsers = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        subparsers.add_parser(stage, parents=[common], help=f"run the {stage} stage")
    subparsers.add_parser("all", parents=[common], help="run every stage up to evaluate")
    return parser


def apply_overrides(config: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    """
    Command-line flags win over the config file; the merged result is re-validated.
    """
    data = config.model_dump()
    if args.seed is not None:
        data["seed"] = args.seed
    if args.output is not None:
        data["paths"]["output_dir"] = args.output
    for name in ("corpus", "rules", "abbreviations", "definitions", "external_embeddings"):
        value = getattr(args, name)
        if value is not None:
            data["paths"][name] = value
    if args.embedder is not None:
        data["embedder"]["provider"] = "external_file" if args.embedder == "external" else "hashed_ngram"
    if args.embed_dim is not None:
        data["embedder"]["dim"] = args.embed_dim
    if args.pca_dim is not None:
        data["pca_dim"] = args.pca_dim
    if args.variant:
        data["evaluation"]["variants"] = list(dict.fromkeys(args.variant))
    if args.labels is not None:
        data["evaluation"]["labels"] = args.labels
    if args.selection_level is not None:
        data["selection_level"] = args.selection_level
    return PipelineConfig.model_validate(data)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE

    try:
        config = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
        config = apply_overrides(config, args)
        runner = PipelineRunner(config, args.output)
    except (ValidationError, OSError, ParameterError) as e:
        detail = " ".join(str(e).split())
        print(f"invalid configuration: {detail}", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.command == "all":
            report = runner.run_all()
            print(runner.store.path("eval_report.txt").read_text(encoding="utf-8"), end="")
            logger.info("Primary report: %s labels, %s", report.label_source, report.variant.mode)
        else:
            record = runner.run_stage(args.command)
            print(f"{args.command}: {record.status} ({len(record.artifacts)} artifacts)")
    except WsdiagError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK
