"""Command-line front end: ``clmuce {generate,train,evaluate,similarity-study}``.

On failure the last line on stderr is one JSON object, e.g.
``{"error": "missing-dependency", "message": "..."}``, and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import load_config
from .numerics.tensor import ConfigurationError
from .pipeline import (
    AXES,
    DependencyError,
    ManifestError,
    OutputExistsError,
    PipelineError,
    Run,
    cmd_evaluate,
    cmd_generate,
    cmd_similarity_study,
    cmd_train,
)
from .storage import StorageError

EXIT_CODES = {
    "configuration": 2,
    "missing-dependency": 3,
    "output-exists": 4,
    "input-mismatch": 5,
    "storage": 6,
    "pipeline": 7,
    "internal": 1,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clmuce", description="Contrastive-feature multi-user channel estimation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON experiment config (defaults apply to omitted keys)")
        p.add_argument("--seed", type=int, help="root seed; overrides the config")
        p.add_argument("--out", default="runs/default", help="output directory (default: runs/default)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        return p

    common(sub.add_parser("generate", help="simulate the scene and write the three datasets"))
    p = common(sub.add_parser("train", help="train one stage (or all) of the pipeline"))
    p.add_argument("--stage", default="all", help="clnet, dsnet:<q>, joint, baselines or all (default)")
    p.add_argument("--axis", choices=("pilot", "labels"), help="train the per-point models of a sweep")
    p = common(sub.add_parser("evaluate", help="NMSE sweep along one axis; writes CSV and SVG"))
    p.add_argument("--axis", choices=AXES, default="snr")
    common(sub.add_parser("similarity-study", help="similarity-versus-distance curves for raw and feature vectors"))
    return parser


def _classify(exc: BaseException) -> str:
    if isinstance(exc, ConfigurationError):
        return "configuration"
    if isinstance(exc, (DependencyError, ManifestError, OutputExistsError, PipelineError)):
        return exc.code
    if isinstance(exc, StorageError):
        return "storage"
    return "internal"


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        ctx = Run.main(cfg, args.out, args.force)
        if args.command == "generate":
            for path in cmd_generate(ctx):
                print(path)
        elif args.command == "train":
            cmd_train(ctx, args.stage, args.axis)
            print(ctx.models.manifest_path)
        elif args.command == "evaluate":
            result = cmd_evaluate(ctx, args.axis)
            for m in result.missing:
                print(f"missing: {m}", file=sys.stderr)
            print(result.csv_path)
        elif args.command == "similarity-study":
            print(cmd_similarity_study(ctx))
    except Exception as exc:  # noqa: BLE001 - every failure becomes one machine-readable line
        code = _classify(exc)
        if code == "internal" and args.verbose:
            logging.exception("unexpected failure")
        print(json.dumps({"error": code, "message": str(exc)}), file=sys.stderr)
        return EXIT_CODES[code]
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
