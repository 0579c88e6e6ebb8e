"""Command line entry point: ``python -m app run <config> [--preset NAME] [--out DIR] [--seed S]``."""
import argparse
import asyncio
import logging
import os
import sys

from dotenv import load_dotenv

from app import __version__
from app.config import key_registry, list_presets, load_config, preset_path
from app.errors import ConfigError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def configure_logging():
    logging.basicConfig(
        level=os.getenv("LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="python -m app",
        description="Random Batch Monte Carlo sampling of N-body Gibbs measures",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run an experiment from a config file, preset or manifest")
    run.add_argument("config", nargs="?", help="TOML config or manifest.json of an earlier run")
    run.add_argument("--preset", help="shipped preset to start from")
    run.add_argument("--out", help="output directory")
    run.add_argument("--seed", type=int, help="override the base seed")
    run.add_argument("--no-ledger", action="store_true", help="do not record the run in the ledger")

    presets = commands.add_parser("presets", help="list shipped presets, or print one")
    presets.add_argument("name", nargs="?")

    commands.add_parser("keys", help="print the documented config keys")
    return parser


def _run(args) -> int:
    from app.experiments import execute, run_recorded

    try:
        config = load_config(args.config, preset=args.preset, seed=args.seed, output_dir=args.out)
    except ConfigError as e:
        logger.error(str(e))
        return EXIT_CONFIG

    try:
        if args.no_ledger:
            manifest = execute(config)
        else:
            _, manifest = asyncio.run(run_recorded(config))
    except Exception as e:
        logger.exception(f"{config.kind} run failed: {e}")
        return EXIT_RUNTIME

    out = config.resolved_output_dir()
    print(f"{config.kind} finished in {manifest['wall_time_seconds']:.1f}s -> {out}")
    for name in manifest["outputs"]:
        print(f"  {out / name}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    load_dotenv()
    configure_logging()
    args = build_parser().parse_args(argv)

    if args.command == "run":
        if args.config is None and args.preset is None:
            logger.error("give a config file or --preset")
            return EXIT_CONFIG
        return _run(args)

    if args.command == "presets":
        if args.name is None:
            for name in list_presets():
                print(name)
            return EXIT_OK
        try:
            print(preset_path(args.name).read_text(encoding="utf-8"), end="")
        except ConfigError as e:
            logger.error(str(e))
            return EXIT_CONFIG
        return EXIT_OK

    for line in key_registry():
        print(line)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
