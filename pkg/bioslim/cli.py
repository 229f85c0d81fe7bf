import argparse
import sys
from typing import List, Optional

from bioslim.commands import cmd_bench, cmd_compress, cmd_datagen, cmd_infer, cmd_sweep, cmd_train
from bioslim.config import __version__, logger
from bioslim.errors import BioslimError, ConfigError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PIPELINE = 2

COMMANDS = {
    "compress": (cmd_compress, "prune and/or quantize a model into a new .ebm"),
    "infer": (cmd_infer, "tiled inference over a dataset, with metric and report row"),
    "sweep": (cmd_sweep, "accuracy/params/flops over pruning criteria and ratios"),
    "bench": (cmd_bench, "latency and energy report over several compressed models"),
    "datagen": (cmd_datagen, "write synthetic phantom datasets"),
    "train": (cmd_train, "train a zoo model on a phantom dataset"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bioslim", description="Compress, run and benchmark small convolutional networks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        command = sub.add_parser(name, help=help_text)
        command.add_argument("--config", required=True, help="path to the JSON run configuration")
        command.add_argument("--out", default=None, help="output directory (defaults to the config's 'output')")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    handler, _ = COMMANDS[args.command]
    try:
        handler(args.config, args.out)
    except ConfigError as e:
        logger.error("❌ invalid configuration", command=args.command, problems=e.problems)
        for problem in e.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except BioslimError as e:
        logger.error("❌ pipeline failed", command=args.command, error_type=type(e).__name__, error=str(e))
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_PIPELINE
    except KeyboardInterrupt:
        logger.info("🛑 stopped by user")
        return EXIT_PIPELINE
    except Exception as e:
        logger.exception("❌ command crashed", command=args.command, error_type=type(e).__name__)
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_PIPELINE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
