import argparse
import sys
from typing import List, Optional

from CobNet.commands import command_mapping, execute
from Utilities.helpers import configure_logging


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cobnet",
        description="Few-shot segmentation with object and background prototypes on synthetic shape episodes.",
    )
    parser.add_argument("command", choices=list(command_mapping), help="What to run.")
    parser.add_argument("--config", help="Path to a key = value run configuration file.")
    parser.add_argument("--fold", type=int, help="Run a single fold instead of all four.")
    parser.add_argument("--k", type=int, help="Support shots at evaluation (1 or 5).")
    parser.add_argument(
        "--weak", action="store_true", default=None, help="Evaluate with all-ones support masks."
    )
    parser.add_argument("--episodes", type=int, help="Test episodes per fold (default 1000).")
    parser.add_argument("--seed", type=int, help="Evaluation and gradient check seed.")
    parser.add_argument("--threads", type=int, help="Evaluation worker threads.")
    parser.add_argument("--out", help="Output root; defaults to $COBNET_DATA_DIR, then ./runs.")
    parser.add_argument("--checkpoint", help="Checkpoint root holding fold<i> folders.")
    parser.add_argument("--episode-seed", type=int, dest="episode_seed", help="Episode rendered by 'render'.")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run the command and return its exit code."""
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    overrides = {
        key: getattr(args, key)
        for key in ("fold", "k", "weak", "episodes", "seed", "threads", "out", "checkpoint", "episode_seed")
    }
    return execute(args.command, args.config, overrides)


# make sure to call the entry point with the process arguments
if __name__ == "__main__":
    sys.exit(main())
