"""Console and logging helpers shared by the commands."""

import logging
from collections.abc import Iterable, Iterator
from typing import Tuple

logger = logging.getLogger("cobnet")

_GREEN = "\033[92m"
_YELLOW = "\033[93m"
_RESET = "\033[0m"


def console_print(log_string: str, warning: bool = False) -> None:
    """Print a coloured status line and mirror it to the package logger."""
    colour = _YELLOW if warning else _GREEN
    print(colour + str(log_string) + _RESET)
    logger.log(logging.WARNING if warning else logging.INFO, str(log_string))


def configure_logging(verbose: bool = False) -> None:
    """Set up root logging once for command-line runs."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def adaptive_bins(size: int, bins: int) -> Iterator[Tuple[int, int]]:
    """Yield the [start, stop) index range of every adaptive-pool bin.

    Bin ``i`` covers ``[floor(i*size/bins), ceil((i+1)*size/bins))``; bins may
    overlap when ``bins`` does not divide ``size``.
    """
    for i in range(bins):
        start = (i * size) // bins
        stop = -((-(i + 1) * size) // bins)
        yield start, stop


def format_records(records: Iterable[dict]) -> str:
    """Render dictionaries as line-oriented ``key=value`` records."""
    lines = []
    for record in records:
        lines.append(" ".join(f"{key}={value}" for key, value in record.items()))
    return "\n".join(lines) + "\n"
