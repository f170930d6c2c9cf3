"""Tab-separated tables: loss logs and report exports."""

from pathlib import Path
from typing import Sequence, Union

import pandas as pd

LOSS_LOG_COLUMNS = ["iteration", "lr", "loss"]


def write_tsv(frame: pd.DataFrame, path: Union[str, Path], header: bool = True) -> Path:
    """Write a DataFrame as TSV, creating parent folders.

    Floats are written with ``repr`` precision so the file reproduces the
    values exactly.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, sep="\t", header=header, index=False, float_format="%.17g")
    return path


def read_tsv(path: Union[str, Path], columns: Sequence[str] = ()) -> pd.DataFrame:
    """Read a TSV file; ``columns`` names the columns of a header-less file.

    Args:
        path (str): The path to the TSV file.
        columns: Column names when the file has no header row.

    Returns:
        DataFrame: Pandas DataFrame containing the TSV data.
    """
    if columns:
        return pd.read_csv(path, sep="\t", header=None, names=list(columns))
    return pd.read_csv(path, sep="\t")


def write_loss_log(rows: Sequence[dict], path: Union[str, Path]) -> Path:
    """One ``iteration<TAB>lr<TAB>loss`` line per training iteration."""
    frame = pd.DataFrame(list(rows), columns=LOSS_LOG_COLUMNS)
    return write_tsv(frame, path, header=False)


def read_loss_log(path: Union[str, Path]) -> pd.DataFrame:
    return read_tsv(path, LOSS_LOG_COLUMNS)
