"""
Report writers.

Tables go out as CSV (header row, comma separated, '.' decimals, UTF-8, LF)
plus a row-oriented JSON copy. Heatmaps additionally get a whitespace
separated matrix file that gnuplot can plot directly.
"""

import json
import logging
from collections.abc import Mapping
from pathlib import Path

import numpy as np
import polars as pl

from bench.heatmap import HeatmapTable
from errors import StorageError

logger = logging.getLogger(__name__)


def _prepare_dir(out_dir: str | Path) -> Path:
    target = Path(out_dir)
    try:
        target.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        logger.error(f"Cannot create report directory {target}: {e}")
        raise StorageError(f"Cannot create report directory {target}: {e}") from e
    return target


def write_table(frame: pl.DataFrame, out_dir: str | Path, name: str) -> list[Path]:
    """Write ``frame`` as ``name.csv`` and ``name.json``."""
    target = _prepare_dir(out_dir)
    csv_path, json_path = target / f"{name}.csv", target / f"{name}.json"
    try:
        frame.write_csv(csv_path, line_terminator="\n")
        json_path.write_text(
            json.dumps(frame.to_dicts(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    except OSError as e:
        logger.error(f"Writing report '{name}' failed: {e}")
        raise StorageError(f"Writing report '{name}' to {target} failed: {e}") from e
    return [csv_path, json_path]


def write_heatmap(
    table: HeatmapTable, out_dir: str | Path, name: str = "heatmap"
) -> list[Path]:
    """CSV/JSON table plus ``name.dat``, an n_tasks x d matrix."""
    paths = write_table(table.to_frame(), out_dir, name)
    matrix_path = Path(out_dir) / f"{name}.dat"
    try:
        np.savetxt(
            matrix_path,
            table.rates,
            fmt="%.6f",
            header=" ".join(table.tasks),
            comments="# ",
        )
    except OSError as e:
        raise StorageError(f"Writing heatmap matrix to {matrix_path} failed: {e}") from e
    return [*paths, matrix_path]


def write_json(payload: Mapping, path: str | Path) -> Path:
    target = Path(path)
    _prepare_dir(target.parent)
    try:
        text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
        target.write_text(text, encoding="utf-8")
    except OSError as e:
        raise StorageError(f"Writing {target} failed: {e}") from e
    return target


def emit_reports(
    results: Mapping[str, pl.DataFrame | HeatmapTable], out_dir: str | Path
) -> list[Path]:
    """
    Write every result under ``out_dir`` in name order.

    Args:
        results: Report name -> table or heatmap
        out_dir: Destination directory (created if missing)

    Returns:
        Written paths

    Raises:
        StorageError: If the directory or a file cannot be written
    """
    written: list[Path] = []
    for name in sorted(results):
        result = results[name]
        if isinstance(result, HeatmapTable):
            written.extend(write_heatmap(result, out_dir, name))
        else:
            written.extend(write_table(result, out_dir, name))
    logger.info(f"Wrote {len(written)} report files to {out_dir}")
    return written
