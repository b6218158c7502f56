"""Partition, truth, report and raster file formats.

Partition text form is CSV with the header ``x,y,value`` and ``%.17g`` floats,
which round-trip float64 exactly. The binary form is::

    b"SWLD" | version u16 | point count u64 | count * (x, y, value) as <f8

all little-endian.
"""
import logging
import struct
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .errors import FormatError
from .points import MergedDataset, PointCloudPartition
from .util import compute_file_sha256, stable_json_write

MAGIC = b"SWLD"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHQ")
RECORD = np.dtype("<f8")
CSV_HEADER = "x,y,value"
TRUTH_HEADER = "x,y,value,tile"
NODATA = -9999.0


def is_text(path: Path) -> bool:
    return Path(path).suffix.lower() == ".csv"


def _read_csv(path: Path, header: str) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline().strip()
        if first != header:
            raise FormatError(f"{path}: expected header '{header}', found '{first}'")
        try:
            table = np.loadtxt(f, delimiter=",", dtype=np.float64, ndmin=2)
        except ValueError as e:
            raise FormatError(f"{path}: cannot parse rows: {e}")
    columns = header.count(",") + 1
    if table.size == 0:
        return np.zeros((0, columns))
    if table.shape[1] != columns:
        raise FormatError(f"{path}: expected {columns} columns, found {table.shape[1]}")
    return table


def _write_csv(path: Path, table: np.ndarray, header: str, fmt: str = "%.17g") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        np.savetxt(f, table, fmt=fmt, delimiter=",", header=header, comments="")


def _read_binary(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise FormatError(f"{path}: file too short for a header")
    magic, version, count = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    expected = HEADER.size + count * 3 * RECORD.itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: header declares {count} points but file holds {len(raw)} bytes")
    return np.frombuffer(raw, dtype=RECORD, offset=HEADER.size).reshape(count, 3).astype(np.float64)


def _write_binary(path: Path, table: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, FORMAT_VERSION, table.shape[0]))
        f.write(np.ascontiguousarray(table, dtype=RECORD).tobytes())


def read_table(path: Path) -> np.ndarray:
    """(n, 3) array of x, y, value from a partition file in either form."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"File not found: {path}")
    return _read_csv(path, CSV_HEADER) if is_text(path) else _read_binary(path)


def write_table(path: Path, points: np.ndarray, values: np.ndarray) -> None:
    table = np.column_stack([points, values])
    if is_text(path):
        _write_csv(path, table, CSV_HEADER)
    else:
        _write_binary(path, table)


def read_partition(path: Path, index: int) -> PointCloudPartition:
    table = read_table(path)
    logging.debug(f"Read {table.shape[0]} points from {path}")
    return PointCloudPartition(index=index, points=table[:, :2], values=table[:, 2])


def write_partition(path: Path, partition: PointCloudPartition) -> None:
    write_table(path, partition.points, partition.values)


def write_dataset(path: Path, dataset: MergedDataset) -> None:
    write_table(path, dataset.points, dataset.values)


def read_truth(path: Path) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Points, truth values and base-tile labels from a truth CSV."""
    table = _read_csv(Path(path), TRUTH_HEADER)
    return table[:, :2], table[:, 2], table[:, 3].astype(np.int64)


def write_truth(path: Path, points: np.ndarray, values: np.ndarray, tiles: np.ndarray) -> None:
    table = np.column_stack([points, values, tiles])
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        np.savetxt(f, table, fmt=["%.17g", "%.17g", "%.17g", "%d"], delimiter=",", header=TRUTH_HEADER, comments="")


def write_report(path: Path, lines: List[str]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for line in lines:
            f.write(line + "\n")


def rasterize(points: np.ndarray, values: np.ndarray, size: int) -> Tuple[np.ndarray, Tuple[float, float, float]]:
    """Cell means on a square-celled grid whose longer side has `size` cells; NaN where empty.

    Returns the grid (row 0 at the top) and (x_min, y_min, cellsize).
    """
    x0, y0 = points.min(axis=0)
    x1, y1 = points.max(axis=0)
    cell = max(x1 - x0, y1 - y0) / size or 1.0
    ncols = max(int(np.ceil((x1 - x0) / cell)), 1)
    nrows = max(int(np.ceil((y1 - y0) / cell)), 1)
    col = np.minimum(((points[:, 0] - x0) / cell).astype(np.int64), ncols - 1)
    row = np.minimum(((points[:, 1] - y0) / cell).astype(np.int64), nrows - 1)
    flat = (nrows - 1 - row) * ncols + col
    sums = np.bincount(flat, weights=values, minlength=nrows * ncols)
    counts = np.bincount(flat, minlength=nrows * ncols)
    with np.errstate(invalid="ignore", divide="ignore"):
        grid = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return grid.reshape(nrows, ncols), (float(x0), float(y0), float(cell))


def write_grid(path: Path, points: np.ndarray, values: np.ndarray, size: int = 256) -> None:
    """ESRI ASCII grid, or plain 16-bit PGM when the path ends in .pgm."""
    path = Path(path)
    grid, (x0, y0, cell) = rasterize(points, values, size)
    nrows, ncols = grid.shape
    if path.suffix.lower() == ".pgm":
        finite = grid[np.isfinite(grid)]
        lo, hi = float(finite.min()), float(finite.max())
        span = hi - lo or 1.0
        levels = np.where(np.isfinite(grid), np.round((grid - lo) / span * 65534) + 1, 0).astype(np.int64)
        with open(path, "w", encoding="ascii") as f:
            f.write(f"P2\n# min={lo:.17g} max={hi:.17g}\n{ncols} {nrows}\n65535\n")
            np.savetxt(f, levels, fmt="%d")
    else:
        with open(path, "w", encoding="ascii") as f:
            f.write(f"ncols {ncols}\nnrows {nrows}\nxllcorner {x0:.17g}\nyllcorner {y0:.17g}\n")
            f.write(f"cellsize {cell:.17g}\nNODATA_value {NODATA:g}\n")
            np.savetxt(f, np.where(np.isfinite(grid), grid, NODATA), fmt="%.9g")
    logging.info(f"Wrote {ncols}x{nrows} grid to {path}")


def write_scene(
    directory: Path,
    partitions: List[PointCloudPartition],
    truth,
    config: Dict[str, object],
    binary: bool = False,
) -> Dict[str, object]:
    """Partition files, truth.csv and a scene.json holding the config, injected offsets and file hashes."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = "bin" if binary else "csv"
    files: List[Path] = []
    for part in partitions:
        path = directory / f"partition_{part.index}.{ext}"
        write_partition(path, part)
        files.append(path)
    truth_path = directory / "truth.csv"
    write_truth(truth_path, truth.points, truth.ground_truth, truth.tile_labels)
    files.append(truth_path)

    scene: Dict[str, object] = {
        "config": config,
        "partitions": [f"partition_{p.index}.{ext}" for p in partitions],
        "partition_sizes": [len(p) for p in partitions],
        "points": int(truth.global_ids.size),
        "extra_memberships": truth.extra_memberships,
        "injected_offsets": {str(p.index): float(o) for p, o in zip(partitions, truth.injected_offsets)},
        "sha256": {p.name: compute_file_sha256(p) for p in sorted(files)},
    }
    stable_json_write(directory / "scene.json", scene)
    logging.info(f"Wrote {len(partitions)} partitions and truth to {directory}")
    return scene

