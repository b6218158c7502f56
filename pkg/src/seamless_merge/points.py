"""Points, partitions and the global point-identity scheme.

A point keeps the same identity in every partition it appears in: the id is a
64-bit mix of the bit patterns of its two coordinates, so only bit-identical
coordinates share an id. Distinct coordinates that happen to hash to the same
id are detected and reported instead of being merged.
"""
import logging
from dataclasses import dataclass, replace
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .errors import DuplicatePointInPartition, HashCollision, InvalidPartition

_MIX_1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX_2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


class Point(NamedTuple):
    x: float
    y: float


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class PointCloudPartition:
    """One subset of the global point set with its own (artifact-bearing) data."""

    index: int
    points: np.ndarray
    values: np.ndarray
    global_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64, copy=True)
        values = np.array(self.values, dtype=np.float64, copy=True)
        if points.ndim != 2 or points.shape[1] != 2:
            raise InvalidPartition(f"Partition {self.index}: points must be an (n, 2) array, got shape {points.shape}")
        if values.shape != (points.shape[0],):
            raise InvalidPartition(
                f"Partition {self.index}: {points.shape[0]} points but {values.size} values"
            )
        if points.shape[0] < 3:
            raise InvalidPartition(f"Partition {self.index}: needs at least 3 points, got {points.shape[0]}")
        if not np.all(np.isfinite(points)):
            raise InvalidPartition(f"Partition {self.index}: non-finite coordinates")
        if not np.all(np.isfinite(values)):
            raise InvalidPartition(f"Partition {self.index}: non-finite values")
        # -0.0 and 0.0 are the same location
        points = points + 0.0
        object.__setattr__(self, "points", _readonly(points))
        object.__setattr__(self, "values", _readonly(values))
        if self.global_ids is not None:
            ids = np.asarray(self.global_ids, dtype=np.uint64)
            if ids.shape != values.shape:
                raise InvalidPartition(f"Partition {self.index}: global_ids do not parallel points")
            object.__setattr__(self, "global_ids", _readonly(ids))

    @classmethod
    def from_points(cls, index: int, points: Sequence[Point], values: Sequence[float]) -> "PointCloudPartition":
        return cls(index=index, points=np.array([(p[0], p[1]) for p in points], dtype=np.float64), values=values)

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def point(self, k: int) -> Point:
        return Point(float(self.points[k, 0]), float(self.points[k, 1]))

    def with_values(self, values: np.ndarray) -> "PointCloudPartition":
        return replace(self, values=values)


@dataclass(frozen=True)
class MergedDataset:
    """The merged field on the union of all partition point sets."""

    global_ids: np.ndarray
    points: np.ndarray
    values: np.ndarray
    provenance: np.ndarray

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def to_partition(self, index: int = 1) -> PointCloudPartition:
        return PointCloudPartition(index=index, points=self.points, values=self.values, global_ids=self.global_ids)


def _mix64(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX_1
        z = (z ^ (z >> np.uint64(27))) * _MIX_2
        return z ^ (z >> np.uint64(31))


def coordinate_bits(points: np.ndarray):
    xbits = np.ascontiguousarray(points[:, 0]).view(np.uint64)
    ybits = np.ascontiguousarray(points[:, 1]).view(np.uint64)
    return xbits, ybits


def point_ids(points: np.ndarray) -> np.ndarray:
    """GlobalPointId for each row of an (n, 2) coordinate array."""
    xbits, ybits = coordinate_bits(np.asarray(points, dtype=np.float64) + 0.0)
    with np.errstate(over="ignore"):
        return _mix64(xbits ^ _mix64(ybits + _GOLDEN))


def snap_points(points: np.ndarray, quantum: float) -> np.ndarray:
    return np.round(points / quantum) * quantum + 0.0


def assign_global_ids(
    partitions: List[PointCloudPartition], quantum: Optional[float] = None
) -> List[PointCloudPartition]:
    """Give every point a GlobalPointId shared by all partitions that contain it."""
    if quantum is not None and quantum <= 0:
        raise InvalidPartition(f"Quantization step must be positive, got {quantum}")

    out: List[PointCloudPartition] = []
    for part in partitions:
        points = part.points if quantum is None else snap_points(part.points, quantum)
        out.append(replace(part, points=points, global_ids=point_ids(points)))

    if not out:
        return out

    ids = np.concatenate([p.global_ids for p in out])
    coords = np.concatenate([p.points for p in out])
    owner = np.concatenate([np.full(len(p), k) for k, p in enumerate(out)])
    xbits, ybits = coordinate_bits(coords)

    order = np.argsort(ids, kind="stable")
    same_id = ids[order][1:] == ids[order][:-1]
    if np.any(same_id):
        a = order[:-1][same_id]
        b = order[1:][same_id]
        same_coords = (xbits[a] == xbits[b]) & (ybits[a] == ybits[b])
        if not np.all(same_coords):
            k = np.flatnonzero(~same_coords)[0]
            raise HashCollision(
                f"Distinct points {tuple(coords[a[k]])} and {tuple(coords[b[k]])} share id {int(ids[a[k]]):#018x}"
            )
        dup = owner[a] == owner[b]
        if np.any(dup):
            k = np.flatnonzero(dup)[0]
            part = out[owner[a[k]]]
            raise DuplicatePointInPartition(
                f"Partition {part.index} contains point {tuple(coords[a[k]])} more than once"
            )

    logging.debug(f"Assigned ids to {ids.size} memberships across {len(out)} partitions")
    return out


def extra_memberships(partitions: List[PointCloudPartition]) -> int:
    """Sum of partition sizes minus the number of distinct points."""
    ids = np.concatenate([p.global_ids for p in partitions])
    return int(ids.size - np.unique(ids).size)
