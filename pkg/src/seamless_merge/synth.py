"""Synthetic scenes with known ground truth, and scoring of merged results against them.

Points are sampled uniformly in the unit square and cut into overlapping
rectangular tiles. Each tile's data is the truth plus a per-tile constant and,
optionally, a smooth low-order polynomial, which stands in for the residual
trends an imperfect per-partition processing leaves behind.

Seeding: one ``numpy.random.SeedSequence(seed)`` is spawned into independent
streams for point positions, the truth field and the per-tile artifacts, so a
seed fully determines the scene.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .errors import IdMismatch, InvalidConfig
from .graph import delaunay_edges
from .points import MergedDataset, PointCloudPartition, assign_global_ids, extra_memberships, point_ids

TRUTH_MODELS = ("gaussian-bumps", "polynomial", "plane")
ARTIFACT_MODELS = ("constant", "constant-plus-smooth")
LAYOUTS = ("grid", "brick")
TRUTH_PEAK = 100.0

Rect = Tuple[float, float, float, float]


@dataclass
class SceneConfig:
    seed: int = 0
    point_count: int = 6000
    tile_grid: Tuple[int, int] = (3, 2)
    overlap_fraction: float = 0.25
    truth_model: str = "gaussian-bumps"
    artifact_model: str = "constant-plus-smooth"
    artifact_scale: float = 5.0
    layout: str = "grid"

    def validate(self) -> "SceneConfig":
        nx, ny = self.tile_grid
        if nx < 1 or ny < 1:
            raise InvalidConfig(f"Tile grid must be at least 1x1, got {nx}x{ny}")
        if self.layout not in LAYOUTS:
            raise InvalidConfig(f"Unknown layout '{self.layout}' (expected one of {LAYOUTS})")
        if self.layout == "brick" and ny < 2:
            raise InvalidConfig("Brick layout needs at least two tile rows")
        if not 0 < self.overlap_fraction <= 0.5:
            raise InvalidConfig(
                f"Overlap fraction must lie in (0, 0.5], got {self.overlap_fraction} (tiles would not connect)"
            )
        if self.point_count < 3:
            raise InvalidConfig(f"Need at least 3 points, got {self.point_count}")
        if self.truth_model not in TRUTH_MODELS:
            raise InvalidConfig(f"Unknown truth model '{self.truth_model}' (expected one of {TRUTH_MODELS})")
        if self.artifact_model not in ARTIFACT_MODELS:
            raise InvalidConfig(f"Unknown artifact model '{self.artifact_model}' (expected one of {ARTIFACT_MODELS})")
        if not (np.isfinite(self.artifact_scale) and self.artifact_scale >= 0):
            raise InvalidConfig(f"Artifact scale must be finite and non-negative, got {self.artifact_scale}")
        return self

    def to_dict(self) -> Dict[str, object]:
        return {
            "seed": self.seed,
            "point_count": self.point_count,
            "tile_grid": f"{self.tile_grid[0]}x{self.tile_grid[1]}",
            "overlap_fraction": self.overlap_fraction,
            "truth_model": self.truth_model,
            "artifact_model": self.artifact_model,
            "artifact_scale": self.artifact_scale,
            "layout": self.layout,
        }


@dataclass
class SceneTruth:
    global_ids: np.ndarray
    points: np.ndarray
    ground_truth: np.ndarray
    tile_labels: np.ndarray
    injected_offsets: np.ndarray
    injected_smooth: List[np.ndarray]
    tiles: List[Rect] = field(default_factory=list)
    extra_memberships: int = 0


@dataclass(frozen=True)
class ScoreRecord:
    rmse: float
    max_error: float
    gauge_constant: float
    seam_metric: float
    truth_seam_metric: float
    crossing_edges: int

    def to_dict(self) -> Dict[str, float]:
        return {
            "rmse": self.rmse,
            "max_error": self.max_error,
            "gauge_constant": self.gauge_constant,
            "seam_metric": self.seam_metric,
            "truth_seam_metric": self.truth_seam_metric,
            "crossing_edges": self.crossing_edges,
        }

    def passes(self, max_rmse: float, max_error: float, max_seam: Optional[float] = None) -> bool:
        ok = self.rmse <= max_rmse and self.max_error <= max_error
        if max_seam is not None:
            ok = ok and self.seam_metric <= max_seam
        return ok


def tile_cells(config: SceneConfig) -> List[Rect]:
    """Base (non-overlapping) cells of the tiling, row by row from the bottom."""
    nx, ny = config.tile_grid
    w, h = 1.0 / nx, 1.0 / ny
    cells = []
    for r in range(ny):
        if config.layout == "brick" and r % 2 == 1:
            edges = [0.0] + [(c + 0.5) * w for c in range(nx)] + [1.0]
        else:
            edges = [c * w for c in range(nx)] + [1.0]
        for x0, x1 in zip(edges[:-1], edges[1:]):
            cells.append((x0, x1, r * h, 1.0 if r == ny - 1 else (r + 1) * h))
    return cells


def expanded_tiles(config: SceneConfig) -> List[Rect]:
    nx, ny = config.tile_grid
    mx = config.overlap_fraction / nx / 2
    my = config.overlap_fraction / ny / 2
    return [
        (max(x0 - mx, 0.0), min(x1 + mx, 1.0), max(y0 - my, 0.0), min(y1 + my, 1.0))
        for x0, x1, y0, y1 in tile_cells(config)
    ]


def _peak_scaled(fn: Callable[[np.ndarray], np.ndarray]) -> Callable[[np.ndarray], np.ndarray]:
    g = np.linspace(0.0, 1.0, 101)
    gx, gy = np.meshgrid(g, g)
    sample = np.column_stack([gx.ravel(), gy.ravel()])
    peak = float(np.max(np.abs(fn(sample))))
    scale = TRUTH_PEAK / peak if peak > 0 else 1.0
    return lambda pts: fn(pts) * scale


def truth_field(model: str, rng: np.random.Generator) -> Callable[[np.ndarray], np.ndarray]:
    """A smooth field on the unit square with peak magnitude about 100."""
    if model == "gaussian-bumps":
        k = 6
        centers = rng.random((k, 2))
        sigmas = rng.uniform(0.1, 0.3, k)
        amps = rng.uniform(-1.0, 1.0, k)

        def fn(pts):
            d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            return (amps * np.exp(-d2 / (2 * sigmas ** 2))).sum(axis=1)
    elif model == "polynomial":
        c = rng.uniform(-1.0, 1.0, 10)

        def fn(pts):
            x, y = pts[:, 0], pts[:, 1]
            return (c[0] + c[1] * x + c[2] * y + c[3] * x * x + c[4] * x * y + c[5] * y * y
                    + c[6] * x ** 3 + c[7] * x * x * y + c[8] * x * y * y + c[9] * y ** 3)
    else:
        c = rng.uniform(-1.0, 1.0, 3)

        def fn(pts):
            return c[0] + c[1] * pts[:, 0] + c[2] * pts[:, 1]
    return _peak_scaled(fn)


def smooth_artifact(points: np.ndarray, rect: Rect, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Quadratic trend in tile-local coordinates with peak magnitude `scale`."""
    x0, x1, y0, y1 = rect
    u = (points[:, 0] - (x0 + x1) / 2) / max(x1 - x0, 1e-12)
    v = (points[:, 1] - (y0 + y1) / 2) / max(y1 - y0, 1e-12)
    c = rng.uniform(-1.0, 1.0, 5)
    trend = c[0] * u + c[1] * v + c[2] * u * u + c[3] * u * v + c[4] * v * v
    peak = float(np.max(np.abs(trend)))
    if peak == 0.0 or scale == 0.0:
        return np.zeros(points.shape[0])
    return trend * (scale / peak)


def base_labels(points: np.ndarray, cells: List[Rect]) -> np.ndarray:
    labels = np.full(points.shape[0], -1, dtype=np.int64)
    for k, (x0, x1, y0, y1) in enumerate(cells):
        inside = (
            (points[:, 0] >= x0) & (points[:, 0] < x1) & (points[:, 1] >= y0) & (points[:, 1] < y1)
        )
        labels[inside & (labels < 0)] = k
    return labels


def generate_scene(config: SceneConfig) -> Tuple[List[PointCloudPartition], SceneTruth]:
    config.validate()
    root = np.random.SeedSequence(config.seed)
    point_seq, truth_seq, artifact_seq = root.spawn(3)

    points = np.random.default_rng(point_seq).random((config.point_count, 2))
    truth_fn = truth_field(config.truth_model, np.random.default_rng(truth_seq))
    truth = truth_fn(points)

    cells = tile_cells(config)
    tiles = expanded_tiles(config)
    members = [
        np.flatnonzero(
            (points[:, 0] >= x0) & (points[:, 0] <= x1) & (points[:, 1] >= y0) & (points[:, 1] <= y1)
        )
        for x0, x1, y0, y1 in tiles
    ]
    for k, idx in enumerate(members):
        if idx.size < 3:
            raise InvalidConfig(f"Tile {k + 1} received only {idx.size} points; increase --points")

    membership = sparse.csr_matrix(
        (np.ones(sum(len(m) for m in members)),
         (np.repeat(np.arange(len(members)), [len(m) for m in members]), np.concatenate(members))),
        shape=(len(members), config.point_count),
    )
    shared = (membership @ membership.T).tocoo()
    n_comp, _ = csgraph.connected_components(shared, directed=False)
    if n_comp > 1:
        raise InvalidConfig(f"Tiling produced {n_comp} disconnected groups of partitions; increase overlap or points")

    tile_rngs = [np.random.default_rng(s) for s in artifact_seq.spawn(len(tiles))]
    offsets = np.zeros(len(tiles))
    smooth_fields = []
    partitions = []
    for k, (idx, rect, rng) in enumerate(zip(members, tiles, tile_rngs)):
        offsets[k] = rng.uniform(-config.artifact_scale, config.artifact_scale) + 0.0
        if config.artifact_model == "constant-plus-smooth":
            smooth = smooth_artifact(points[idx], rect, config.artifact_scale, rng)
        else:
            smooth = np.zeros(idx.size)
        smooth_fields.append(smooth)
        partitions.append(PointCloudPartition(index=k + 1, points=points[idx], values=truth[idx] + offsets[k] + smooth))

    partitions = assign_global_ids(partitions)
    ids = point_ids(points)
    order = np.argsort(ids, kind="stable")
    scene = SceneTruth(
        global_ids=ids[order],
        points=points[order],
        ground_truth=truth[order],
        tile_labels=base_labels(points, cells)[order],
        injected_offsets=offsets,
        injected_smooth=smooth_fields,
        tiles=tiles,
        extra_memberships=extra_memberships(partitions),
    )
    logging.info(
        f"Scene: {config.point_count} points, {len(partitions)} partitions, "
        f"{scene.extra_memberships} extra memberships"
    )
    return partitions, scene


def truth_from_table(points: np.ndarray, values: np.ndarray, tiles: np.ndarray) -> SceneTruth:
    """Rebuild a SceneTruth from a truth file; injected artifacts are not stored there."""
    ids = point_ids(points)
    if np.unique(ids).size != ids.size:
        raise IdMismatch("Truth file lists a point more than once")
    order = np.argsort(ids, kind="stable")
    return SceneTruth(
        global_ids=ids[order],
        points=np.ascontiguousarray(points[order]),
        ground_truth=values[order],
        tile_labels=tiles[order],
        injected_offsets=np.zeros(0),
        injected_smooth=[],
    )


def _align(merged: MergedDataset, truth_ids: np.ndarray) -> np.ndarray:
    """Merged values reordered to the (sorted) truth ids."""
    if len(merged) != truth_ids.size:
        raise IdMismatch(f"Merged dataset has {len(merged)} points, truth has {truth_ids.size}")
    order = np.argsort(merged.global_ids, kind="stable")
    ids = merged.global_ids[order]
    truth_order = np.argsort(truth_ids, kind="stable")
    if not np.array_equal(ids, truth_ids[truth_order]):
        missing = np.setdiff1d(truth_ids, ids).size
        raise IdMismatch(f"Merged and truth point sets differ ({missing} truth points missing from merged)")
    aligned = np.empty(truth_ids.size)
    aligned[truth_order] = merged.values[order]
    return aligned


def score(merged: MergedDataset, truth: SceneTruth) -> ScoreRecord:
    """Gauge-fixed error against the truth plus the seam metric across tile boundaries."""
    values = _align(merged, truth.global_ids)
    err = values - truth.ground_truth
    gauge = float(np.mean(err))
    fixed = err - gauge

    edges = delaunay_edges(truth.points).edges
    crossing = edges[truth.tile_labels[edges[:, 0]] != truth.tile_labels[edges[:, 1]]]
    if crossing.size:
        seam = float(np.max(np.abs(values[crossing[:, 0]] - values[crossing[:, 1]])))
        truth_seam = float(np.max(np.abs(truth.ground_truth[crossing[:, 0]] - truth.ground_truth[crossing[:, 1]])))
    else:
        seam = truth_seam = 0.0

    return ScoreRecord(
        rmse=float(np.sqrt(np.mean(fixed ** 2))),
        max_error=float(np.max(np.abs(fixed))),
        gauge_constant=gauge,
        seam_metric=seam,
        truth_seam_metric=truth_seam,
        crossing_edges=int(len(crossing)),
    )
