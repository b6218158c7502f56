"""The full merge: constant offsets, then Dirichlet corrections by descending overlap degree.

Every partition keeps one value snapshot per finished round. Round P reads the
snapshots written by round P+1 (its own and its overlapping neighbours') and
writes a new one, so a worker only ever writes its own partition. The same
per-partition step runs in all execution modes, which makes their results
bit-identical.
"""
import logging
import threading
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from .dirichlet import DEFAULT_TOLERANCE, DirichletProblem, solve_dirichlet
from .errors import InvalidConfig, MergeError
from .graph import EDGE_WEIGHTINGS, GraphLaplacian, LaplacianCache, PartitionGraph, build_partition_graph
from .offsets import apply_offsets, pairwise_means, solve_offsets
from .overlap import OverlapIndex, compute_overlaps, max_overlap_degree
from .points import MergedDataset, PointCloudPartition, assign_global_ids
from .util import array_digest, get_worker_count


STOP_STAGES = ("raw", "offsets")


class ExecutionMode(str, Enum):
    SEQUENTIAL = "seq"
    BARRIER = "barrier"
    RELAXED = "relaxed"


@dataclass
class MergeConfig:
    tolerance: float = DEFAULT_TOLERANCE
    max_iterations: Optional[int] = None
    weight_pairs: bool = False
    mode: ExecutionMode = ExecutionMode.SEQUENTIAL
    workers: Optional[int] = None
    quantum: Optional[float] = None
    max_edge_length: Optional[float] = None
    edge_weighting: str = "none"
    offsets_only: bool = False
    stop_after: Optional[Union[str, int]] = None

    def validate(self) -> "MergeConfig":
        if self.offsets_only and self.stop_after is None:
            self.stop_after = "offsets"
        if self.stop_after is not None and str(self.stop_after) not in STOP_STAGES:
            try:
                self.stop_after = int(self.stop_after)
            except ValueError:
                raise InvalidConfig(f"stop_after must be raw, offsets or a degree, got '{self.stop_after}'")
            if self.stop_after < 2:
                raise InvalidConfig(f"stop_after degree must be at least 2, got {self.stop_after}")
        elif self.stop_after is not None:
            self.stop_after = str(self.stop_after)
        if not self.tolerance > 0:
            raise InvalidConfig(f"Tolerance must be positive, got {self.tolerance}")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise InvalidConfig(f"max_iterations must be at least 1, got {self.max_iterations}")
        if self.workers is not None and self.workers < 1:
            raise InvalidConfig(f"workers must be at least 1, got {self.workers}")
        if self.quantum is not None and not self.quantum > 0:
            raise InvalidConfig(f"Quantization step must be positive, got {self.quantum}")
        if self.max_edge_length is not None and not self.max_edge_length > 0:
            raise InvalidConfig(f"max_edge_length must be positive, got {self.max_edge_length}")
        if self.edge_weighting not in EDGE_WEIGHTINGS:
            raise InvalidConfig(f"Unknown edge weighting '{self.edge_weighting}'")
        try:
            self.mode = ExecutionMode(self.mode)
        except ValueError:
            raise InvalidConfig(f"Unknown execution mode '{self.mode}'")
        return self


@dataclass(frozen=True)
class MergeEvent:
    kind: str
    stage: str
    partition: Optional[int] = None
    degree: Optional[int] = None
    iterations: Optional[int] = None
    residual: Optional[float] = None
    message: str = ""


@dataclass
class RoundSeam:
    degree: int
    partitions_corrected: int = 0
    solves: int = 0
    before_max: float = 0.0
    before_rms: float = 0.0
    after_max: float = 0.0
    after_rms: float = 0.0
    shared_after_max: float = 0.0


@dataclass
class SeamReport:
    partitions: int = 0
    points: int = 0
    max_degree: int = 0
    extra_memberships: int = 0
    offsets: Dict[int, float] = field(default_factory=dict)
    offset_residual_norm: float = 0.0
    raw_max: float = 0.0
    raw_rms: float = 0.0
    offset_max: float = 0.0
    offset_rms: float = 0.0
    rounds: List[RoundSeam] = field(default_factory=list)
    pair_residuals: Dict[Tuple[int, int], float] = field(default_factory=dict)
    final_max_disagreement: float = 0.0
    timings: Dict[str, float] = field(default_factory=dict)
    events: List[MergeEvent] = field(default_factory=list)

    @property
    def round_degrees(self) -> List[int]:
        return [r.degree for r in self.rounds]

    def to_dict(self) -> Dict[str, object]:
        return {
            "partitions": self.partitions,
            "points": self.points,
            "max_degree": self.max_degree,
            "extra_memberships": self.extra_memberships,
            "offsets": {str(k): v for k, v in self.offsets.items()},
            "offset_residual_norm": self.offset_residual_norm,
            "disagreement": {
                "raw": {"max": self.raw_max, "rms": self.raw_rms},
                "offsets": {"max": self.offset_max, "rms": self.offset_rms},
                "final": {"max": self.final_max_disagreement},
            },
            "rounds": [vars(r).copy() for r in self.rounds],
            "pair_residuals": {f"{i}-{j}": v for (i, j), v in self.pair_residuals.items()},
            "timings": self.timings,
        }

    def to_lines(self) -> List[str]:
        """Line-oriented key=value rendering."""
        lines = [
            f"partitions={self.partitions}",
            f"points={self.points}",
            f"max_degree={self.max_degree}",
            f"extra_memberships={self.extra_memberships}",
            f"offset_residual_norm={self.offset_residual_norm:.17g}",
        ]
        lines += [f"offset.{label}={value:.17g}" for label, value in sorted(self.offsets.items())]
        lines += [
            f"disagreement.raw.max={self.raw_max:.17g}",
            f"disagreement.raw.rms={self.raw_rms:.17g}",
            f"disagreement.offsets.max={self.offset_max:.17g}",
            f"disagreement.offsets.rms={self.offset_rms:.17g}",
        ]
        for r in self.rounds:
            for key, value in vars(r).items():
                if key == "degree":
                    continue
                text = f"{value:.17g}" if isinstance(value, float) else str(value)
                lines.append(f"round.{r.degree}.{key}={text}")
        lines += [
            f"pair.{i}-{j}.mean_residual={v:.17g}" for (i, j), v in sorted(self.pair_residuals.items())
        ]
        lines.append(f"disagreement.final.max={self.final_max_disagreement:.17g}")
        lines += [f"time.{stage}={seconds:.6f}" for stage, seconds in self.timings.items()]
        return lines


EventSink = Callable[[MergeEvent], None]


class _Events:
    """Thread-safe fan-out of merge events to the report and an optional callback."""

    def __init__(self, report: Optional[SeamReport] = None, callback: Optional[EventSink] = None):
        self.report = report
        self.callback = callback
        self._lock = threading.Lock()

    def __call__(self, event: MergeEvent) -> None:
        with self._lock:
            if self.report is not None:
                self.report.events.append(event)
            if self.callback is not None:
                self.callback(event)


def _partition_sums(index: OverlapIndex, members, values) -> np.ndarray:
    """Per-global-point sums over the member partitions, added in member order."""
    sums = np.zeros(index.n_points)
    for k in members:
        sums += np.bincount(index.rows[k], weights=values[k], minlength=index.n_points)
    return sums


def _disagreement(index: OverlapIndex, values: List[np.ndarray], min_degree: int = 2) -> Tuple[float, float]:
    """Max and RMS spread (max - min across partitions) at points of degree >= min_degree."""
    hi = np.full(index.n_points, -np.inf)
    lo = np.full(index.n_points, np.inf)
    for rows, vals in zip(index.rows, values):
        hi[rows] = np.maximum(hi[rows], vals)
        lo[rows] = np.minimum(lo[rows], vals)
    mask = index.degree >= max(min_degree, 2)
    if not mask.any():
        return 0.0, 0.0
    spread = hi[mask] - lo[mask]
    return float(spread.max()), float(np.sqrt(np.mean(spread ** 2)))


def consensus_at_degree(
    partitions: List[PointCloudPartition], index: OverlapIndex, degree: int
) -> Dict[int, float]:
    """Mean of the current values over all containing partitions, for points of overlap degree >= degree."""
    sums = _partition_sums(index, range(index.n_partitions), [p.values for p in partitions])
    rows = np.flatnonzero(index.degree >= degree)
    means = sums[rows] / index.degree[rows]
    return dict(zip(index.global_ids[rows].tolist(), means.tolist()))


class _Cascade:
    def __init__(
        self,
        partitions: List[PointCloudPartition],
        index: OverlapIndex,
        laplacians: List[Optional[GraphLaplacian]],
        config: MergeConfig,
        top: int,
        emit: EventSink,
        bottom: int = 2,
    ):
        self.index = index
        self.laplacians = laplacians
        self.config = config
        self.top = top
        self.bottom = bottom
        self.emit = emit
        self.snapshots: List[Dict[int, np.ndarray]] = [{top + 1: p.values} for p in partitions]
        self.corrected: Dict[int, int] = {}
        self.solves: Dict[int, int] = {}
        self._lock = threading.Lock()

    def values_after(self, degree: int) -> List[np.ndarray]:
        return [snap[degree] for snap in self.snapshots]

    def correct(self, i: int, degree: int) -> None:
        """Round `degree` for partition i: reads round degree+1 snapshots, writes its own."""
        index = self.index
        rows = index.rows[i]
        deg = index.degree[rows]
        current = self.snapshots[i][degree + 1]
        label = index.labels[i]
        boundary = deg >= degree
        if not boundary.any():
            self.snapshots[i][degree] = current
            self.emit(MergeEvent("skip", "cascade", partition=label, degree=degree))
            return

        members = sorted(set(index.neighbors(i)) | {i})
        sums = _partition_sums(index, members, {k: self.snapshots[k][degree + 1] for k in members})
        bidx = np.flatnonzero(boundary)
        consensus = sums[rows[bidx]] / deg[bidx]

        if boundary.all():
            new = consensus.copy()
            self.emit(MergeEvent("all_boundary", "cascade", partition=label, degree=degree))
            solved = 0
        else:
            correction = solve_dirichlet(DirichletProblem(
                laplacian=self.laplacians[i].matrix,
                boundary_indices=bidx,
                boundary_values=consensus - current[bidx],
                tolerance=self.config.tolerance,
                max_iterations=self.config.max_iterations,
            ))
            new = current + correction.values
            new[bidx] = consensus
            self.emit(MergeEvent(
                "dirichlet", "cascade", partition=label, degree=degree,
                iterations=correction.iterations_used, residual=correction.achieved_residual,
            ))
            solved = 1
        new.flags.writeable = False
        self.snapshots[i][degree] = new
        with self._lock:
            self.corrected[degree] = self.corrected.get(degree, 0) + 1
            self.solves[degree] = self.solves.get(degree, 0) + solved

    def _task(self, i: int, degree: int) -> None:
        try:
            self.correct(i, degree)
        except MergeError as e:
            if e.stage is None:
                e.stage = "cascade"
            e.message = f"partition {self.index.labels[i]}, degree {degree}: {e.message}"
            raise

    def run(self, workers: int = 1) -> None:
        degrees = list(range(self.top, self.bottom - 1, -1))
        m = self.index.n_partitions
        mode = self.config.mode
        if mode == ExecutionMode.SEQUENTIAL:
            for d in degrees:
                self.emit(MergeEvent("round_start", "cascade", degree=d))
                for i in range(m):
                    self._task(i, d)
                self.emit(MergeEvent("round_end", "cascade", degree=d))
        elif mode == ExecutionMode.BARRIER:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                for d in degrees:
                    self.emit(MergeEvent("round_start", "cascade", degree=d))
                    list(ex.map(lambda i: self._task(i, d), range(m)))
                    self.emit(MergeEvent("round_end", "cascade", degree=d))
        else:
            self._run_relaxed(degrees, workers)

    def _run_relaxed(self, degrees: List[int], workers: int) -> None:
        """A partition starts round d once it and its overlap neighbours finished round d+1."""
        m = self.index.n_partitions
        done = set()
        remaining = {d: m for d in degrees}
        started = set()
        pending = [(i, d) for d in degrees for i in range(m)]

        def ready(i, d):
            if d == self.top:
                return True
            return all((k, d + 1) in done for k in (i,) + self.index.neighbors(i))

        with ThreadPoolExecutor(max_workers=workers) as ex:
            running = {}

            def submit_ready():
                for task in list(pending):
                    if ready(*task):
                        pending.remove(task)
                        d = task[1]
                        if d not in started:
                            started.add(d)
                            self.emit(MergeEvent("round_start", "cascade", degree=d))
                        running[ex.submit(self._task, *task)] = task

            submit_ready()
            while running:
                finished, _ = wait(list(running), return_when=FIRST_COMPLETED)
                for fut in finished:
                    task = running.pop(fut)
                    fut.result()
                    done.add(task)
                    remaining[task[1]] -= 1
                    if remaining[task[1]] == 0:
                        self.emit(MergeEvent("round_end", "cascade", degree=task[1]))
                submit_ready()


def correction_round(
    partitions: List[PointCloudPartition],
    index: OverlapIndex,
    degree: int,
    graphs: List[PartitionGraph],
    config: Optional[MergeConfig] = None,
) -> List[PointCloudPartition]:
    """One Dirichlet correction round at overlap degree `degree`; untouched partitions pass through."""
    if degree < 2:
        raise InvalidConfig(f"Correction rounds need overlap degree >= 2, got {degree}")
    config = (config or MergeConfig()).validate()
    cascade = _Cascade(partitions, index, [g.laplacian for g in graphs], config, top=degree, emit=lambda e: None)
    for i in range(index.n_partitions):
        cascade._task(i, degree)
    return [p.with_values(v) for p, v in zip(partitions, cascade.values_after(degree))]


def _canonical_order(partitions: List[PointCloudPartition]) -> List[int]:
    """Order partitions by content so the merge does not depend on input order."""
    keys = []
    for p in partitions:
        srt = np.argsort(p.global_ids, kind="stable")
        keys.append(array_digest(p.global_ids[srt], p.values[srt]))
    return sorted(range(len(partitions)), key=lambda k: keys[k])


@contextmanager
def _stage(name: str, report: SeamReport, emit: EventSink):
    emit(MergeEvent("stage_start", name))
    t0 = time.perf_counter()
    try:
        yield
    except MergeError as e:
        if e.stage is None:
            e.stage = name
        raise
    elapsed = time.perf_counter() - t0
    report.timings[name] = elapsed
    logging.info(f"Stage {name} done in {elapsed * 1000:.1f} ms")
    emit(MergeEvent("stage_end", name, message=f"{elapsed:.6f}s"))


def _map(config: MergeConfig, workers: int, fn, items):
    if config.mode == ExecutionMode.SEQUENTIAL or workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _mean_dataset(index: OverlapIndex, values: List[np.ndarray]) -> MergedDataset:
    sums = _partition_sums(index, range(index.n_partitions), values)
    return MergedDataset(
        global_ids=index.global_ids,
        points=index.points,
        values=sums / index.degree,
        provenance=index.degree,
    )


def merge(
    partitions: List[PointCloudPartition],
    config: Optional[MergeConfig] = None,
    cache: Optional[LaplacianCache] = None,
    on_event: Optional[EventSink] = None,
) -> Tuple[MergedDataset, SeamReport]:
    """Merge overlapping partitions into one consistent dataset."""
    config = (config or MergeConfig()).validate()
    if not partitions:
        raise InvalidConfig("Nothing to merge: no partitions given")
    report = SeamReport(partitions=len(partitions))
    emit = _Events(report, on_event)
    workers = config.workers or get_worker_count()

    with _stage("ids", report, emit):
        parts = assign_global_ids(partitions, config.quantum)

    if len(parts) == 1:
        only = parts[0]
        report.points = len(only)
        report.max_degree = 1
        report.offsets = {only.index: 0.0}
        dataset = MergedDataset(
            global_ids=only.global_ids,
            points=only.points,
            values=only.values,
            provenance=np.ones(len(only), dtype=np.int64),
        )
        return dataset, report

    with _stage("overlaps", report, emit):
        order = _canonical_order(parts)
        parts = [parts[k] for k in order]
        index = compute_overlaps(parts)
        top = max_overlap_degree(index)
        report.points = index.n_points
        report.max_degree = top
        report.extra_memberships = index.extra_memberships
        report.raw_max, report.raw_rms = _disagreement(index, [p.values for p in parts])

    stop = config.stop_after
    run_cascade = stop not in STOP_STAGES
    laplacians: List[Optional[GraphLaplacian]] = [None] * len(parts)
    if run_cascade:
        with _stage("graphs", report, emit):
            graphs = _map(config, workers, lambda p: build_partition_graph(
                p.points, max_edge_length=config.max_edge_length,
                weighting=config.edge_weighting, cache=cache,
            ), parts)
            laplacians = [g.laplacian for g in graphs]

    if stop == "raw":
        report.offsets = {label: 0.0 for label in index.labels}
        report.offset_max, report.offset_rms = report.raw_max, report.raw_rms
    else:
        with _stage("offsets", report, emit):
            pairs = pairwise_means(parts, index)
            solution = solve_offsets(pairs, len(parts), weight_pairs=config.weight_pairs)
            parts = apply_offsets(parts, solution)
            report.offsets = {index.labels[k]: float(o) for k, o in enumerate(solution.offsets)}
            report.offset_residual_norm = solution.residual_norm
            report.offset_max, report.offset_rms = _disagreement(index, [p.values for p in parts])

    # rounds run from top down to bottom; bottom == top + 1 means none
    bottom = top + 1
    if run_cascade:
        bottom = 2 if stop is None else min(stop, top + 1)
    cascade = _Cascade(parts, index, laplacians, config, top=top, emit=emit, bottom=bottom)
    if run_cascade:
        with _stage("cascade", report, emit):
            cascade.run(workers)
        for d in range(top, bottom - 1, -1):
            before = cascade.values_after(d + 1)
            after = cascade.values_after(d)
            seam = RoundSeam(
                degree=d,
                partitions_corrected=cascade.corrected.get(d, 0),
                solves=cascade.solves.get(d, 0),
            )
            seam.before_max, seam.before_rms = _disagreement(index, before, d)
            seam.after_max, seam.after_rms = _disagreement(index, after, d)
            seam.shared_after_max, _ = _disagreement(index, after, 2)
            report.rounds.append(seam)
            logging.info(
                f"Round {d}: {seam.partitions_corrected} partitions corrected, "
                f"disagreement {seam.before_max:.3e} -> {seam.after_max:.3e}"
            )

    with _stage("final", report, emit):
        final_values = cascade.values_after(bottom)
        dataset = _mean_dataset(index, final_values)
        final_parts = [p.with_values(v) for p, v in zip(parts, final_values)]
        report.pair_residuals = {
            (index.labels[pm.i], index.labels[pm.j]): pm.mean_diff for pm in pairwise_means(final_parts, index)
        }
        report.final_max_disagreement, _ = _disagreement(index, final_values)

    return dataset, report


def naive_average(partitions: List[PointCloudPartition]) -> MergedDataset:
    """Per-point mean of the raw data without any correction."""
    parts = assign_global_ids(partitions)
    index = compute_overlaps(parts)
    return _mean_dataset(index, [p.values for p in parts])
