"""Pairwise partition overlaps, overlap degrees and the partition graph."""
import logging
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .errors import DisconnectedPartitionGraph, InvalidPartition
from .points import PointCloudPartition


@dataclass(frozen=True)
class PairMap:
    """Matched points of partitions i < j, sorted by global id."""

    local_i: np.ndarray
    local_j: np.ndarray
    rows: np.ndarray

    def __len__(self) -> int:
        return int(self.rows.shape[0])


@dataclass(frozen=True)
class OverlapIndex:
    """Overlap structure of a list of partitions, addressed by list position.

    ``global_ids`` is sorted; ``rows[i]`` maps the local points of partition i
    to rows of ``global_ids``/``degree``/``points``.
    """

    global_ids: np.ndarray
    points: np.ndarray
    degree: np.ndarray
    rows: List[np.ndarray]
    pair_maps: Dict[Tuple[int, int], PairMap]
    adjacency: List[Tuple[int, ...]]
    labels: List[int]

    @property
    def n_partitions(self) -> int:
        return len(self.rows)

    @property
    def n_points(self) -> int:
        return int(self.global_ids.shape[0])

    @property
    def extra_memberships(self) -> int:
        return int(np.sum(self.degree - 1))

    def neighbors(self, i: int) -> Tuple[int, ...]:
        return self.adjacency[i]

    def partition_degree(self, i: int) -> np.ndarray:
        """Overlap degree of each local point of partition i."""
        return self.degree[self.rows[i]]

    def degree_of(self, global_id: int) -> int:
        k = int(np.searchsorted(self.global_ids, np.uint64(global_id)))
        if k >= self.n_points or self.global_ids[k] != np.uint64(global_id):
            raise KeyError(global_id)
        return int(self.degree[k])


def _components(m: int, pairs) -> Tuple[int, np.ndarray]:
    if not pairs:
        return m, np.arange(m)
    ij = np.array(list(pairs), dtype=np.int64)
    adj = sparse.coo_matrix((np.ones(len(ij)), (ij[:, 0], ij[:, 1])), shape=(m, m))
    return csgraph.connected_components(adj, directed=False)


def compute_overlaps(partitions: List[PointCloudPartition]) -> OverlapIndex:
    """Hash-join the partitions on GlobalPointId."""
    if any(p.global_ids is None for p in partitions):
        raise InvalidPartition("Global ids must be assigned before computing overlaps")
    m = len(partitions)
    sizes = [len(p) for p in partitions]
    all_ids = np.concatenate([p.global_ids for p in partitions])
    all_points = np.concatenate([p.points for p in partitions])
    owner = np.repeat(np.arange(m), sizes)
    local = np.concatenate([np.arange(n) for n in sizes])

    global_ids, first, inverse, degree = np.unique(
        all_ids, return_index=True, return_inverse=True, return_counts=True
    )
    inverse = inverse.ravel()
    bounds = np.cumsum([0] + sizes)
    rows = [inverse[bounds[k]:bounds[k + 1]] for k in range(m)]

    # entries of shared points grouped by global row, partitions ascending within a group
    shared = np.flatnonzero(degree[inverse] >= 2)
    order = shared[np.lexsort((owner[shared], inverse[shared]))]
    g_rows = inverse[order]
    starts = np.flatnonzero(np.r_[True, g_rows[1:] != g_rows[:-1]])
    group_size = degree[g_rows[starts]]

    chunks: Dict[Tuple[int, int], List[Tuple[np.ndarray, np.ndarray, np.ndarray]]] = {}
    for d in np.unique(group_size):
        s = starts[group_size == d]
        for a in range(d):
            for b in range(a + 1, d):
                ea, eb = order[s + a], order[s + b]
                pa, pb = owner[ea], owner[eb]
                for i, j in set(zip(pa.tolist(), pb.tolist())):
                    sel = (pa == i) & (pb == j)
                    chunks.setdefault((i, j), []).append((local[ea[sel]], local[eb[sel]], inverse[ea[sel]]))

    pair_maps: Dict[Tuple[int, int], PairMap] = {}
    for key in sorted(chunks):
        li = np.concatenate([c[0] for c in chunks[key]])
        lj = np.concatenate([c[1] for c in chunks[key]])
        gr = np.concatenate([c[2] for c in chunks[key]])
        srt = np.argsort(gr, kind="stable")
        pair_maps[key] = PairMap(local_i=li[srt], local_j=lj[srt], rows=gr[srt])

    adjacency_sets: List[set] = [set() for _ in range(m)]
    for i, j in pair_maps:
        adjacency_sets[i].add(j)
        adjacency_sets[j].add(i)
    labels = [p.index for p in partitions]

    n_comp, comp = _components(m, pair_maps.keys())
    if m >= 2 and n_comp > 1:
        components = [sorted(labels[k] for k in np.flatnonzero(comp == c)) for c in range(n_comp)]
        raise DisconnectedPartitionGraph(
            f"Partition graph has {n_comp} connected components: {components}",
            components=components,
        )

    index = OverlapIndex(
        global_ids=global_ids,
        points=all_points[first],
        degree=degree,
        rows=rows,
        pair_maps=pair_maps,
        adjacency=[tuple(sorted(s)) for s in adjacency_sets],
        labels=labels,
    )
    logging.info(
        f"Overlaps: {index.n_points} distinct points, {len(pair_maps)} overlapping pairs, "
        f"max degree {max_overlap_degree(index)}, {index.extra_memberships} extra memberships"
    )
    return index


def max_overlap_degree(index: OverlapIndex) -> int:
    return int(index.degree.max()) if index.n_points else 0
