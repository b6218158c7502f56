"""Constant per-partition offsets from a least-squares solve on overlap means."""
import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy.sparse import csgraph

from .errors import SingularSystem
from .overlap import OverlapIndex
from .points import PointCloudPartition

NORMALIZATION = "sum-zero"


@dataclass(frozen=True)
class PairMean:
    i: int
    j: int
    mean_diff: float
    count: int


@dataclass(frozen=True)
class OffsetSolution:
    offsets: np.ndarray
    residual_norm: float
    rank_deficiency_handled: str = NORMALIZATION


def pairwise_means(partitions: List[PointCloudPartition], index: OverlapIndex) -> List[PairMean]:
    """Mean of D_i - D_j over each nonempty overlap, i < j."""
    means = []
    for (i, j), pm in sorted(index.pair_maps.items()):
        diff = partitions[i].values[pm.local_i] - partitions[j].values[pm.local_j]
        means.append(PairMean(i=i, j=j, mean_diff=float(np.mean(diff)), count=len(pm)))
    return means


def incidence_system(pairs: List[PairMean], m: int, weight_pairs: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """One row per pair: -1 at column i, +1 at column j; right-hand side the mean difference."""
    A = np.zeros((len(pairs), m))
    rhs = np.zeros(len(pairs))
    for r, pair in enumerate(pairs):
        w = np.sqrt(pair.count) if weight_pairs else 1.0
        A[r, pair.i] = -w
        A[r, pair.j] = w
        rhs[r] = w * pair.mean_diff
    return A, rhs


def solve_offsets(pairs: List[PairMean], m: int, weight_pairs: bool = False) -> OffsetSolution:
    """Least-squares offsets with the free global constant fixed by sum(offsets) == 0."""
    if m == 1:
        return OffsetSolution(offsets=np.zeros(1), residual_norm=0.0)
    A, rhs = incidence_system(pairs, m, weight_pairs)

    normal = A.T @ A
    n_comp, _ = csgraph.connected_components((np.abs(normal) > 0).astype(np.float64), directed=False)
    if n_comp > 1:
        raise SingularSystem(f"Offset system over {m} partitions has {n_comp} disconnected groups")

    # normal equations bordered by the sum-zero constraint
    kkt = np.zeros((m + 1, m + 1))
    kkt[:m, :m] = normal
    kkt[:m, m] = 1.0
    kkt[m, :m] = 1.0
    b = np.concatenate([A.T @ rhs, [0.0]])
    try:
        sol = np.linalg.solve(kkt, b)
    except np.linalg.LinAlgError as e:
        raise SingularSystem(f"Offset system is singular: {e}")

    offsets = sol[:m]
    residual = float(np.linalg.norm(A @ offsets - rhs))
    logging.info(f"Offsets solved for {m} partitions, residual norm {residual:.3e}")
    return OffsetSolution(offsets=offsets, residual_norm=residual)


def apply_offsets(partitions: List[PointCloudPartition], solution: OffsetSolution) -> List[PointCloudPartition]:
    if len(solution.offsets) != len(partitions):
        raise SingularSystem(f"{len(solution.offsets)} offsets for {len(partitions)} partitions")
    return [p.with_values(p.values + o) for p, o in zip(partitions, solution.offsets)]
