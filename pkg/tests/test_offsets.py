import numpy as np
import pytest

from seamless_merge.errors import SingularSystem
from seamless_merge.offsets import (
    OffsetSolution, PairMean, apply_offsets, incidence_system, pairwise_means, solve_offsets
)
from seamless_merge.overlap import compute_overlaps
from seamless_merge.points import PointCloudPartition, assign_global_ids


def pair(i, j, mean, count=1):
    return PairMean(i=i, j=j, mean_diff=mean, count=count)


def strip_partitions(values_per_partition, n=30, seed=0):
    """Partitions over overlapping vertical strips of one random cloud."""
    pts = np.random.default_rng(seed).random((n * len(values_per_partition), 2))
    m = len(values_per_partition)
    out = []
    for k, fn in enumerate(values_per_partition):
        lo, hi = (k - 0.3) / m, (k + 1.3) / m
        sel = pts[(pts[:, 0] >= lo) & (pts[:, 0] <= hi)]
        out.append(PointCloudPartition(index=k + 1, points=sel, values=fn(sel)))
    return assign_global_ids(out)


def test_two_partitions():
    sol = solve_offsets([pair(0, 1, 5.0)], 2)
    assert np.allclose(sol.offsets, [-2.5, 2.5], atol=1e-12)
    assert sol.rank_deficiency_handled == "sum-zero"


def test_chain():
    sol = solve_offsets([pair(0, 1, 1.0), pair(1, 2, 1.0)], 3)
    assert np.allclose(sol.offsets, [-1.0, 0.0, 1.0], atol=1e-12)
    assert sol.residual_norm < 1e-12


def test_zero_means_give_zero_offsets():
    sol = solve_offsets([pair(0, 1, 0.0), pair(1, 2, 0.0), pair(0, 2, 0.0)], 3)
    assert np.all(np.abs(sol.offsets) < 1e-15)


def test_single_partition():
    sol = solve_offsets([], 1)
    assert sol.offsets.tolist() == [0.0]


def test_pairwise_mean_of_differences():
    pts = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=float)
    a = PointCloudPartition(index=1, points=pts[:3], values=np.array([1.0, 2.0, 3.0]))
    b = PointCloudPartition(index=2, points=pts, values=np.zeros(4))
    parts = assign_global_ids([a, b])
    (pm,) = pairwise_means(parts, compute_overlaps(parts))
    assert (pm.i, pm.j, pm.count) == (0, 1, 3)
    assert pm.mean_diff == pytest.approx(2.0)


def random_connected_pairs(rng, m):
    """A spanning tree plus a few random extra pairs."""
    keys = {tuple(sorted((k, int(rng.integers(0, k))))) for k in range(1, m)}
    for _ in range(int(rng.integers(0, m))):
        i, j = sorted(rng.choice(m, 2, replace=False).tolist())
        keys.add((i, j))
    return [pair(i, j, float(rng.normal(0, 3)), int(rng.integers(1, 50))) for i, j in sorted(keys)]


@pytest.mark.parametrize("weighted", [False, True])
def test_matches_pseudoinverse(weighted):
    rng = np.random.default_rng(1234)
    for _ in range(100):
        m = int(rng.integers(2, 9))
        pairs = random_connected_pairs(rng, m)
        A, rhs = incidence_system(pairs, m, weight_pairs=weighted)
        expected = np.linalg.pinv(A) @ rhs
        sol = solve_offsets(pairs, m, weight_pairs=weighted)
        assert np.max(np.abs(sol.offsets - expected)) < 1e-10
        assert abs(np.sum(sol.offsets)) < 1e-10
        # least-squares optimality: residual orthogonal to the columns
        assert np.max(np.abs(A.T @ (A @ sol.offsets - rhs))) < 1e-9


def test_weighting_changes_inconsistent_systems():
    pairs = [pair(0, 1, 1.0, count=100), pair(1, 2, 1.0, count=1), pair(0, 2, 0.0, count=1)]
    plain = solve_offsets(pairs, 3).offsets
    weighted = solve_offsets(pairs, 3, weight_pairs=True).offsets
    assert not np.allclose(plain, weighted)
    # the heavy pair is fitted more closely
    assert abs((weighted[1] - weighted[0]) - 1.0) < abs((plain[1] - plain[0]) - 1.0)


def test_disconnected_pairs_are_singular():
    with pytest.raises(SingularSystem):
        solve_offsets([pair(0, 1, 1.0)], 3)


def test_gauge_invariance():
    fns = [lambda p: 3 * p[:, 0] + 1.0, lambda p: 3 * p[:, 0] - 2.0, lambda p: 3 * p[:, 0] + 0.5]
    parts = strip_partitions(fns)
    index = compute_overlaps(parts)
    base = solve_offsets(pairwise_means(parts, index), 3).offsets
    shifted = [p.with_values(p.values + 7.0) for p in parts]
    moved = solve_offsets(pairwise_means(shifted, index), 3).offsets
    assert np.max(np.abs(base - moved)) < 1e-12


def test_constant_offsets_are_removed():
    fns = [lambda p: p[:, 1] ** 2 + 4.0, lambda p: p[:, 1] ** 2 - 1.0, lambda p: p[:, 1] ** 2 + 2.0]
    parts = strip_partitions(fns)
    index = compute_overlaps(parts)
    sol = solve_offsets(pairwise_means(parts, index), 3)
    # D_i - D_j is constant on every overlap, so the system is consistent
    assert sol.residual_norm < 1e-12
    corrected = apply_offsets(parts, sol)
    for p in corrected:
        assert np.allclose(p.values, p.points[:, 1] ** 2 + 5.0 / 3.0, atol=1e-12)


def test_negated_offsets_restore_input():
    parts = strip_partitions([lambda p: p[:, 0], lambda p: p[:, 0] + 3.0])
    sol = solve_offsets(pairwise_means(parts, compute_overlaps(parts)), 2)
    there = apply_offsets(parts, sol)
    back = apply_offsets(there, OffsetSolution(offsets=-sol.offsets, residual_norm=0.0))
    for p, q in zip(parts, back):
        assert np.allclose(p.values, q.values, atol=1e-12)


def test_apply_checks_length():
    parts = strip_partitions([lambda p: p[:, 0], lambda p: p[:, 0]])
    with pytest.raises(SingularSystem):
        apply_offsets(parts, OffsetSolution(offsets=np.zeros(3), residual_norm=0.0))


@pytest.mark.parametrize("shift", [0.0, 5.0])
def test_pairwise_mean_of_constant_shift(shift):
    pts = np.array([[k, k % 3] for k in range(12)], dtype=float)
    base = np.linspace(-1.0, 1.0, 12)
    a = PointCloudPartition(index=1, points=pts[:11], values=base[:11] + shift)
    b = PointCloudPartition(index=2, points=pts[1:], values=base[1:])
    parts = assign_global_ids([a, b])
    (pm,) = pairwise_means(parts, compute_overlaps(parts))
    assert pm.count == 10
    assert pm.mean_diff == pytest.approx(shift, abs=1e-12)
