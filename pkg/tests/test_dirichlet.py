import numpy as np
import pytest

from seamless_merge.dirichlet import DirichletProblem, solve_dirichlet
from seamless_merge.errors import ConvergenceFailure, EmptyBoundary, InvalidConfig
from seamless_merge.graph import EdgeList, build_laplacian, delaunay_edges


def path_laplacian(n):
    edges = np.column_stack([np.arange(n - 1), np.arange(1, n)])
    return build_laplacian(n, EdgeList(n, edges)).matrix


def cloud_laplacian(rng, n):
    return build_laplacian(n, delaunay_edges(rng.random((n, 2)))).matrix


def solve(L, bidx, bvals, **kwargs):
    return solve_dirichlet(DirichletProblem(
        laplacian=L, boundary_indices=np.asarray(bidx), boundary_values=np.asarray(bvals, dtype=float), **kwargs
    ))


def dense_oracle(L, bidx, bvals):
    dense = L.toarray()
    n = dense.shape[0]
    interior = np.setdiff1d(np.arange(n), bidx)
    x = np.zeros(n)
    x[bidx] = bvals
    x[interior] = np.linalg.solve(dense[np.ix_(interior, interior)], -dense[np.ix_(interior, bidx)] @ bvals)
    return x


def test_constant_boundary_gives_constant():
    rng = np.random.default_rng(0)
    L = cloud_laplacian(rng, 60)
    result = solve(L, [0, 5, 17], [2.5, 2.5, 2.5])
    assert np.allclose(result.values, 2.5, atol=1e-7)


def test_path_midpoint():
    result = solve(path_laplacian(3), [0, 2], [0.0, 1.0])
    assert result.values[1] == pytest.approx(0.5, abs=1e-8)
    assert result.solved


def test_linear_on_long_path():
    result = solve(path_laplacian(20), [0, 19], [0.0, 19.0], tolerance=1e-12)
    assert np.allclose(result.values, np.arange(20.0), atol=1e-8)


def test_star_centre_is_mean_of_leaves():
    edges = np.array([[0, 1], [0, 2], [0, 3], [0, 4]])
    L = build_laplacian(5, EdgeList(5, edges)).matrix
    result = solve(L, [1, 2, 3, 4], [1.0, 2.0, 3.0, 10.0])
    assert result.values[0] == pytest.approx(4.0, abs=1e-8)


def test_matches_dense_solve_on_random_graphs():
    rng = np.random.default_rng(42)
    for _ in range(200):
        n = int(rng.integers(4, 40))
        L = cloud_laplacian(rng, n)
        k = int(rng.integers(1, n))
        bidx = np.sort(rng.choice(n, k, replace=False))
        bvals = rng.normal(0, 10, k)
        result = solve(L, bidx, bvals, tolerance=1e-12)
        scale = max(1.0, float(np.max(np.abs(bvals))))
        assert np.max(np.abs(result.values - dense_oracle(L, bidx, bvals))) < 1e-8 * scale
        # boundary values are kept exactly
        assert np.array_equal(result.values[bidx], bvals)


def test_maximum_principle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        L = cloud_laplacian(rng, 80)
        bidx = rng.choice(80, 10, replace=False)
        bvals = rng.uniform(-3, 5, 10)
        values = solve(L, bidx, bvals, tolerance=1e-12).values
        assert values.max() <= bvals.max() + 1e-7
        assert values.min() >= bvals.min() - 1e-7


def test_linear_in_boundary_values():
    rng = np.random.default_rng(3)
    L = cloud_laplacian(rng, 100)
    bidx = np.arange(0, 100, 7)
    b1, b2 = rng.normal(size=bidx.size), rng.normal(size=bidx.size)
    x1 = solve(L, bidx, b1, tolerance=1e-12).values
    x2 = solve(L, bidx, b2, tolerance=1e-12).values
    x12 = solve(L, bidx, 2 * b1 - 3 * b2, tolerance=1e-12).values
    assert np.max(np.abs(x12 - (2 * x1 - 3 * x2))) < 1e-7


def test_all_boundary_skips_the_solve():
    result = solve(path_laplacian(4), [0, 1, 2, 3], [1.0, 2.0, 3.0, 4.0])
    assert result.values.tolist() == [1.0, 2.0, 3.0, 4.0]
    assert result.iterations_used == 0
    assert not result.solved


def test_zero_boundary_values_give_zero():
    result = solve(path_laplacian(10), [0, 9], [0.0, 0.0])
    assert np.all(result.values == 0.0)
    assert result.iterations_used == 0


def test_empty_boundary():
    with pytest.raises(EmptyBoundary):
        solve(path_laplacian(4), [], [])


@pytest.mark.parametrize("bidx,bvals", [
    ([0, 0], [1.0, 2.0]),
    ([0, 9], [1.0, 2.0]),
    ([0, 1], [1.0]),
])
def test_invalid_boundary(bidx, bvals):
    with pytest.raises(InvalidConfig):
        solve(path_laplacian(4), bidx, bvals)


def test_iteration_cap_raises():
    with pytest.raises(ConvergenceFailure) as exc:
        solve(path_laplacian(60), [0, 59], [0.0, 1.0], max_iterations=1)
    assert exc.value.exit_code == 3
    assert exc.value.residual > 1e-8
    assert exc.value.iterations == 1


def test_residual_reported():
    rng = np.random.default_rng(5)
    L = cloud_laplacian(rng, 500)
    result = solve(L, np.arange(0, 500, 50), rng.normal(size=10), tolerance=1e-10)
    assert 0 < result.iterations_used <= 10 * 490
    assert result.achieved_residual <= 1e-10
