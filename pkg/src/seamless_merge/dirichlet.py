"""Discrete Dirichlet problems: harmonic extension of boundary values on a graph."""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import cg

from .errors import ConvergenceFailure, EmptyBoundary, InvalidConfig

DEFAULT_TOLERANCE = 1e-8


@dataclass(frozen=True)
class DirichletProblem:
    laplacian: sparse.spmatrix
    boundary_indices: np.ndarray
    boundary_values: np.ndarray
    tolerance: float = DEFAULT_TOLERANCE
    max_iterations: Optional[int] = None


@dataclass(frozen=True)
class HarmonicCorrection:
    values: np.ndarray
    iterations_used: int
    achieved_residual: float

    @property
    def solved(self) -> bool:
        return self.iterations_used > 0


def solve_dirichlet(problem: DirichletProblem) -> HarmonicCorrection:
    """Fix values on the boundary set and make L x vanish on every other vertex.

    The interior block L_II is symmetric positive definite for a connected graph
    with a nonempty boundary, so it is solved with Jacobi-preconditioned
    conjugate gradients from a zero initial guess.
    """
    L = sparse.csr_matrix(problem.laplacian)
    n = L.shape[0]
    bidx = np.asarray(problem.boundary_indices, dtype=np.int64)
    bvals = np.asarray(problem.boundary_values, dtype=np.float64)
    if bidx.size == 0:
        raise EmptyBoundary("Dirichlet problem has no boundary vertices")
    if bvals.shape != bidx.shape:
        raise InvalidConfig(f"{bidx.size} boundary indices but {bvals.size} boundary values")
    if bidx.min() < 0 or bidx.max() >= n or np.unique(bidx).size != bidx.size:
        raise InvalidConfig("Boundary indices must be distinct vertices of the graph")
    if problem.tolerance <= 0:
        raise InvalidConfig(f"Tolerance must be positive, got {problem.tolerance}")

    values = np.zeros(n)
    values[bidx] = bvals
    interior = np.ones(n, dtype=bool)
    interior[bidx] = False
    iidx = np.flatnonzero(interior)
    if iidx.size == 0:
        return HarmonicCorrection(values=values, iterations_used=0, achieved_residual=0.0)

    L_int = L[iidx]
    L_II = L_int[:, iidx].tocsr()
    rhs = -(L_int[:, bidx] @ bvals)
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        return HarmonicCorrection(values=values, iterations_used=0, achieved_residual=0.0)

    max_it = problem.max_iterations or 10 * iidx.size
    diag = L_II.diagonal()
    jacobi = sparse.diags(1.0 / diag)

    x = np.zeros(iidx.size)
    used = 0
    residual = 1.0
    while used < max_it:
        counter = {"k": 0}

        def _count(_):
            counter["k"] += 1

        x, info = cg(L_II, rhs, x0=x, rtol=problem.tolerance, atol=0.0,
                     maxiter=max_it - used, M=jacobi, callback=_count)
        used += max(counter["k"], 1)
        residual = float(np.linalg.norm(rhs - L_II @ x)) / rhs_norm
        if residual <= problem.tolerance:
            break
        if info < 0:
            break
        logging.debug(f"CG restart after {used} iterations, true residual {residual:.3e}")

    if residual > problem.tolerance:
        raise ConvergenceFailure(
            f"Dirichlet solve on {iidx.size} interior vertices stalled at relative residual "
            f"{residual:.3e} > {problem.tolerance:.1e} after {used} iterations",
            residual=residual,
            iterations=used,
        )

    values[iidx] = x
    logging.debug(f"Dirichlet solve: {iidx.size} interior, {bidx.size} boundary, {used} iterations, residual {residual:.2e}")
    return HarmonicCorrection(values=values, iterations_used=used, achieved_residual=residual)
