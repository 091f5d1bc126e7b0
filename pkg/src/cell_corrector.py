"""
Periodic cell problem on the perforated unit cell.

The corrector w minimizes the finite-difference Dirichlet energy

    sum_e c_e (xi . (x_head - x_tail) + w_head - w_tail)^2,   c_e = h^(n-2) * m_e

over periodic node values, where m_e is the matrix fraction of the edge's dual
cell. Edges with m_e = 0 are dropped, so inclusion nodes carry no unknowns and
the perforation boundary gets the natural Neumann condition.

Sparse products use scipy's CSR kernels, which accumulate each row in index
order on a single thread, so repeated solves are bit-identical.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import LinearOperator, cg

from .errors import SolverError
from .microgeometry import matrix_share
from .models import CellProblem, HomogenizedTensor, TensorSample

logger = logging.getLogger(__name__)

QUAD_RESIDUAL_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class CellGraph:
    """Periodic M^n grid with per-edge matrix weights (all edges, including zero weights)."""

    n: int
    M: int
    a: float
    alpha: float
    tail: np.ndarray
    head: np.ndarray
    axis: np.ndarray
    weight: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.M**self.n


@lru_cache(maxsize=16)
def cell_graph(n: int, M: int, a: float, alpha: float = 0.0) -> CellGraph:
    """Edges of the periodic cell grid; node i sits at grid unit i - M/2, the inclusion centre at 0.

    An edge with matrix share s > 0 weighs s + alpha(1 - s), the volume weight the
    lattice energy gives it; edges inside the inclusion weigh 0.
    """
    shape = (M,) * n
    index = np.arange(M**n).reshape(shape)
    units = np.stack(np.unravel_index(np.arange(M**n), shape), axis=-1) - M // 2
    tails, heads, axes, weights = [], [], [], []
    for d in range(n):
        tails.append(index.ravel())
        heads.append(np.roll(index, -1, axis=d).ravel())
        axes.append(np.full(M**n, d, dtype=np.int64))
        mid = units.astype(float)
        mid[:, d] += 0.5
        share = matrix_share(mid, M, a, range(n))
        weights.append(np.where(share > 0, share + alpha * (1.0 - share), 0.0))
    graph = CellGraph(
        n=n,
        M=M,
        a=a,
        alpha=alpha,
        tail=np.concatenate(tails),
        head=np.concatenate(heads),
        axis=np.concatenate(axes),
        weight=np.concatenate(weights),
    )
    for arr in (graph.tail, graph.head, graph.axis, graph.weight):
        arr.setflags(write=False)
    return graph


@dataclass(frozen=True, eq=False)
class CorrectorField:
    """Cell-problem solution.

    `w` is stored on the full M^n grid with zeros at nodes that carry no unknown.
    """

    problem: CellProblem
    w: np.ndarray
    matrix_nodes: np.ndarray
    fhat: float
    residual: float
    competitor: float
    iterations: int
    converged: bool

    def at_nodes(self, grid_index: np.ndarray) -> np.ndarray:
        """Corrector values at cell-grid multi-indices of shape (k, n)."""
        return self.w[tuple(np.asarray(grid_index).T)]


def _gradient_operator(graph: CellGraph, active: np.ndarray, unknown: np.ndarray) -> sparse.csr_matrix:
    """Signed incidence matrix restricted to active edges and unknown nodes."""
    column = np.full(graph.n_nodes, -1, dtype=np.int64)
    column[unknown] = np.arange(unknown.shape[0])
    t, h = column[graph.tail[active]], column[graph.head[active]]
    rows = np.arange(t.shape[0])
    data = np.concatenate([np.ones(rows.shape[0]), -np.ones(rows.shape[0])])
    return sparse.csr_matrix(
        (data, (np.concatenate([rows, rows]), np.concatenate([h, t]))),
        shape=(rows.shape[0], unknown.shape[0]),
    )


def solve_cell(p: CellProblem) -> CorrectorField:
    """Solve the periodic cell problem by Jacobi-preconditioned CG with mean projection.

    Raises:
        SolverError: if the matrix graph is disconnected or CG breaks down.
    """
    n, M = p.n, p.M
    graph = cell_graph(n, M, p.a, p.alpha)
    h = 1.0 / M
    active = graph.weight > 0
    touched = np.zeros(graph.n_nodes, dtype=bool)
    touched[graph.tail[active]] = True
    touched[graph.head[active]] = True
    unknown = np.flatnonzero(touched)

    D = _gradient_operator(graph, active, unknown)
    c = h ** (n - 2) * graph.weight[active]
    g = np.asarray(p.xi)[graph.axis[active]] * h
    A = (D.T @ sparse.diags(c) @ D).tocsr()
    b = -(D.T @ (c * g))

    n_comp, _ = connected_components(A, directed=False)
    if n_comp > 1:
        raise SolverError(f"matrix graph splits into {n_comp} components (a={p.a}, M={M})")

    competitor = float(np.sum(c * g * g))
    iterations = 0
    converged = True
    if not np.any(b):
        w = np.zeros(unknown.shape[0])
    else:
        diag = A.diagonal()

        def precondition(r):
            z = r / diag
            return z - z.mean()

        def count(_):
            nonlocal iterations
            iterations += 1

        P = LinearOperator(A.shape, matvec=precondition, dtype=float)
        w, info = cg(A, b, rtol=p.tol, atol=0.0, maxiter=p.max_iter, M=P, callback=count)
        if info < 0:
            raise SolverError(f"CG breakdown in cell problem xi={p.xi}")
        if info > 0:
            converged = False
            logger.warning("cell problem xi=%s M=%d did not converge in %d iterations", p.xi, M, p.max_iter)
        w = w - w.mean()

    b_norm = float(np.linalg.norm(b))
    residual = float(np.linalg.norm(b - A @ w)) / b_norm if b_norm > 0 else 0.0
    jump = g + D @ w
    fhat = float(np.sum(c * jump * jump))

    full = np.zeros(graph.n_nodes)
    full[unknown] = w
    logger.debug("cell problem xi=%s a=%g M=%d: fhat=%.12g in %d iterations", p.xi, p.a, M, fhat, iterations)
    return CorrectorField(
        problem=p,
        w=full.reshape((M,) * n),
        matrix_nodes=touched.reshape((M,) * n),
        fhat=fhat,
        residual=residual,
        competitor=competitor,
        iterations=iterations,
        converged=converged,
    )


def richardson(values: Sequence[float], Ms: Sequence[int]) -> Tuple[float, Optional[float]]:
    """Extrapolate a grid sequence in 1/M.

    The order is estimated from the last three grids when they form a
    geometric chain with monotone differences; otherwise first order is
    assumed from the last two.

    Returns:
        The extrapolated value and the order used (None when the data are flat).
    """
    f = np.asarray(values, dtype=float)
    m = np.asarray(Ms, dtype=float)
    if f.shape[0] < 2:
        return float(f[-1]), None
    scale = max(1.0, float(np.max(np.abs(f))))
    if abs(f[-1] - f[-2]) <= 1e-14 * scale:
        return float(f[-1]), None
    if f.shape[0] >= 3:
        f1, f2, f3 = f[-3:]
        r = m[-2] / m[-3]
        if abs(m[-1] / m[-2] - r) < 1e-12 * r and (f1 - f2) * (f2 - f3) > 0:
            order = math.log(abs((f1 - f2) / (f2 - f3))) / math.log(r)
            if 0.5 <= order <= 4.0:
                return float(f3 + (f3 - f2) / (r**order - 1.0)), order
    limit = (m[-1] * f[-1] - m[-2] * f[-2]) / (m[-1] - m[-2])
    return float(limit), 1.0


def _polarized(a: float, n: int, M: int, tol: float) -> np.ndarray:
    eye = np.eye(n)
    diag = [solve_cell(CellProblem(xi=tuple(eye[i]), a=a, M=M, tol=tol)).fhat for i in range(n)]
    A = np.diag(diag)
    for i, j in combinations(range(n), 2):
        both = solve_cell(CellProblem(xi=tuple(eye[i] + eye[j]), a=a, M=M, tol=tol)).fhat
        A[i, j] = A[j, i] = 0.5 * (both - diag[i] - diag[j])
    return A


def assemble_tensor(a: float, n: int, M_list: Sequence[int], tol: float = 1e-10, probes: int = 8) -> HomogenizedTensor:
    """Homogenized tensor by polarization, extrapolated entry by entry in 1/M.

    The quadratic-form residual is measured at the finest grid against
    `probes` seeded random directions.
    """
    M_list = list(M_list)
    if len(M_list) < 2 or any(b <= a_ for a_, b in zip(M_list, M_list[1:])):
        raise ValueError("M_list must be increasing with at least two entries")

    per_m = [_polarized(a, n, M, tol) for M in M_list]
    A = np.empty((n, n))
    orders: List[List[Optional[float]]] = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(i, n):
            limit, order = richardson([T[i, j] for T in per_m], M_list)
            A[i, j] = A[j, i] = limit
            orders[i][j] = orders[j][i] = order

    finest = per_m[-1]
    rng = np.random.default_rng(0)
    residual = 0.0
    for xi in rng.standard_normal((probes, n)):
        direct = solve_cell(CellProblem(xi=tuple(xi), a=a, M=M_list[-1], tol=tol)).fhat
        residual = max(residual, abs(float(xi @ finest @ xi) - direct) / float(xi @ xi))

    flags = []
    if residual > QUAD_RESIDUAL_TOL:
        flags.append(f"quadratic-form residual {residual:.3e} exceeds {QUAD_RESIDUAL_TOL:g}")
        logger.warning("tensor for a=%g: %s", a, flags[-1])
    if np.any(np.linalg.eigvalsh(A) <= 0) and a < 0.5:
        flags.append("extrapolated tensor is not positive definite")
        logger.warning("tensor for a=%g: %s", a, flags[-1])

    return HomogenizedTensor(
        a=a,
        n=n,
        A=A.tolist(),
        samples=[TensorSample(M=M, A=T.tolist()) for M, T in zip(M_list, per_m)],
        orders=orders,
        quad_residual=residual,
        flags=flags,
    )


def wiener_bounds(a: float, n: int, M: int, axis: int = 0, alpha: float = 0.0) -> Tuple[float, float]:
    """Discrete series/parallel bracket of f_hat(e_axis) on the M-grid.

    The upper bound restricts the corrector to depend on the axis coordinate
    only; the lower bound deletes every transverse conductance.
    """
    graph = cell_graph(n, M, a, alpha)
    h = 1.0 / M
    along = graph.axis == axis
    c = h ** (n - 2) * graph.weight[along]
    units = np.stack(np.unravel_index(graph.tail[along], (M,) * n), axis=-1)

    slot = units[:, axis]
    slot_conductance = np.bincount(slot, weights=c, minlength=M)
    upper = 0.0 if np.any(slot_conductance <= 0) else 1.0 / float(np.sum(1.0 / slot_conductance))

    transverse = np.delete(units, axis, axis=1)
    line = np.ravel_multi_index(tuple(transverse.T), (M,) * (n - 1)) if n > 1 else np.zeros_like(slot)
    lower = 0.0
    for k in np.unique(line):
        ck = c[line == k]
        if np.all(ck > 0):
            lower += 1.0 / float(np.sum(1.0 / ck))
    return lower, upper


def measured_c1(tensor: HomogenizedTensor) -> float:
    """Smallest ratio f_hat(xi)/|xi|^2, the least eigenvalue of A."""
    return float(np.min(np.linalg.eigvalsh(np.asarray(tensor.A))))
