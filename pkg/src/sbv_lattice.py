"""
Weak-membrane discretization of the high-contrast free-discontinuity energy.

Each lattice edge e carries either the elastic term

    vol_e * (u_head - u_tail)^2,    vol_e = h^(n-2) b_e (s_e + alpha (1 - s_e))

or, when broken, the surface term

    kappa_e = h^(n-1) b_e (f_e + beta (1 - f_e)),

where s_e and f_e are the matrix fractions of the edge's dual cell and face and
b_e is the part of the dual cell inside the domain. The total is the sum of
the per-edge terms, so a J-update that keeps the cheaper term edge by edge can
never increase it.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import LinearOperator, cg, spsolve

from .cell_corrector import CorrectorField
from .errors import LatticeMismatchError, SolverError
from .microgeometry import Lattice, build_lattice
from .models import EnergyBreakdown, EnergyParams, FidelityStep, MicrostructureSpec, Schedule

logger = logging.getLogger(__name__)

MONOTONE_TOL = 1e-12


@dataclass(frozen=True)
class AffineDatum:
    """u pinned to xi.x on the boundary collar."""

    xi: Tuple[float, ...]


@dataclass(frozen=True)
class JumpDatum:
    """u pinned to z on the side x.nu >= 0 of the domain centre, 0 elsewhere."""

    z: float
    nu: Tuple[float, ...]


@dataclass(frozen=True, eq=False)
class FidelityDatum:
    """No pinning; weight * L1 distance to node samples g over the matrix."""

    g: np.ndarray
    weight: float = 1.0


BoundaryDatum = Union[AffineDatum, JumpDatum, FidelityDatum]


@dataclass(frozen=True, eq=False)
class LatticeField:
    """Node values u and broken-edge flags on a lattice."""

    lattice: Lattice
    u: np.ndarray
    broken: np.ndarray

    def __post_init__(self):
        if self.u.shape != (self.lattice.n_nodes,) or self.broken.shape != (self.lattice.n_edges,):
            raise LatticeMismatchError("field arrays do not match the lattice")
        if not np.all(np.isfinite(self.u)):
            raise ValueError("field values must be finite")

    @property
    def du(self) -> np.ndarray:
        return self.u[self.lattice.head] - self.u[self.lattice.tail]

    def with_values(self, u: np.ndarray) -> "LatticeField":
        return replace(self, u=u)


@dataclass(frozen=True, eq=False)
class MinimizationResult:
    field: LatticeField
    breakdown: EnergyBreakdown
    converged: bool
    iterations: int
    history: Tuple[float, ...]
    start: str

    @property
    def objective(self) -> float:
        return self.breakdown.objective


@dataclass(frozen=True, eq=False)
class RecoveryResult:
    field: LatticeField
    breakdown: EnergyBreakdown
    density: float
    interface_constant: float
    bound: float
    bound_ok: bool


@dataclass(frozen=True, eq=False)
class FidelityRun:
    steps: List[FidelityStep]
    fields: List[LatticeField]
    settled: bool
    flags: List[str] = field(default_factory=list)


def edge_coefficients(lattice: Lattice, alpha: float, beta: float) -> Tuple[np.ndarray, np.ndarray]:
    """Elastic coefficient and break cost of every edge."""
    h, n = lattice.h, lattice.n
    b = lattice.edge_boundary_factor
    s = lattice.edge_volume_share
    f = lattice.edge_face_share
    vol = h ** (n - 2) * b * (s + alpha * (1.0 - s))
    kappa = h ** (n - 1) * b * (f + beta * (1.0 - f))
    return vol, kappa


def edge_terms(f: LatticeField, vol: np.ndarray, kappa: np.ndarray) -> np.ndarray:
    du = f.du
    return np.where(f.broken, kappa, vol * du * du)


def energy(
    f: LatticeField, p: EnergyParams, *, alpha: Optional[float] = None, beta: Optional[float] = None
) -> EnergyBreakdown:
    """Three-term energy of a field; `alpha`/`beta` override the parameters for sandwich evaluations."""
    alpha = p.alpha if alpha is None else alpha
    beta = p.beta if beta is None else beta
    lattice = f.lattice
    vol, _ = edge_coefficients(lattice, alpha, beta)
    du = f.du
    area = lattice.face_area
    share = lattice.edge_face_share
    return EnergyBreakdown(
        volume=float(np.sum(np.where(f.broken, 0.0, vol * du * du))),
        surf_matrix=float(np.sum(np.where(f.broken, area * share, 0.0))),
        surf_inclusion=float(np.sum(np.where(f.broken, area * (1.0 - share), 0.0))),
        beta=beta,
    )


def huber(s: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(s)
    return np.where(a <= delta, 0.5 * s * s / delta, a - 0.5 * delta)


def fidelity_term(f: LatticeField, g: np.ndarray, weight: float = 1.0) -> float:
    """weight * L1 distance to g over the matrix."""
    return float(weight * np.sum(f.lattice.node_matrix_volume * np.abs(f.u - g)))


def affine_datum_values(lattice: Lattice, xi: Sequence[float]) -> np.ndarray:
    return lattice.coords @ np.asarray(xi, dtype=float)


def jump_datum_values(lattice: Lattice, z: float, nu: Sequence[float]) -> np.ndarray:
    side = (lattice.coords - lattice.center) @ np.asarray(nu, dtype=float) >= -1e-12 * lattice.h
    return z * side.astype(float)


def _datum_values(datum: BoundaryDatum, lattice: Lattice) -> np.ndarray:
    if isinstance(datum, AffineDatum):
        return affine_datum_values(lattice, datum.xi)
    if isinstance(datum, JumpDatum):
        return jump_datum_values(lattice, datum.z, datum.nu)
    return np.asarray(datum.g, dtype=float)


def competitors(datum: BoundaryDatum, lattice: Lattice, schedule: Optional[Schedule] = None) -> List[Tuple[str, LatticeField]]:
    """Closed-form competitor fields: the pure-elastic and pure-jump fields of a datum."""
    schedule = schedule or Schedule()
    values = _datum_values(datum, lattice)
    unbroken = np.zeros(lattice.n_edges, dtype=bool)
    if isinstance(datum, AffineDatum):
        return [("affine", LatticeField(lattice, values, unbroken))]
    if isinstance(datum, JumpDatum):
        pinned = lattice.collar_mask(schedule.collar_width(lattice.M))
        s = (lattice.coords - lattice.center) @ np.asarray(datum.nu, dtype=float)
        ramp = datum.z * np.clip(0.5 + s / lattice.spec.domain_len, 0.0, 1.0)
        ramp[pinned] = values[pinned]
        du = values[lattice.head] - values[lattice.tail]
        jump_field = LatticeField(lattice, values, du != 0)
        locked = pinned[lattice.tail] & pinned[lattice.head] & (du != 0)
        return [("elastic", LatticeField(lattice, ramp, locked)), ("jump", jump_field)]
    return [("datum", LatticeField(lattice, values, unbroken))]


class _Problem:
    """Fixed data of one minimization: pins, locked edges, coefficients, fidelity weights."""

    def __init__(self, datum: BoundaryDatum, lattice: Lattice, p: EnergyParams, schedule: Schedule):
        self.lattice = lattice
        self.schedule = schedule
        self.vol, self.kappa = edge_coefficients(lattice, p.alpha, p.beta)
        self.datum_values = _datum_values(datum, lattice)
        if isinstance(datum, FidelityDatum):
            if datum.g.shape != (lattice.n_nodes,) or not np.all(np.isfinite(datum.g)):
                raise ValueError("fidelity samples must be finite, one per lattice node")
            self.pinned = np.zeros(lattice.n_nodes, dtype=bool)
            self.g = np.asarray(datum.g, dtype=float)
            self.fid_weight = datum.weight * lattice.node_matrix_volume
            spread = float(np.ptp(self.g))
            self.delta = schedule.huber_rel_width * (spread if spread > 0 else 1.0)
        else:
            self.pinned = lattice.collar_mask(schedule.collar_width(lattice.M))
            self.g = None
            self.fid_weight = np.zeros(lattice.n_nodes)
            self.delta = 0.0
        self.anchor = self.pinned | (self.fid_weight > 0)
        t, h = lattice.tail, lattice.head
        datum_du = self.datum_values[h] - self.datum_values[t]
        self.locked = self.pinned[t] & self.pinned[h]
        self.locked_broken = self.locked & isinstance(datum, JumpDatum) & (datum_du != 0)

    def prepare(self, u: np.ndarray, broken: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        u = np.array(u, dtype=float)
        u[self.pinned] = self.datum_values[self.pinned]
        broken = np.where(self.locked, self.locked_broken, broken)
        return u, broken

    def objective(self, u: np.ndarray, broken: np.ndarray, scale: float = 1.0) -> float:
        du = u[self.lattice.head] - u[self.lattice.tail]
        total = float(np.sum(np.where(broken, scale * self.kappa, self.vol * du * du)))
        if self.g is not None:
            total += float(np.sum(self.fid_weight * huber(u - self.g, self.delta)))
        return total

    def components(self, broken: np.ndarray) -> Tuple[int, np.ndarray, np.ndarray]:
        """Connected components over elastic edges and a mask of nodes in anchored components."""
        lattice = self.lattice
        active = ~broken & (self.vol > 0)
        n = lattice.n_nodes
        adjacency = sparse.coo_matrix(
            (np.ones(int(active.sum())), (lattice.tail[active], lattice.head[active])), shape=(n, n)
        )
        n_comp, labels = connected_components(adjacency, directed=False)
        anchored_comp = np.zeros(n_comp, dtype=bool)
        anchored_comp[labels[self.anchor]] = True
        return n_comp, labels, anchored_comp[labels]

    def u_step(self, u: np.ndarray, broken: np.ndarray) -> np.ndarray:
        """Minimize over u with J fixed on anchored components; floating nodes are left alone."""
        lattice = self.lattice
        _, _, anchored = self.components(broken)
        solve = anchored & ~self.pinned
        if not solve.any():
            return u.copy()

        c = np.where(broken, 0.0, self.vol)
        t, h, n = lattice.tail, lattice.head, lattice.n_nodes
        laplacian = sparse.coo_matrix(
            (np.concatenate([c, c, -c, -c]), (np.concatenate([t, h, t, h]), np.concatenate([t, h, h, t]))),
            shape=(n, n),
        ).tocsr()
        q = np.zeros(n)
        rhs_fid = np.zeros(n)
        if self.g is not None:
            q = self.fid_weight / (2.0 * np.maximum(np.abs(u - self.g), self.delta))
            rhs_fid = q * self.g

        idx = np.flatnonzero(solve)
        rest = np.flatnonzero(~solve)
        A = (laplacian[idx][:, idx] + sparse.diags(q[idx])).tocsr()
        b = rhs_fid[idx] - laplacian[idx][:, rest] @ u[rest]

        if self.schedule.linear_solver == "direct":
            x = spsolve(A.tocsc(), b)
        else:
            diag = A.diagonal()
            P = LinearOperator(A.shape, matvec=lambda r: r / diag, dtype=float)
            x, info = cg(A, b, x0=u[idx], rtol=self.schedule.cg_tol, atol=0.0, maxiter=self.schedule.cg_max_iter, M=P)
            if info < 0:
                raise SolverError("CG breakdown in the elastic step")
            if info > 0:
                logger.debug("elastic step stopped at the CG iteration cap")
        out = u.copy()
        out[idx] = x
        return out

    def reset_floating(self, u: np.ndarray, broken: np.ndarray) -> np.ndarray:
        """Move each floating fragment to the mean of its neighbours across broken edges.

        Inclusion-only fragments of one inclusion cell move together.
        """
        lattice = self.lattice
        n_comp, labels, anchored = self.components(broken)
        floating = ~anchored
        if not floating.any():
            return u
        group = labels.copy()
        has_matrix = np.bincount(labels[~lattice.node_label], minlength=n_comp) > 0
        incl_only = floating & ~has_matrix[labels]
        group[incl_only] = n_comp + lattice.inclusion_cell[incl_only]
        size = n_comp + lattice.n_inclusion_cells

        t, h = lattice.tail, lattice.head
        differ = group[t] != group[h]
        from_t = differ & floating[t]
        from_h = differ & floating[h]
        sums = np.bincount(group[t][from_t], weights=u[h][from_t], minlength=size)
        sums += np.bincount(group[h][from_h], weights=u[t][from_h], minlength=size)
        counts = np.bincount(group[t][from_t], minlength=size) + np.bincount(group[h][from_h], minlength=size)
        own = np.bincount(group[floating], weights=u[floating], minlength=size)
        own_count = np.maximum(np.bincount(group[floating], minlength=size), 1)
        target = np.where(counts > 0, sums / np.maximum(counts, 1), own / own_count)
        out = u.copy()
        out[floating] = target[group[floating]]
        return out

    def j_step(self, u: np.ndarray, scale: float) -> np.ndarray:
        du = u[self.lattice.head] - u[self.lattice.tail]
        broken = self.vol * du * du > self.kappa * scale
        return np.where(self.locked, self.locked_broken, broken)


def _run(problem: _Problem, name: str, u0: np.ndarray, broken0: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float, bool, int, List[float]]:
    schedule = problem.schedule
    u, broken = problem.prepare(u0, broken0)
    E = problem.objective(u, broken)
    best = (E, u, broken)
    history = [E]
    iterations = 0
    converged = False

    for k, scale in enumerate(schedule.scales):
        final = k == len(schedule.scales) - 1
        for _ in range(schedule.max_outer):
            iterations += 1
            start_E = E
            candidate = problem.u_step(u, broken)
            E_c = problem.objective(candidate, broken)
            if E_c <= E:
                u, E = candidate, E_c
            candidate = problem.reset_floating(u, broken)
            E_c = problem.objective(candidate, broken)
            if E_c <= E:
                u, E = candidate, E_c

            new_broken = problem.j_step(u, scale)
            E_j = problem.objective(u, new_broken)
            if final:
                if E_j > E + MONOTONE_TOL * max(1.0, abs(E)):
                    raise SolverError(f"energy increased from {E:.15g} to {E_j:.15g} in the break step")
                if E_j > start_E + MONOTONE_TOL * max(1.0, abs(start_E)):
                    raise SolverError(f"energy increased from {start_E:.15g} to {E_j:.15g}")
            changed = bool(np.any(new_broken != broken))
            broken, E = new_broken, E_j
            history.append(E)
            if E < best[0]:
                best = (E, u, broken)
            if not changed and start_E - E <= schedule.energy_rtol * max(abs(E), 1e-300):
                converged = converged or final
                break
    if not converged:
        logger.warning("minimization from %s start hit the iteration cap; returning the best field", name)
    _, u_best, broken_best = best
    return u_best, broken_best, best[0], converged, iterations, history


def am_minimize(
    datum: BoundaryDatum,
    lattice: Lattice,
    p: EnergyParams,
    schedule: Optional[Schedule] = None,
    initial: Optional[LatticeField] = None,
) -> MinimizationResult:
    """Alternating minimization with graduated non-convexity.

    Starts: the given `initial` field, or the datum's competitors (both the
    elastic and the pure-jump start for a jump datum). The lowest objective
    seen on any trajectory, starts included, is returned.
    """
    schedule = schedule or Schedule()
    problem = _Problem(datum, lattice, p, schedule)
    if initial is not None:
        if not _same_grid(initial.lattice, lattice):
            raise LatticeMismatchError("initial field lives on a different lattice")
        starts = [("initial", initial)]
    else:
        starts = competitors(datum, lattice, schedule)

    best: Optional[MinimizationResult] = None
    for name, start in starts:
        u, broken, objective, converged, iterations, history = _run(problem, name, start.u, start.broken)
        f = LatticeField(lattice, u, broken)
        breakdown = energy(f, p)
        if problem.g is not None:
            breakdown = breakdown.model_copy(update={"fidelity": fidelity_term(f, problem.g, datum.weight)})
        result = MinimizationResult(
            field=f, breakdown=breakdown, converged=converged, iterations=iterations, history=tuple(history), start=name
        )
        logger.debug("start %s: objective %.12g after %d iterations", name, objective, iterations)
        if best is None or result.objective < best.objective:
            best = result
    return best


def truncate(f: LatticeField, m: float) -> LatticeField:
    """Clamp u to [-m, m]; jump flags are kept."""
    return f.with_values(np.clip(f.u, -m, m))


def extend_to_inclusions(f: LatticeField) -> LatticeField:
    """Overwrite inclusion nodes with the mean of f over the matrix nodes of their cell."""
    lattice = f.lattice
    cell = lattice.inclusion_cell
    matrix = ~lattice.node_label
    sums = np.bincount(cell[matrix], weights=f.u[matrix], minlength=lattice.n_inclusion_cells)
    counts = np.bincount(cell[matrix], minlength=lattice.n_inclusion_cells)
    sel = lattice.node_label & (counts[cell] > 0)
    u = f.u.copy()
    u[sel] = sums[cell[sel]] / counts[cell[sel]]
    return f.with_values(u)


def _same_grid(f: Lattice, g: Lattice) -> bool:
    return f is g or (f.spec == g.spec and f.M == g.M)


def matrix_l1_distance(f: LatticeField, g: LatticeField) -> float:
    """L1 distance over the matrix part of the domain."""
    if not _same_grid(f.lattice, g.lattice):
        raise LatticeMismatchError("fields live on different lattices")
    return float(np.sum(f.lattice.node_matrix_volume * np.abs(f.u - g.u)))


def prolong(f: LatticeField, target: Lattice) -> LatticeField:
    """Nearest-node transfer to another lattice over the same domain."""
    source = f.lattice
    if source.spec.domain_len != target.spec.domain_len or source.n != target.n:
        raise LatticeMismatchError("lattices cover different domains")
    nearest = source.node_index(np.rint(target.coords / source.h))
    broken_lookup = sparse.csr_matrix(
        (f.broken.astype(float), (source.tail, source.head)), shape=(source.n_nodes, source.n_nodes)
    )
    t, h = nearest[target.tail], nearest[target.head]
    lo, hi = np.minimum(t, h), np.maximum(t, h)
    broken = np.asarray(broken_lookup[lo, hi]).ravel() > 0
    return LatticeField(target, f.u[nearest], broken)


def build_recovery(
    xi: Sequence[float], corrector: CorrectorField, lattice: Lattice, p: EnergyParams
) -> RecoveryResult:
    """Recovery field xi.x + eps w(x/eps) on the matrix with per-cell inclusion averages.

    Interface edges are broken where that is cheaper. The certified bound is
    density <= fhat + C beta/eps + tol_disc with C = 2n(2a)^(n-1) and
    tol_disc = (C + n)|xi|^2/M.

    Raises:
        LatticeMismatchError: if the corrector was solved for another grid, inclusion,
            gradient or inclusion volume weight.
    """
    xi = np.asarray(xi, dtype=float)
    cp = corrector.problem
    if cp.M != lattice.M or cp.n != lattice.n or abs(cp.a - lattice.spec.a) > 1e-15:
        raise LatticeMismatchError(f"corrector grid (M={cp.M}, a={cp.a}) does not match the lattice")
    if not np.allclose(np.asarray(cp.xi), xi, rtol=0.0, atol=1e-14):
        raise LatticeMismatchError(f"corrector solved for xi={cp.xi}, not {tuple(xi)}")
    if abs(cp.alpha - p.alpha) > 1e-15:
        raise LatticeMismatchError(f"corrector solved for alpha={cp.alpha:g}, energy uses alpha={p.alpha:g}")

    spec = lattice.spec
    M = lattice.M
    cell_index = np.mod(lattice.node_units + M // 2, M)
    u = lattice.coords @ xi + spec.eps * corrector.at_nodes(cell_index)
    f = extend_to_inclusions(LatticeField(lattice, u, np.zeros(lattice.n_edges, dtype=bool)))

    vol, kappa = edge_coefficients(lattice, p.alpha, p.beta)
    du = f.du
    interface = lattice.node_label[lattice.tail] != lattice.node_label[lattice.head]
    f = replace(f, broken=interface & (vol * du * du > kappa))

    breakdown = energy(f, p)
    density = breakdown.total / spec.volume
    constant = spec.interface_constant
    tol_disc = (constant + lattice.n) * float(xi @ xi) / M
    bound = corrector.fhat + constant * p.beta / spec.eps + tol_disc
    measured = (breakdown.surf_matrix + breakdown.surf_inclusion) * spec.eps / spec.volume
    ok = density <= bound
    if not ok:
        logger.warning("recovery density %.6g exceeds the bound %.6g", density, bound)
    return RecoveryResult(
        field=f, breakdown=breakdown, density=density, interface_constant=measured, bound=bound, bound_ok=ok
    )


def solve_fidelity(
    g: Callable[[np.ndarray], np.ndarray],
    eps_chain: Sequence[float],
    params_for: Callable[[float], EnergyParams],
    template: MicrostructureSpec,
    M: int,
    weight: float = 1.0,
    schedule: Optional[Schedule] = None,
) -> FidelityRun:
    """Minimize energy + weight * L1 fidelity along an eps-chain.

    `g` maps node coordinates (k, n) to data values. Successive minimizers
    are compared in the matrix L1 distance after prolongation to the finer
    lattice.
    """
    steps: List[FidelityStep] = []
    fields: List[LatticeField] = []
    flags: List[str] = []
    previous: Optional[LatticeField] = None
    for eps in eps_chain:
        spec = MicrostructureSpec(n=template.n, a=template.a, eps=eps, domain_len=template.domain_len)
        lattice = build_lattice(spec, M)
        samples = np.asarray(g(lattice.coords), dtype=float)
        if not np.all(np.isfinite(samples)):
            raise ValueError("fidelity data must be bounded")
        params = params_for(eps)
        result = am_minimize(FidelityDatum(samples, weight), lattice, params, schedule)
        distance = None
        if previous is not None:
            distance = matrix_l1_distance(result.field, prolong(previous, lattice))
        if not result.converged:
            flags.append(f"non-converged at eps={eps:g}")
        steps.append(
            FidelityStep(
                eps=eps, beta=params.beta, m_k=result.objective, l1_to_previous=distance, converged=result.converged
            )
        )
        fields.append(result.field)
        previous = result.field
        logger.info("fidelity eps=%g: m_k=%.8g", eps, result.objective)

    settled = False
    if len(steps) >= 2:
        last, prev = steps[-1].m_k, steps[-2].m_k
        settled = abs(last - prev) <= 0.1 * max(abs(last), abs(prev), 1e-300) or max(abs(last), abs(prev)) == 0.0
    return FidelityRun(steps=steps, fields=fields, settled=settled, flags=flags)
