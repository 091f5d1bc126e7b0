"""
Effective surface density by s-t minimum cuts on perforated cubes.

The cube tQ^nu is centred at the origin with one face normal to nu. Nodes in
the boundary collar are contracted into the terminals (source where x.nu >= 0),
so the graph only carries free nodes. Capacities price the matrix part of each
dual face; faces inside the perforation are free but stay in the graph.
"""

import logging
import math
from dataclasses import dataclass
from itertools import product
from typing import Hashable, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from networkx.algorithms.flow import boykov_kolmogorov

from .errors import GeometryError
from .microgeometry import inside_units, stencil_offsets, stencil_slack, stencil_weights
from .models import CutProblem, GhatEstimate, Stencil

logger = logging.getLogger(__name__)

SOURCE = "s"
SINK = "t"
MAX_CUT_NODES = 2_000_000
LOW_CONFIDENCE_SPREAD = 0.10
DUALITY_TOL = 1e-9
BRUTE_FORCE_LIMIT = 20


@dataclass(frozen=True, eq=False)
class CutGraph:
    """Capacitated digraph with terminals; `area` is the nominal interface area t^(n-1)."""

    graph: nx.DiGraph
    area: float
    source: Hashable = SOURCE
    sink: Hashable = SINK
    problem: Optional[CutProblem] = None


@dataclass(frozen=True)
class CutResult:
    cost: float
    per_area: float
    cut_faces: Tuple[Tuple[Hashable, Hashable], ...]
    flow_certificate: float

    @property
    def duality_gap(self) -> float:
        return abs(self.cost - self.flow_certificate)


def rotation_frame(nu: Sequence[float]) -> np.ndarray:
    """Orthonormal matrix whose last column is nu."""
    nu = np.asarray(nu, dtype=float)
    n = nu.shape[0]
    basis = np.column_stack([nu] + [np.eye(n)[:, k] for k in range(n)])
    q, _ = np.linalg.qr(basis)
    q = q[:, :n]
    if q[:, 0] @ nu < 0:
        q[:, 0] = -q[:, 0]
    return np.column_stack([q[:, 1:], q[:, 0]])


def _face_probes(offset: np.ndarray) -> np.ndarray:
    """Sample offsets spanning the unit dual face of an edge with direction `offset`."""
    n = offset.shape[0]
    unit = offset / np.linalg.norm(offset)
    complement = np.linalg.svd(unit[None, :])[2][1:]
    return np.array([0.25 * np.asarray(signs) @ complement for signs in product((-1.0, 1.0), repeat=n - 1)])


def build_cut_graph(p: CutProblem) -> CutGraph:
    """Cut graph of the perforated cube tQ^nu with the jump datum pinned on a collar.

    Raises:
        GeometryError: on a stencil incompatible with the dimension or an oversized graph.
    """
    n = p.n
    offsets = stencil_offsets(p.stencil, n)
    h = 1.0 / p.M
    weights = stencil_weights(p.stencil, n, h)
    nu = np.asarray(p.nu)
    frame = rotation_frame(nu)
    half = 0.5 * p.t
    axis_aligned = np.count_nonzero(np.abs(nu) > 1e-12) == 1

    radius = half if axis_aligned else half * math.sqrt(n)
    r_units = int(math.ceil(radius * p.M - 1e-9))
    box = 2 * r_units + 1
    if box**n > MAX_CUT_NODES:
        raise GeometryError(f"t*M too large: {box}^{n} candidate nodes exceed {MAX_CUT_NODES}")

    shape = (box,) * n
    units = np.stack(np.unravel_index(np.arange(box**n), shape), axis=-1) - r_units
    local = (units * h) @ frame
    reach = np.max(np.abs(local), axis=1)
    inside = reach <= half + 1e-12
    pinned = inside & (half - reach < p.band * h - 1e-12)
    source_side = (units * h) @ nu >= -1e-12

    free = inside & ~pinned
    label = np.full(box**n, -1, dtype=np.int64)
    n_free = int(np.count_nonzero(free))
    label[free] = np.arange(n_free)
    label[pinned & source_side] = n_free
    label[pinned & ~source_side] = n_free + 1
    index = np.arange(box**n).reshape(shape)

    tails, heads, caps = [], [], []
    constant = 0.0
    for offset, weight in zip(offsets, weights):
        lo = tuple(slice(max(0, -o), box - max(0, o)) for o in offset)
        hi = tuple(slice(max(0, o), box - max(0, -o)) for o in offset)
        a_idx, b_idx = index[lo].ravel(), index[hi].ravel()
        keep = inside[a_idx] & inside[b_idx]
        a_idx, b_idx = a_idx[keep], b_idx[keep]
        mid = 0.5 * (units[a_idx] + units[b_idx])
        if p.face_rule == "midpoint":
            share = (~inside_units(mid, p.M, p.a)).astype(float)
        else:
            share = np.zeros(mid.shape[0])
            probes = _face_probes(offset.astype(float))
            for probe in probes:
                share += ~inside_units(mid + probe, p.M, p.a)
            share /= probes.shape[0]
        # faces of edges lying on a cube face are half outside the cube
        la_loc, lb_loc = local[a_idx], local[b_idx]
        on_face = (
            (np.abs(la_loc) >= half - 1e-12) & (np.abs(lb_loc) >= half - 1e-12) & (np.sign(la_loc) == np.sign(lb_loc))
        )
        cap = weight * share * 0.5 ** np.count_nonzero(on_face, axis=1)
        la, lb = label[a_idx], label[b_idx]
        both_pinned = pinned[a_idx] & pinned[b_idx]
        crossing = both_pinned & (la != lb)
        constant += math.fsum(cap[crossing])
        sel = ~both_pinned
        # free-free edges both ways; pinned endpoints become terminal edges from source / into sink
        la, lb, cap = la[sel], lb[sel], cap[sel]
        forward = lb != n_free
        backward = la != n_free
        forward &= la != n_free + 1
        backward &= lb != n_free + 1
        tails += [la[forward], lb[backward]]
        heads += [lb[forward], la[backward]]
        caps += [cap[forward], cap[backward]]

    tail = np.concatenate(tails)
    head = np.concatenate(heads)
    cap = np.concatenate(caps)
    width = n_free + 2
    pair, inverse = np.unique(tail * width + head, return_inverse=True)
    merged = np.bincount(inverse, weights=cap, minlength=pair.shape[0])

    names = list(range(n_free)) + [SOURCE, SINK]
    graph = nx.DiGraph()
    graph.add_nodes_from(names)
    graph.add_edges_from(
        (names[int(k // width)], names[int(k % width)], {"capacity": float(c)}) for k, c in zip(pair, merged)
    )
    if constant > 0:
        graph.add_edge(SOURCE, SINK, capacity=constant)

    logger.debug(
        "cut graph nu=%s t=%g M=%d %s: %d free nodes, %d arcs", p.nu, p.t, p.M, p.stencil.value, n_free, graph.number_of_edges()
    )
    return CutGraph(graph=graph, area=p.t ** (n - 1), problem=p)


def min_cut(g: CutGraph) -> CutResult:
    """Exact minimum s-t cut by Boykov-Kolmogorov augmenting paths.

    The cut is read off the residual-reachability partition; its cost is
    summed with math.fsum so it does not depend on set iteration order.
    """
    flow_value, (reachable, _) = nx.minimum_cut(g.graph, g.source, g.sink, flow_func=boykov_kolmogorov)
    cut = [(u, v) for u, v in g.graph.edges() if u in reachable and v not in reachable]
    cost = math.fsum(g.graph[u][v]["capacity"] for u, v in cut)
    result = CutResult(cost=cost, per_area=cost / g.area, cut_faces=tuple(cut), flow_certificate=float(flow_value))
    if result.duality_gap > DUALITY_TOL * max(1.0, cost):
        logger.warning("cut cost %.12g and flow %.12g disagree", cost, flow_value)
    return result


def brute_force_cut(g: CutGraph) -> float:
    """Minimum cut by enumerating every labeling of the non-terminal nodes."""
    nodes = [v for v in g.graph.nodes if v not in (g.source, g.sink)]
    if len(nodes) > BRUTE_FORCE_LIMIT:
        raise GeometryError(f"{len(nodes)} free nodes exceed the enumeration limit {BRUTE_FORCE_LIMIT}")
    arcs = list(g.graph.edges(data="capacity"))
    best = math.inf
    for bits in product((False, True), repeat=len(nodes)):
        side = dict(zip(nodes, bits))
        side[g.source], side[g.sink] = True, False
        best = min(best, math.fsum(c for u, v, c in arcs if side[u] and not side[v]))
    return best


def estimate_ghat(
    nu: Sequence[float],
    a: float,
    t_chain: Sequence[float],
    M: int,
    stencil: Stencil = Stencil.AXIS4,
    boundary_band: Optional[int] = None,
    face_rule: str = "fraction",
) -> GhatEstimate:
    """Per-area minimal cut along an increasing chain of cube sizes.

    The limit is the mean of the last two values; a relative spread above
    10% marks the estimate as low confidence.
    """
    t_chain = [float(t) for t in t_chain]
    if len(t_chain) < 3 or any(b <= a_ for a_, b in zip(t_chain, t_chain[1:])):
        raise ValueError("t_chain must be increasing with at least three entries")

    per_area: List[float] = []
    flags: List[str] = []
    for t in t_chain:
        problem = CutProblem(
            nu=tuple(nu), t=t, M=M, a=a, stencil=stencil, boundary_band=boundary_band, face_rule=face_rule
        )
        result = min_cut(build_cut_graph(problem))
        per_area.append(result.per_area)
        if result.duality_gap > DUALITY_TOL * max(1.0, result.cost):
            flags.append(f"duality gap {result.duality_gap:.3e} at t={t:g}")

    limit = 0.5 * (per_area[-1] + per_area[-2])
    spread = abs(per_area[-1] - per_area[-2]) / limit if limit > 0 else 0.0
    low_confidence = spread > LOW_CONFIDENCE_SPREAD
    if low_confidence:
        flags.append(f"t-chain spread {spread:.1%} above {LOW_CONFIDENCE_SPREAD:.0%}")
        logger.warning("ghat nu=%s a=%g: %s", tuple(nu), a, flags[-1])
    n = len(nu)
    logger.info("ghat nu=%s a=%g M=%d %s: %.6f (spread %.2e)", tuple(nu), a, M, stencil.value, limit, spread)
    return GhatEstimate(
        nu=tuple(float(c) for c in nu),
        a=a,
        M=M,
        stencil=stencil,
        t_chain=t_chain,
        per_area=per_area,
        limit=limit,
        spread=spread,
        slack=stencil_slack(stencil, n),
        low_confidence=low_confidence,
        flags=flags,
    )


def measured_c2(
    a: float,
    M: int,
    t_chain: Sequence[float],
    stencil: Stencil = Stencil.CROFTON16,
    directions: int = 8,
    boundary_band: Optional[int] = None,
    face_rule: str = "fraction",
) -> Tuple[float, List[GhatEstimate]]:
    """Minimum of the surface density over directions sampled on the quarter circle."""
    estimates = []
    for theta in np.linspace(0.0, 0.5 * math.pi, directions):
        nu = (math.cos(theta), math.sin(theta))
        estimates.append(estimate_ghat(nu, a, t_chain, M, stencil, boundary_band, face_rule))
    return min(e.limit for e in estimates), estimates
