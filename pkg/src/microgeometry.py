"""
Periodic perforated geometry and its lattice discretization.

Inclusions are the cubes eps*(i + Q_2a), i in Z^n, so they are centred on the
points eps*i. Lattice classification works in grid units (multiples of
h = eps/M), which decides ties on inclusion faces exactly. Faces count as matrix.
"""

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from itertools import product
from typing import Sequence, Tuple

import numpy as np

from .errors import GeometryError
from .models import MicrostructureSpec, RegionLabel, Stencil

logger = logging.getLogger(__name__)

MAX_LATTICE_NODES = 4_000_000

_STENCIL_OFFSETS = {
    Stencil.AXIS4: ((1, 0), (0, 1)),
    Stencil.DIAG8: ((1, 0), (0, 1), (1, 1), (1, -1)),
    Stencil.CROFTON16: ((1, 0), (0, 1), (1, 1), (1, -1), (2, 1), (1, 2), (2, -1), (1, -2)),
    Stencil.AXIS6: ((1, 0, 0), (0, 1, 0), (0, 0, 1)),
}


def classify_point(x: Sequence[float], spec: MicrostructureSpec) -> RegionLabel:
    """Region of a single point of R^n."""
    y = np.asarray(x, dtype=float) / spec.eps
    y = y - np.round(y)
    if spec.a > 0 and bool(np.all(np.abs(y) < spec.a)):
        return RegionLabel.INCLUSION
    return RegionLabel.MATRIX


def inclusion_mask(points: np.ndarray, spec: MicrostructureSpec) -> np.ndarray:
    """Vectorised classify_point: True where points (..., n) fall inside an inclusion."""
    y = np.asarray(points, dtype=float) / spec.eps
    y = y - np.round(y)
    return np.all(np.abs(y) < spec.a, axis=-1)


def inside_units(units: np.ndarray, M: int, a: float) -> np.ndarray:
    """Inclusion test for points given in grid units of a period-M lattice."""
    units = np.asarray(units, dtype=float)
    offset = units - M * np.floor(units / M + 0.5)
    return np.all(np.abs(offset) < a * M, axis=-1)


def matrix_share(centers: np.ndarray, M: int, a: float, axes: Sequence[int]) -> np.ndarray:
    """Matrix fraction of unit boxes centred at `centers` (grid units), sampled at +-1/4 along `axes`."""
    centers = np.asarray(centers, dtype=float)
    n = centers.shape[-1]
    offsets = list(product(*[(-0.25, 0.25) if k in axes else (0.0,) for k in range(n)]))
    share = np.zeros(centers.shape[:-1])
    for off in offsets:
        share += ~inside_units(centers + np.asarray(off), M, a)
    return share / len(offsets)


@dataclass(frozen=True, eq=False)
class Lattice:
    """Regular node grid over the closed domain with axis-aligned edges.

    Nodes are numbered in C order over `shape`; edges are stored as flat
    (tail, head) arrays with head = tail + e_axis.
    """

    spec: MicrostructureSpec
    M: int
    h: float
    shape: Tuple[int, ...]
    node_units: np.ndarray
    tail: np.ndarray
    head: np.ndarray
    edge_axis: np.ndarray

    @property
    def n(self) -> int:
        return self.spec.n

    @property
    def n_nodes(self) -> int:
        return int(self.node_units.shape[0])

    @property
    def n_edges(self) -> int:
        return int(self.tail.shape[0])

    @property
    def extent(self) -> int:
        """Grid units per axis, N*M."""
        return self.shape[0] - 1

    @cached_property
    def coords(self) -> np.ndarray:
        return self.node_units * self.h

    @cached_property
    def center(self) -> np.ndarray:
        return np.full(self.n, 0.5 * self.spec.domain_len)

    @cached_property
    def edge_midpoint_units(self) -> np.ndarray:
        mid = self.node_units[self.tail].astype(float)
        mid[np.arange(self.n_edges), self.edge_axis] += 0.5
        return mid

    @cached_property
    def node_label(self) -> np.ndarray:
        """True on inclusion nodes."""
        if self.spec.a == 0:
            return np.zeros(self.n_nodes, dtype=bool)
        return inside_units(self.node_units, self.M, self.spec.a)

    @cached_property
    def edge_label(self) -> np.ndarray:
        """True on edges whose midpoint lies in an inclusion."""
        if self.spec.a == 0:
            return np.zeros(self.n_edges, dtype=bool)
        return inside_units(self.edge_midpoint_units, self.M, self.spec.a)

    @cached_property
    def edge_volume_share(self) -> np.ndarray:
        """Matrix fraction of each edge's dual cell."""
        return matrix_share(self.edge_midpoint_units, self.M, self.spec.a, range(self.n))

    @cached_property
    def edge_face_share(self) -> np.ndarray:
        """Matrix fraction of each edge's transverse face."""
        share = np.empty(self.n_edges)
        mid = self.edge_midpoint_units
        for d in range(self.n):
            sel = self.edge_axis == d
            share[sel] = matrix_share(mid[sel], self.M, self.spec.a, [k for k in range(self.n) if k != d])
        return share

    @cached_property
    def edge_boundary_factor(self) -> np.ndarray:
        """Fraction of each edge's dual cell inside the closed domain."""
        on_boundary = (self.node_units[self.tail] == 0) | (self.node_units[self.tail] == self.extent)
        halves = np.where(on_boundary, 0.5, 1.0)
        halves[np.arange(self.n_edges), self.edge_axis] = 1.0
        return np.prod(halves, axis=1)

    @cached_property
    def face_area(self) -> np.ndarray:
        """Transverse face area of each edge inside the domain."""
        return self.h ** (self.n - 1) * self.edge_boundary_factor

    @cached_property
    def node_volume(self) -> np.ndarray:
        on_boundary = (self.node_units == 0) | (self.node_units == self.extent)
        return self.h**self.n * np.prod(np.where(on_boundary, 0.5, 1.0), axis=1)

    @cached_property
    def node_matrix_volume(self) -> np.ndarray:
        """Matrix volume of each node's dual cell inside the domain."""
        return self.node_volume * matrix_share(self.node_units, self.M, self.spec.a, range(self.n))

    @cached_property
    def inclusion_cell(self) -> np.ndarray:
        """Flat index of the inclusion-centred cell eps*(k + Q) containing each node."""
        k = np.floor(self.node_units / self.M + 0.5).astype(np.int64)
        return np.ravel_multi_index(tuple(k.T), (self.spec.n_cells + 1,) * self.n)

    @property
    def n_inclusion_cells(self) -> int:
        return (self.spec.n_cells + 1) ** self.n

    @cached_property
    def edge_frame_cell(self) -> np.ndarray:
        """Flat index of the tiling cell eps*(k + [0,1)^n) containing each edge midpoint."""
        k = np.minimum(np.floor(self.edge_midpoint_units / self.M).astype(np.int64), self.spec.n_cells - 1)
        return np.ravel_multi_index(tuple(k.T), (self.spec.n_cells,) * self.n)

    @property
    def n_frame_cells(self) -> int:
        return self.spec.n_cells**self.n

    def collar_mask(self, width: int) -> np.ndarray:
        """Nodes within `width` grid steps of the domain boundary."""
        dist = np.minimum(self.node_units, self.extent - self.node_units)
        return np.any(dist < width, axis=1)

    def node_index(self, units: np.ndarray) -> np.ndarray:
        units = np.clip(np.asarray(units, dtype=np.int64), 0, self.extent)
        return np.ravel_multi_index(tuple(units.T), self.shape)


def build_lattice(spec: MicrostructureSpec, M: int) -> Lattice:
    """Lattice with M nodes per eps-cell per axis over the closed domain.

    Raises:
        GeometryError: if M < 4, L/eps is not an integer, or the grid is too large.
    """
    if M < 4:
        raise GeometryError(f"M={M} under-resolves the inclusions, need M >= 4")
    cells = spec.domain_len / spec.eps
    if abs(cells - round(cells)) > 1e-9 * max(1.0, cells) or round(cells) < 1:
        raise GeometryError(f"domain_len/eps = {cells:g} is not a positive integer")
    if spec.a > 0 and abs(spec.a * M - round(spec.a * M)) > 1e-9:
        logger.warning("a*M = %g is not an integer; inclusion faces are not grid aligned", spec.a * M)

    per_axis = spec.n_cells * M + 1
    n_nodes = per_axis**spec.n
    if n_nodes > MAX_LATTICE_NODES:
        raise GeometryError(f"lattice of {n_nodes} nodes exceeds the limit of {MAX_LATTICE_NODES}")

    shape = (per_axis,) * spec.n
    index = np.arange(n_nodes).reshape(shape)
    node_units = np.stack(np.unravel_index(np.arange(n_nodes), shape), axis=-1).astype(np.int64)

    tails, heads, axes = [], [], []
    for d in range(spec.n):
        lo = [slice(None)] * spec.n
        hi = [slice(None)] * spec.n
        lo[d] = slice(0, -1)
        hi[d] = slice(1, None)
        t = index[tuple(lo)].ravel()
        tails.append(t)
        heads.append(index[tuple(hi)].ravel())
        axes.append(np.full(t.shape[0], d, dtype=np.int64))

    lattice = Lattice(
        spec=spec,
        M=M,
        h=spec.eps / M,
        shape=shape,
        node_units=node_units,
        tail=np.concatenate(tails),
        head=np.concatenate(heads),
        edge_axis=np.concatenate(axes),
    )
    logger.debug("built lattice n=%d M=%d eps=%g: %d nodes, %d edges", spec.n, M, spec.eps, n_nodes, lattice.n_edges)
    return lattice


def stencil_offsets(stencil: Stencil, n: int) -> np.ndarray:
    """Undirected neighbour offsets of a stencil, in grid units."""
    if stencil is Stencil.AXIS6:
        if n != 3:
            raise GeometryError("stencil axis6 is three-dimensional")
    elif n != 2:
        raise GeometryError(f"stencil {stencil.value} is only defined in two dimensions")
    return np.asarray(_STENCIL_OFFSETS[stencil], dtype=np.int64)


def crofton_angles(offsets: np.ndarray) -> np.ndarray:
    """Angular measure of each 2D direction: half the gap to its neighbours on the half circle."""
    theta = np.mod(np.arctan2(offsets[:, 1], offsets[:, 0]), math.pi)
    order = np.argsort(theta)
    sorted_theta = theta[order]
    prev = np.roll(sorted_theta, 1)
    prev[0] -= math.pi
    nxt = np.roll(sorted_theta, -1)
    nxt[-1] += math.pi
    dphi = np.empty_like(theta)
    dphi[order] = 0.5 * (nxt - prev)
    return dphi


def stencil_weights(stencil: Stencil, n: int, h: float) -> np.ndarray:
    """Area weight of each stencil edge.

    Axis stencils use the face area h^(n-1); the diagonal stencils use
    Cauchy-Crofton weights h^2 dphi / (2 |e|).
    """
    offsets = stencil_offsets(stencil, n)
    if stencil in (Stencil.AXIS4, Stencil.AXIS6):
        return np.full(offsets.shape[0], h ** (n - 1))
    lengths = h * np.linalg.norm(offsets, axis=1)
    return h * h * crofton_angles(offsets) / (2.0 * lengths)


def metric_factor(stencil: Stencil, nu: np.ndarray) -> np.ndarray:
    """Cut cost per unit area of a straight interface with normal(s) nu, for unit h."""
    nu = np.atleast_2d(np.asarray(nu, dtype=float))
    n = nu.shape[1]
    offsets = stencil_offsets(stencil, n).astype(float)
    weights = stencil_weights(stencil, n, 1.0)
    return np.abs(nu @ offsets.T) @ weights


def stencil_slack(stencil: Stencil, n: int, samples: int = 4096) -> float:
    """Largest relative metrication error of the stencil over all interface directions."""
    if n == 2:
        theta = np.linspace(0.0, math.pi, samples, endpoint=False)
        dirs = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    else:
        k = np.arange(samples) + 0.5
        z = 1.0 - k / samples
        r = np.sqrt(1.0 - z * z)
        phi = k * math.pi * (3.0 - math.sqrt(5.0))
        dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return float(np.max(np.abs(metric_factor(stencil, dirs) - 1.0)))
