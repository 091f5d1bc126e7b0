"""
Unit tests for the weak-membrane lattice energy and its minimizers.
"""

import numpy as np
import pytest

from src.cell_corrector import solve_cell
from src.errors import LatticeMismatchError
from src.microgeometry import build_lattice
from src.models import CellProblem, EnergyParams, MicrostructureSpec
from src.sbv_lattice import (
    AffineDatum,
    FidelityDatum,
    JumpDatum,
    LatticeField,
    affine_datum_values,
    am_minimize,
    build_recovery,
    competitors,
    edge_coefficients,
    energy,
    extend_to_inclusions,
    fidelity_term,
    jump_datum_values,
    matrix_l1_distance,
    prolong,
    solve_fidelity,
    truncate,
)


def random_field(lattice, seed=0, p_broken=0.2):
    rng = np.random.default_rng(seed)
    return LatticeField(lattice, rng.normal(size=lattice.n_nodes), rng.random(lattice.n_edges) < p_broken)


class TestLatticeField:
    """Test LatticeField validation."""

    def test_shape_mismatch(self, small_lattice):
        with pytest.raises(LatticeMismatchError):
            LatticeField(small_lattice, np.zeros(3), np.zeros(small_lattice.n_edges, dtype=bool))

    def test_non_finite(self, small_lattice):
        u = np.zeros(small_lattice.n_nodes)
        u[0] = np.inf
        with pytest.raises(ValueError):
            LatticeField(small_lattice, u, np.zeros(small_lattice.n_edges, dtype=bool))


class TestEnergy:
    """Test the three-term energy."""

    @pytest.mark.parametrize("xi", [(1.0, 0.0), (0.5, -2.0)])
    def test_affine_field_is_exact(self, small_lattice, xi):
        """Test xi.x with no breaks costs |xi|^2 |Omega| at alpha = 1."""
        f = LatticeField(small_lattice, affine_datum_values(small_lattice, xi), np.zeros(small_lattice.n_edges, dtype=bool))
        breakdown = energy(f, EnergyParams(alpha=1.0, beta=0.5))
        assert breakdown.volume == pytest.approx(float(np.dot(xi, xi)), rel=1e-12)
        assert breakdown.surf_matrix == 0.0
        assert breakdown.surf_inclusion == 0.0

    def test_soft_inclusions_lower_the_volume_term(self, small_lattice):
        f = LatticeField(small_lattice, affine_datum_values(small_lattice, (1.0, 0.0)), np.zeros(small_lattice.n_edges, dtype=bool))
        soft = energy(f, EnergyParams(alpha=0.0, beta=0.5)).volume
        assert soft == pytest.approx(0.75, rel=1e-12)

    def test_plane_jump_area(self, plain_lattice):
        values = jump_datum_values(plain_lattice, 1.0, (0.0, 1.0))
        f = LatticeField(plain_lattice, values, values[plain_lattice.head] != values[plain_lattice.tail])
        breakdown = energy(f, EnergyParams(beta=0.5))
        assert breakdown.surf_matrix == pytest.approx(1.0, abs=1e-12)
        assert breakdown.volume == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_sandwich(self, small_lattice, seed):
        """Test the energy is monotone in beta on arbitrary fields."""
        f = random_field(small_lattice, seed)
        p = EnergyParams(alpha=1.0, beta=0.3)
        low = energy(f, p, beta=0.0).total
        mid = energy(f, p).total
        high = energy(f, p, beta=1.0).total
        assert low <= mid <= high

    @pytest.mark.parametrize("seed", range(5))
    def test_monotone_in_alpha(self, small_lattice, seed):
        f = random_field(small_lattice, seed)
        assert energy(f, EnergyParams(alpha=0.2, beta=0.5)).total <= energy(f, EnergyParams(alpha=0.9, beta=0.5)).total

    def test_coefficients(self, small_lattice):
        vol, kappa = edge_coefficients(small_lattice, 0.0, 0.25)
        deep = small_lattice.edge_volume_share == 0.0
        assert np.all(vol[deep] == 0.0)
        assert kappa[deep] == pytest.approx(0.25 * small_lattice.face_area[deep])

    def test_fidelity_term(self, small_lattice):
        f = LatticeField(small_lattice, np.ones(small_lattice.n_nodes), np.zeros(small_lattice.n_edges, dtype=bool))
        assert fidelity_term(f, np.zeros(small_lattice.n_nodes), 2.0) == pytest.approx(1.5)


class TestTruncation:
    """Test truncate."""

    @pytest.mark.parametrize("seed", range(5))
    def test_does_not_increase_energy(self, small_lattice, seed):
        f = random_field(small_lattice, seed)
        p = EnergyParams(beta=0.5)
        clipped = truncate(f, 0.5)
        assert np.all(np.abs(clipped.u) <= 0.5)
        assert energy(clipped, p).total <= energy(f, p).total
        assert np.array_equal(clipped.broken, f.broken)


class TestCompetitors:
    """Test the closed-form starting fields."""

    def test_affine(self, small_lattice):
        names = [name for name, _ in competitors(AffineDatum((1.0, 0.0)), small_lattice)]
        assert names == ["affine"]

    def test_jump(self, small_lattice):
        starts = dict(competitors(JumpDatum(2.0, (0.0, 1.0)), small_lattice))
        assert set(starts) == {"elastic", "jump"}
        assert starts["jump"].broken.any()
        assert np.all(starts["elastic"].u >= 0.0) and np.all(starts["elastic"].u <= 2.0)


class TestAmMinimize:
    """Test alternating minimization."""

    def test_affine_datum_without_perforation(self, plain_lattice, fast_schedule):
        result = am_minimize(AffineDatum((1.0, 0.0)), plain_lattice, EnergyParams(beta=1.0), fast_schedule)
        assert result.breakdown.volume == pytest.approx(1.0, rel=1e-8)
        assert not result.field.broken.any()
        assert result.converged

    def test_large_jump_breaks_cleanly(self, plain_lattice, fast_schedule):
        """Test a large jump datum is matched by a straight crack of unit area."""
        result = am_minimize(JumpDatum(8.0, (0.0, 1.0)), plain_lattice, EnergyParams(beta=1.0), fast_schedule)
        assert result.breakdown.total == pytest.approx(1.0, abs=1e-9)
        assert result.breakdown.volume == pytest.approx(0.0, abs=1e-9)

    def test_never_worse_than_its_starts(self, small_lattice, fast_schedule):
        datum = AffineDatum((2.0, 0.0))
        p = EnergyParams(beta=0.05)
        result = am_minimize(datum, small_lattice, p, fast_schedule)
        for _, start in competitors(datum, small_lattice, fast_schedule):
            assert result.objective <= energy(start, p).total + 1e-12

    def test_constant_data_are_reproduced(self, small_lattice, fast_schedule):
        g = np.full(small_lattice.n_nodes, 3.0)
        result = am_minimize(FidelityDatum(g, 1.0), small_lattice, EnergyParams(beta=0.5), fast_schedule)
        assert result.objective == pytest.approx(0.0, abs=1e-6)

    def test_initial_on_other_lattice(self, small_lattice, plain_lattice, fast_schedule):
        initial = LatticeField(plain_lattice, np.zeros(plain_lattice.n_nodes), np.zeros(plain_lattice.n_edges, dtype=bool))
        with pytest.raises(LatticeMismatchError):
            am_minimize(AffineDatum((1.0, 0.0)), small_lattice, EnergyParams(beta=0.5), fast_schedule, initial=initial)

    def test_deterministic(self, small_lattice, fast_schedule):
        datum = JumpDatum(3.0, (0.0, 1.0))
        p = EnergyParams(beta=0.5)
        first = am_minimize(datum, small_lattice, p, fast_schedule)
        second = am_minimize(datum, small_lattice, p, fast_schedule)
        assert first.objective == second.objective
        assert np.array_equal(first.field.u, second.field.u)


class TestFieldTransfer:
    """Test extension, distances and prolongation."""

    def test_extension_of_a_constant(self, small_lattice):
        u = np.where(small_lattice.node_label, 7.0, 2.0)
        f = extend_to_inclusions(LatticeField(small_lattice, u, np.zeros(small_lattice.n_edges, dtype=bool)))
        assert np.allclose(f.u, 2.0)

    @pytest.mark.parametrize("seed", range(3))
    def test_extension_keeps_matrix_edge_energy(self, small_lattice, seed):
        f = random_field(small_lattice, seed)
        g = extend_to_inclusions(f)
        vol, kappa = edge_coefficients(small_lattice, 1.0, 0.25)
        matrix = ~small_lattice.node_label[small_lattice.tail] & ~small_lattice.node_label[small_lattice.head]

        def matrix_energy(field):
            per_edge = np.where(field.broken, kappa, vol * field.du**2)
            return float(np.sum(per_edge[matrix]))

        assert matrix.any()
        assert np.array_equal(g.u[~small_lattice.node_label], f.u[~small_lattice.node_label])
        assert matrix_energy(g) == matrix_energy(f)

    def test_matrix_distance(self, small_lattice):
        zero = LatticeField(small_lattice, np.zeros(small_lattice.n_nodes), np.zeros(small_lattice.n_edges, dtype=bool))
        one = zero.with_values(np.ones(small_lattice.n_nodes))
        assert matrix_l1_distance(zero, zero) == 0.0
        assert matrix_l1_distance(zero, one) == pytest.approx(0.75, abs=1e-12)

    def test_distance_needs_same_lattice(self, small_lattice, plain_lattice):
        f = LatticeField(small_lattice, np.zeros(small_lattice.n_nodes), np.zeros(small_lattice.n_edges, dtype=bool))
        g = LatticeField(plain_lattice, np.zeros(plain_lattice.n_nodes), np.zeros(plain_lattice.n_edges, dtype=bool))
        with pytest.raises(LatticeMismatchError):
            matrix_l1_distance(f, g)

    def test_prolong_on_matching_nodes(self, small_lattice):
        """Test transfer between lattices sharing their nodes is exact."""
        finer = build_lattice(MicrostructureSpec(n=2, a=0.25, eps=0.25), 4)
        f = random_field(small_lattice, 3)
        g = prolong(f, finer)
        assert np.array_equal(g.u, f.u)
        assert np.array_equal(g.broken, f.broken)


class TestRecovery:
    """Test build_recovery."""

    def test_bound_holds(self, small_lattice):
        corrector = solve_cell(CellProblem(xi=(1.0, 0.0), a=0.25, M=8, alpha=1.0))
        recovery = build_recovery((1.0, 0.0), corrector, small_lattice, EnergyParams(beta=0.5))
        assert recovery.bound_ok
        assert recovery.density <= recovery.bound
        assert recovery.interface_constant >= 0.0

    @pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
    def test_matrix_volume_reproduces_fhat(self, small_lattice, alpha):
        corrector = solve_cell(CellProblem(xi=(2.0, 0.0), a=0.25, M=8, alpha=alpha))
        params = EnergyParams(alpha=alpha, beta=1e-6)
        recovery = build_recovery((2.0, 0.0), corrector, small_lattice, params)
        vol, kappa = edge_coefficients(small_lattice, alpha, params.beta)
        interface = small_lattice.node_label[small_lattice.tail] != small_lattice.node_label[small_lattice.head]
        slack = float(np.sum(kappa[interface])) / small_lattice.spec.volume
        volume_density = recovery.breakdown.volume / small_lattice.spec.volume
        assert corrector.fhat - 1e-8 <= volume_density <= corrector.fhat + slack + 1e-8

    def test_grid_mismatch(self, small_lattice):
        corrector = solve_cell(CellProblem(xi=(1.0, 0.0), a=0.25, M=16, alpha=1.0))
        with pytest.raises(LatticeMismatchError):
            build_recovery((1.0, 0.0), corrector, small_lattice, EnergyParams(beta=0.5))

    def test_gradient_mismatch(self, small_lattice):
        corrector = solve_cell(CellProblem(xi=(1.0, 0.0), a=0.25, M=8, alpha=1.0))
        with pytest.raises(LatticeMismatchError):
            build_recovery((0.0, 1.0), corrector, small_lattice, EnergyParams(beta=0.5))

    def test_alpha_mismatch(self, small_lattice):
        corrector = solve_cell(CellProblem(xi=(1.0, 0.0), a=0.25, M=8))
        with pytest.raises(LatticeMismatchError, match="alpha"):
            build_recovery((1.0, 0.0), corrector, small_lattice, EnergyParams(alpha=1.0, beta=0.5))


class TestSolveFidelity:
    """Test the fidelity chain."""

    def test_step_datum(self, small_spec, fast_schedule):
        def step(coords):
            return (coords[:, 0] >= 0.5).astype(float)

        run = solve_fidelity(step, (0.5, 0.25, 0.125), lambda eps: EnergyParams(beta=eps), small_spec, 8, 8.0, fast_schedule)
        assert len(run.steps) == 3
        assert run.steps[0].l1_to_previous is None
        assert all(s.l1_to_previous is not None and s.l1_to_previous >= 0.0 for s in run.steps[1:])
        assert all(np.isfinite(s.m_k) and s.m_k >= 0.0 for s in run.steps)
        assert [s.beta for s in run.steps] == [0.5, 0.25, 0.125]

    def test_unbounded_data_rejected(self, small_spec, fast_schedule):
        with pytest.raises(ValueError):
            solve_fidelity(lambda c: np.full(c.shape[0], np.inf), (0.5, 0.25, 0.125), lambda eps: EnergyParams(beta=eps), small_spec, 8)
