"""
Unit tests for Pydantic models.
"""

import math

import pytest
from pydantic import ValidationError

from src.models import (
    BoundCheck,
    CellProblem,
    CutProblem,
    EnergyBreakdown,
    EnergyParams,
    HomogenizedTensor,
    MicrostructureSpec,
    RegimeMode,
    RegimePlan,
    Schedule,
    beta_for,
)


class TestMicrostructureSpec:
    """Test MicrostructureSpec model."""

    def test_derived_quantities(self):
        """Test cell count, matrix fraction and interface constant."""
        spec = MicrostructureSpec(n=2, a=0.25, eps=0.125, domain_len=1.0)
        assert spec.n_cells == 8
        assert spec.matrix_fraction == pytest.approx(0.75)
        assert spec.interface_constant == pytest.approx(2.0)
        assert spec.volume == 1.0

    def test_interface_constant_3d(self):
        spec = MicrostructureSpec(n=3, a=0.25, eps=0.5)
        assert spec.interface_constant == pytest.approx(6 * 0.25)

    def test_unperforated_has_no_interface(self):
        assert MicrostructureSpec(a=0.0, eps=0.5).interface_constant == 0.0

    def test_non_integer_tiling_rejected(self):
        """Test L/eps must be an integer."""
        with pytest.raises(ValidationError):
            MicrostructureSpec(eps=0.3)

    def test_inclusion_size_bounds(self):
        with pytest.raises(ValidationError):
            MicrostructureSpec(a=0.5, eps=0.5)
        with pytest.raises(ValidationError):
            MicrostructureSpec(a=-0.1, eps=0.5)

    def test_dimension_rejected(self):
        with pytest.raises(ValidationError):
            MicrostructureSpec(n=4, eps=0.5)


class TestCellProblem:
    """Test CellProblem model."""

    def test_defaults(self):
        problem = CellProblem(xi=(1, 0))
        assert problem.xi == (1.0, 0.0)
        assert problem.n == 2
        assert problem.tol == 1e-10

    def test_odd_resolution_rejected(self):
        with pytest.raises(ValidationError):
            CellProblem(xi=(1.0, 0.0), M=9)

    def test_coarse_resolution_rejected(self):
        with pytest.raises(ValidationError):
            CellProblem(xi=(1.0, 0.0), M=4)

    def test_bad_gradient_rejected(self):
        with pytest.raises(ValidationError):
            CellProblem(xi=(1.0, 0.0, 0.0, 0.0))
        with pytest.raises(ValidationError):
            CellProblem(xi=(math.nan, 0.0))


class TestCutProblem:
    """Test CutProblem model."""

    def test_non_unit_normal_rejected(self):
        with pytest.raises(ValidationError):
            CutProblem(nu=(1.0, 1.0))

    def test_default_band(self):
        assert CutProblem(nu=(0.0, 1.0), M=16).band == 2
        assert CutProblem(nu=(0.0, 1.0), M=4).band == 1
        assert CutProblem(nu=(0.0, 1.0), M=16, boundary_band=3).band == 3

    def test_small_cube_rejected(self):
        with pytest.raises(ValidationError):
            CutProblem(nu=(0.0, 1.0), t=1.0)


class TestSchedule:
    """Test Schedule model."""

    def test_default_scales(self):
        assert Schedule().scales == (8.0, 4.0, 2.0, 1.0)

    def test_must_end_at_one(self):
        with pytest.raises(ValidationError):
            Schedule(scales=(4.0, 2.0))

    def test_must_not_increase(self):
        with pytest.raises(ValidationError):
            Schedule(scales=(2.0, 4.0, 1.0))

    def test_collar_width(self):
        assert Schedule().collar_width(16) == 2
        assert Schedule(collar=3).collar_width(16) == 3


class TestRegimePlan:
    """Test RegimePlan model and the beta schedules."""

    def test_beta_schedules(self):
        assert beta_for(RegimeMode.SUB, 1.0, 0.25) == pytest.approx(0.0625)
        assert beta_for(RegimeMode.CRITICAL, 2.0, 0.25) == pytest.approx(0.5)
        assert beta_for(RegimeMode.SUPER, 1.0, 0.25) == pytest.approx(0.5)

    def test_params_follow_mode(self):
        plan = RegimePlan(mode=RegimeMode.SUB, alpha=0.5)
        params = plan.params(0.125)
        assert params.beta == pytest.approx(0.125**2)
        assert params.alpha == 0.5

    def test_short_chain_rejected(self):
        with pytest.raises(ValidationError):
            RegimePlan(eps_chain=(0.25, 0.125))

    def test_increasing_chain_rejected(self):
        with pytest.raises(ValidationError):
            RegimePlan(eps_chain=(0.125, 0.25, 0.0625))

    def test_beta_above_one_rejected(self):
        """Test a critical plan whose beta exceeds 1 on the chain."""
        with pytest.raises(ValidationError):
            RegimePlan(mode=RegimeMode.CRITICAL, ell=8.0)

    def test_non_tiling_eps_rejected(self):
        with pytest.raises(ValidationError):
            RegimePlan(eps_chain=(0.25, 0.15, 0.1))


class TestEnergyModels:
    """Test EnergyParams and EnergyBreakdown."""

    def test_beta_range(self):
        with pytest.raises(ValidationError):
            EnergyParams(beta=0.0)
        with pytest.raises(ValidationError):
            EnergyParams(beta=1.5)

    def test_total_and_objective(self):
        breakdown = EnergyBreakdown(volume=1.0, surf_matrix=0.5, surf_inclusion=2.0, beta=0.25, fidelity=0.1)
        assert breakdown.total == pytest.approx(2.0)
        assert breakdown.objective == pytest.approx(2.1)


class TestBoundCheck:
    """Test BoundCheck.bracket."""

    def test_inside(self):
        check = BoundCheck.bracket("x", 1.0, 0.0, 2.0)
        assert check.ok
        assert check.margin == 1.0

    def test_outside(self):
        check = BoundCheck.bracket("x", 3.0, 0.0, 2.0)
        assert not check.ok
        assert check.margin == -1.0

    def test_one_sided(self):
        assert BoundCheck.bracket("x", 5.0, lower=1.0).ok
        assert not BoundCheck.bracket("x", 5.0, upper=1.0).ok

    def test_no_bounds(self):
        check = BoundCheck.bracket("x", 5.0)
        assert check.ok
        assert check.margin == 0.0


class TestHomogenizedTensor:
    """Test the quadratic form of HomogenizedTensor."""

    def test_fhat(self):
        tensor = HomogenizedTensor(a=0.0, n=2, A=[[2.0, 0.5], [0.5, 1.0]], samples=[], orders=[[None, None], [None, None]], quad_residual=0.0)
        assert tensor.fhat((1.0, 1.0)) == pytest.approx(4.0)
        assert tensor.fhat((1.0, 0.0)) == pytest.approx(2.0)


class TestResultRecord:
    """Test ResultRecord serialization."""

    def test_checksum_ignores_timings(self, sample_record):
        other = sample_record.model_copy(update={"timings": {"seconds": 99.0}})
        assert other.checksum() == sample_record.checksum()

    def test_checksum_tracks_outputs(self, sample_record):
        other = sample_record.model_copy(update={"outputs": {"fhat": 0.5}})
        assert other.checksum() != sample_record.checksum()

    def test_bound_ok(self, sample_record):
        assert sample_record.bound_ok
        failed = sample_record.model_copy(update={"checks": [BoundCheck.bracket("x", 2.0, upper=1.0)]})
        assert not failed.bound_ok
