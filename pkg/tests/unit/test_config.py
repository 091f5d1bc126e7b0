"""
Unit tests for configuration parsing.
"""

import logging
import textwrap

import pytest

from src.config import CACHE_ENV, Subcommand, configure_logging, load_config, parse_config
from src.errors import ConfigError
from src.models import RegimeMode, Stencil


def ini(text: str) -> str:
    return textwrap.dedent(text).lstrip()


class TestParseConfig:
    """Test parse_config."""

    def test_defaults(self):
        config = parse_config("", env={})
        assert config.subcommand is None
        assert config.microstructure.n == 2
        assert config.solver.M == 16
        assert config.plan.mode is RegimeMode.CRITICAL
        assert config.cache_root.as_posix() == "results/cache"

    def test_full_file(self):
        config = parse_config(
            ini(
                """
                [run]
                subcommand = estimate-f

                [microstructure]
                a = 0.125
                a_values = 0, 0.25

                [solver]
                M = 8
                cell_M = 8, 16
                stencil = crofton16
                linear_solver = direct

                [plan]
                mode = super  # trailing comment
                eps_chain = 0.5, 0.25, 0.125
                xi = 1 0; 0.5 0.5
                nu = 0 2
                """
            ),
            env={},
        )
        assert config.subcommand is Subcommand.ESTIMATE_F
        assert config.microstructure.a_values == [0.0, 0.25]
        assert config.solver.cell_M == [8, 16]
        assert config.solver.stencil is Stencil.CROFTON16
        assert config.plan.mode is RegimeMode.SUPER
        assert config.plan.xi == [[1.0, 0.0], [0.5, 0.5]]
        assert config.plan.nu == [[0.0, 1.0]]
        plan = config.regime_plan()
        assert plan.M == 8
        assert plan.schedule.linear_solver == "direct"

    def test_unknown_key_has_line_number(self):
        text = ini(
            """
            [solver]
            M = 16
            colour = red
            """
        )
        with pytest.raises(ConfigError, match=r"line 3: \[solver\] colour"):
            parse_config(text, env={})

    def test_invalid_value_has_line_number(self):
        text = ini(
            """
            [microstructure]
            a = 0.7
            """
        )
        with pytest.raises(ConfigError, match=r"line 2: \[microstructure\] a"):
            parse_config(text, env={})

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config("[extras]\nx = 1\n", env={})

    def test_unknown_run_key(self):
        with pytest.raises(ConfigError, match=r"\[run\] verbose"):
            parse_config("[run]\nverbose = yes\n", env={})

    def test_unknown_subcommand(self):
        with pytest.raises(ConfigError, match="subcommand"):
            parse_config("[run]\nsubcommand = launch\n", env={})

    def test_vector_dimension(self):
        with pytest.raises(ConfigError, match=r"\[plan\] xi"):
            parse_config("[plan]\nxi = 1 0 0\n", env={})

    def test_plan_level_validation(self):
        """Test a critical beta above one on the chain is reported against [plan]."""
        with pytest.raises(ConfigError, match=r"\[plan\]"):
            parse_config("[plan]\nell = 8\nmodes = critical\n", env={})

    def test_odd_resolution(self):
        with pytest.raises(ConfigError, match=r"\[solver\] M"):
            parse_config("[solver]\nM = 9\n", env={})

    @pytest.mark.parametrize(
        "text, field",
        [
            ("[solver]\nt_chain = 2, 4\n", r"line 2: \[solver\] t_chain"),
            ("[solver]\nt_chain = 2, 8, 4\n", r"line 2: \[solver\] t_chain"),
            ("[solver]\ncell_M = 32\n", r"line 2: \[solver\] cell_M"),
            ("[solver]\ncell_M = 64, 32\n", r"line 2: \[solver\] cell_M"),
            ("[plan]\nlambdas = 1, 2, 4\n", r"line 2: \[plan\] lambdas"),
            ("[plan]\nlambdas = 0, 1, 2, 4\n", r"line 2: \[plan\] lambdas"),
        ],
    )
    def test_chains_must_increase(self, text, field):
        with pytest.raises(ConfigError, match=field):
            parse_config(text, env={})

    def test_coercivity_sampling_is_planar(self):
        with pytest.raises(ConfigError, match=r"line 5: \[plan\] measure_c2"):
            parse_config("[microstructure]\nn = 3\n\n[plan]\nmeasure_c2 = yes\nxi = 1 0 0\nnu = 0 0 1\n", env={})

    def test_interleaved_chain_needs_even_cells(self):
        with pytest.raises(ConfigError, match=r"line 3: \[plan\] compare_chains"):
            parse_config("[plan]\neps_chain = 0.2, 0.1, 0.05\ncompare_chains = true\n", env={})

    def test_feature_flags(self):
        config = parse_config("[plan]\nmeasure_c2 = yes\ncompare_chains = yes\n", env={})
        assert config.plan.measure_c2
        assert config.plan.compare_chains

    def test_solvers_take_no_seed(self):
        with pytest.raises(ConfigError, match=r"line 2: \[solver\] seed"):
            parse_config("[solver]\nseed = 3\n", env={})
        assert "seed" not in parse_config("", env={}).regime_plan().schedule.model_dump()

    def test_malformed_text(self):
        with pytest.raises(ConfigError):
            parse_config("M = 16\n", env={})

    def test_cache_env_override(self, tmp_path):
        config = parse_config("", env={CACHE_ENV: str(tmp_path)})
        assert config.cache_root == tmp_path


class TestConfigHash:
    """Test RunConfig.config_hash."""

    def test_output_location_is_ignored(self):
        first = parse_config("[output]\ndirectory = a\n", env={})
        second = parse_config("[output]\ndirectory = b\n", env={})
        assert first.config_hash() == second.config_hash()

    def test_worker_count_is_ignored(self):
        serial = parse_config("[solver]\nworkers = 1\n", env={})
        parallel = parse_config("[solver]\nworkers = 2\n", env={})
        assert serial.config_hash() == parallel.config_hash()

    def test_science_changes_the_hash(self):
        first = parse_config("[microstructure]\na = 0.25\n", env={})
        second = parse_config("[microstructure]\na = 0.125\n", env={})
        assert first.config_hash() != second.config_hash()
        assert len(first.config_hash()) == 16


class TestLoadConfig:
    """Test load_config."""

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "absent.ini", env={})

    def test_no_file_means_defaults(self):
        assert load_config(None, env={}).solver.M == 16

    def test_reads_file(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[solver]\nM = 8\n")
        assert load_config(path, env={}).solver.M == 8


class TestConfigureLogging:
    """Test configure_logging."""

    def test_env_level(self, monkeypatch):
        monkeypatch.setenv("LOG_LEVEL", "warning")
        configure_logging()
        assert logging.getLogger().level == logging.WARNING

    def test_explicit_level(self):
        configure_logging("debug")
        assert logging.getLogger().level == logging.DEBUG
