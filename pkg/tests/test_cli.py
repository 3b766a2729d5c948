#!/usr/bin/env python3
"""
Test suite for cli.py

Run with: uv run pytest tests/test_cli.py -v
"""

import pytest
from filelock import FileLock

from bregman_jko import __version__, experiment
from bregman_jko.cli import EXIT_FAILED_ROWS, EXIT_OK, EXIT_USAGE, main
from bregman_jko.experiment import LOCK_NAME

UNIFORM_YAML = """\
schema_version: 1
name: uniform
domain: {bounds: [0.0, 1.0]}
jko: {t_end: 0.02, eps: 0.01, el_residuals: false}
oracle: {kind: fd, dt: 1.0e-3}
sweep: {tau: [0.01], resolution: [8]}
output: out
"""


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "uniform.yaml"
    path.write_text(UNIFORM_YAML)
    return path


def _exit_code(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    return info.value.code


# =============================================================================
# ARGUMENT TESTS
# =============================================================================


class TestArguments:
    """Tests for the parser itself."""

    def test_version(self, capsys):
        assert _exit_code(["--version"]) == 0
        assert __version__ in capsys.readouterr().out

    def test_command_required(self):
        assert _exit_code([]) == 2

    def test_unknown_command(self):
        assert _exit_code(["plot", "x.yaml"]) == 2


# =============================================================================
# COMMAND TESTS
# =============================================================================


class TestRun:
    """Tests for `bregman-jko run`."""

    def test_success(self, config_path, capsys):
        assert _exit_code(["run", str(config_path)]) == EXIT_OK
        assert (config_path.parent / "out" / "report.csv").exists()
        assert "1/1 point(s) succeeded" in capsys.readouterr().err

    def test_output_override(self, config_path, tmp_path):
        target = tmp_path / "elsewhere"
        assert _exit_code(["run", str(config_path), "-o", str(target)]) == EXIT_OK
        assert (target / "report.yaml").exists()

    def test_failed_rows(self, config_path, capsys):
        config_path.write_text(UNIFORM_YAML.replace("el_residuals: false", "inner_max_iters: 1"))
        assert _exit_code(["run", str(config_path)]) == EXIT_FAILED_ROWS
        assert "FAILED" in capsys.readouterr().err

    def test_missing_config(self, tmp_path, capsys):
        assert _exit_code(["run", str(tmp_path / "missing.yaml")]) == EXIT_USAGE
        assert capsys.readouterr().err.startswith("Error:")

    def test_incomplete_config(self, config_path, capsys):
        config_path.write_text("schema_version: 1\n")
        assert _exit_code(["run", str(config_path)]) == EXIT_USAGE
        assert "missing required field 'jko.t_end'" in capsys.readouterr().err

    def test_locked_output(self, config_path, monkeypatch, capsys):
        monkeypatch.setattr(experiment, "LOCK_TIMEOUT", 0.1)
        out = config_path.parent / "out"
        out.mkdir()
        with FileLock(out / LOCK_NAME):
            assert _exit_code(["run", str(config_path)]) == EXIT_USAGE
        assert "locked" in capsys.readouterr().err


class TestValidate:
    """Tests for `bregman-jko validate`."""

    def test_ok(self, config_path, capsys):
        assert _exit_code(["validate", str(config_path)]) == EXIT_OK
        out = capsys.readouterr().out
        assert out.startswith("info: comparability")
        assert out.rstrip().endswith(": OK")

    def test_errors(self, config_path, capsys):
        config_path.write_text(UNIFORM_YAML + "cost: bregman\n")
        assert _exit_code(["validate", str(config_path)]) == EXIT_FAILED_ROWS
        assert "error: cost" in capsys.readouterr().out


class TestOracle:
    """Tests for `bregman-jko oracle`."""

    def test_writes_oracle(self, config_path, tmp_path, capsys):
        assert _exit_code(["oracle", str(config_path), "--output", str(tmp_path / "o")]) == 0
        assert capsys.readouterr().out.strip().endswith("oracle_n8.csv")
        assert (tmp_path / "o" / "oracle_n8.csv").exists()
