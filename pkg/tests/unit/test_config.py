# Copyright 2023 Canonical Ltd.
# See LICENSE file for licensing details.
import logging

import pydantic
import pytest

from experiments import ExperimentConfig, Preset, RuntimeSettings


@pytest.mark.parametrize("log_level", ("debug", "info", "warning", "error", "DEBUG"))
def test_valid_log_level(monkeypatch, log_level):
    """Asserts that all valid log levels are kept."""
    # GIVEN the log level set in the environment
    monkeypatch.setenv("ECHODEX_LOG_LEVEL", log_level)
    # WHEN the runtime settings are read
    settings = RuntimeSettings()
    # THEN the level is used as given
    assert settings.validated_log_level == log_level.lower()


def test_invalid_log_level(monkeypatch, caplog):
    """Asserts that an unknown log level falls back to info with a warning."""
    # GIVEN an unknown log level in the environment
    monkeypatch.setenv("ECHODEX_LOG_LEVEL", "foo")
    settings = RuntimeSettings()
    # WHEN the effective level is requested
    with caplog.at_level(logging.WARNING):
        level = settings.validated_log_level
    # THEN a warning is logged
    assert any(
        record.levelname == "WARNING" and "log_level must be one of" in record.getMessage()
        for record in caplog.records
    )
    # AND the level defaults to info
    assert level == "info"


def test_threads_from_environment(monkeypatch):
    monkeypatch.setenv("ECHODEX_THREADS", "4")
    assert RuntimeSettings().threads == 4


def test_threads_must_be_positive(monkeypatch):
    monkeypatch.setenv("ECHODEX_THREADS", "0")
    with pytest.raises(pydantic.ValidationError):
        RuntimeSettings()


def test_defaults(monkeypatch):
    monkeypatch.delenv("ECHODEX_THREADS", raising=False)
    monkeypatch.delenv("ECHODEX_LOG_LEVEL", raising=False)
    settings = RuntimeSettings()
    assert settings.threads == 1
    assert settings.validated_log_level == "info"


@pytest.mark.parametrize("preset", [p.value for p in Preset])
def test_experiment_config_accepts_every_preset(preset):
    config = ExperimentConfig(preset=preset)
    assert config.preset == preset
    assert config.seed == 0


@pytest.mark.parametrize(
    "kwargs",
    [
        {"preset": "lorenz"},
        {"preset": "kloeden", "seed": -1},
        {"preset": "kloeden", "threads": 2},
    ],
)
def test_experiment_config_rejects(kwargs):
    with pytest.raises(pydantic.ValidationError):
        ExperimentConfig(**kwargs)
