from collections.abc import Generator
from pathlib import Path

import pytest
from prometheus_client import REGISTRY

from mflead._internal.kernel_cache import _INTERACTION_CACHE
from mflead._internal.state import _GLOBAL_STATE
from mflead.config import ExperimentConfig
from mflead.experiments import PreparedExperiment, prepare

from . import small_config


@pytest.fixture
def test1_config(tmp_path: Path) -> ExperimentConfig:
    return small_config("test1", tmp_path / "test1")


@pytest.fixture
def test2_config(tmp_path: Path) -> ExperimentConfig:
    return small_config("test2", tmp_path / "test2")


@pytest.fixture
def test1(test1_config: ExperimentConfig) -> PreparedExperiment:
    return prepare(test1_config)


@pytest.fixture
def test2(test2_config: ExperimentConfig) -> PreparedExperiment:
    return prepare(test2_config)


@pytest.fixture(autouse=True)
def clear_interaction_cache() -> Generator:
    """Interaction matrices are cached per grid; start every test from an empty cache."""
    _INTERACTION_CACHE.clear()
    yield
    _INTERACTION_CACHE.clear()


@pytest.fixture()
def reset_prometheus_registry() -> Generator:
    """
    Clears the prometheus registry before each test.

    This is necessary because the registry is a global singleton, and we don't want to have metrics from previous tests
    affecting the results of the current test.
    """
    collectors = tuple(REGISTRY._collector_to_names.keys())
    for collector in collectors:
        try:
            collector._metrics.clear()  # type: ignore[attr-defined]
            collector._metric_init()  # type: ignore[attr-defined]
        except AttributeError:
            # For built-in collectors
            pass
    yield


@pytest.fixture()
def reset_global_state() -> Generator:
    """
    Saves and restores global mflead state around a test.

    Use this fixture when testing code that modifies _GLOBAL_STATE (e.g., custom logger, metrics prefix)
    to prevent state leakage between tests.
    """
    original_logger = _GLOBAL_STATE.logger
    original_prefix = _GLOBAL_STATE.metrics_prefix
    yield
    _GLOBAL_STATE.logger = original_logger
    _GLOBAL_STATE.metrics_prefix = original_prefix
