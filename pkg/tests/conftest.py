"""Shared fixtures: nominal parameters and session-scoped synthesis."""

import numpy as np
import pytest

from safeguard.segway import SegwayParams
from safeguard.synthesis import SynthesisSettings, build_context


@pytest.fixture(scope="session")
def params():
    return SegwayParams()


@pytest.fixture(scope="session")
def scenario_settings():
    """Synthesis settings of the shipped bias-error scenarios."""
    return SynthesisSettings(alpha_gain=20.0, error_directions="position")


@pytest.fixture(scope="session")
def scenario_synthesis(params, scenario_settings):
    return build_context(params, scenario_settings)


@pytest.fixture(scope="session")
def scenario_context(scenario_synthesis):
    return scenario_synthesis.context


@pytest.fixture(scope="session")
def default_synthesis(params):
    """Package-default synthesis (alpha 1, full-ball error directions)."""
    return build_context(params, SynthesisSettings())


@pytest.fixture(scope="session")
def default_context(default_synthesis):
    return default_synthesis.context


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
