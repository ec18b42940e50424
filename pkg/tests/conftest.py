import hypothesis
import numpy as np
import pytest

hypothesis.settings.register_profile(
    "sim", max_examples=25, deadline=None,
    suppress_health_check=[hypothesis.HealthCheck.too_slow])
hypothesis.settings.load_profile("sim")


@pytest.fixture(scope="session")
def small_trees():
    """A bag of modest simulated trees shared across genealogy tests."""
    from bbmlab.branching import SimConfig, simulate_tree
    return [simulate_tree(SimConfig(horizon=5.0, seed=s)) for s in range(12)]
