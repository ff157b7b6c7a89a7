import warnings

import numpy as np
import pytest

from screensim.config import build_population, default_config, validate_config
from screensim.engine import GLMOptions, PolicySpecification, run_experiment
from screensim.population import RoundConfig


@pytest.fixture(scope="session")
def small_config():
    cfg = default_config()
    cfg["population"]["n"] = 4000
    return validate_config(cfg)


@pytest.fixture(scope="session")
def small_population(small_config):
    population, human_theta = build_population(small_config, seed=11)
    return population


def run_small(population, specs=None, mode="feasible", seed=5, capacity=None,
              penalty=0.01, **kwargs):
    """Tiny experiment helper; silences refit convergence chatter."""
    if specs is None:
        specs = [PolicySpecification("sl", "sl"),
                 PolicySpecification("ucb", "ucb", alpha=1.96)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return run_experiment(
            population, specs,
            RoundConfig(round_size=population.spec.round_size, capacity=capacity),
            mode, seed=seed, glm_options=GLMOptions(penalty_grid=(penalty,)),
            **kwargs,
        )
