import numpy as np
import pytest

import duallab as dl

# Desk-scale fixtures are session-scoped: the big ensembles are shared by the
# module tests and the acceptance suite.

BASE_SEED = 20240521


@pytest.fixture(scope="session")
def log_pair():
    return dl.make_log_utility()


@pytest.fixture(scope="session")
def quad_penalty():
    return dl.make_quadratic_penalty()


@pytest.fixture(scope="session")
def base_model():
    return dl.MarketModel(drift=0.05, vol=0.2, horizon=1.0)


@pytest.fixture(scope="session")
def jump_model():
    return dl.MarketModel(
        drift=0.1, vol=0.2, jump_marks=(0.1,), jump_intensities=(1.0,), horizon=1.0
    )


@pytest.fixture(scope="session")
def grid100():
    return dl.TimeGrid(100, 1.0)


@pytest.fixture(scope="session")
def base_ens_50k(base_model, grid100):
    ens = dl.simulate_drivers(base_model, grid100, 50_000, seed=BASE_SEED)
    dl.price_paths(base_model, ens)
    return ens


@pytest.fixture(scope="session")
def jump_ens_50k(jump_model, grid100):
    ens = dl.simulate_drivers(jump_model, grid100, 50_000, seed=BASE_SEED + 1)
    dl.price_paths(jump_model, ens)
    return ens


@pytest.fixture(scope="session")
def base_ens_5k(base_model, grid100):
    ens = dl.simulate_drivers(base_model, grid100, 5_000, seed=BASE_SEED + 2)
    dl.price_paths(base_model, ens)
    return ens


def make_ensemble(model, n_steps=100, n_paths=5_000, seed=BASE_SEED, horizon=None):
    grid = dl.TimeGrid(n_steps, horizon if horizon is not None else model.horizon)
    ens = dl.simulate_drivers(model, grid, n_paths, seed)
    dl.price_paths(model, ens)
    return ens
