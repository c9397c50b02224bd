import numpy as np
import pytest
from loguru import logger

from core.instances import DemandConfig, Instance, ProblemKind, gen_uniform
from core.model import HyperParams

TINY_HP = dict(d_h=8, L=2, heads=2, r_f=2, r_c=2, d_ff=16)


@pytest.fixture(autouse=True)
def _quiet_logs():
    logger.remove()
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def unit_square():
    return Instance(ProblemKind.TSP, [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]], name="square")


@pytest.fixture
def tsp10():
    return gen_uniform(ProblemKind.TSP, 10, 7)


@pytest.fixture
def tsp12():
    return gen_uniform(ProblemKind.TSP, 12, 11)


@pytest.fixture
def cvrp20():
    return gen_uniform(ProblemKind.CVRP, 20, 5, DemandConfig())


@pytest.fixture
def tiny_hp():
    return HyperParams(**TINY_HP)


@pytest.fixture
def tiny_cvrp_hp():
    return HyperParams(input_dim=6, **TINY_HP)
