# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.
import numpy as np
import pytest

from experiments import scalar_params, switching_params
from helpers import random_params
from input_space import gen_two_symbol, gen_uniform_scaled


@pytest.fixture
def switching():
    return switching_params()


@pytest.fixture
def scalar():
    return scalar_params()


@pytest.fixture
def switching_input():
    u1 = np.array([0.25, 0.15])
    return gen_two_symbol(u1, -u1, 0.5, 3000, seed=0)


@pytest.fixture
def noisy_scalar_input():
    return gen_uniform_scaled(0.0006, 3000, seed=0)


@pytest.fixture(params=[0, 1, 2])
def random_network(request):
    return random_params(request.param, n_o=request.param % 2)
