import numpy as np
import pytest

from archemo.forward import KineticsSpec, ParameterSet, SolverConfig
from archemo.grid import Domain


@pytest.fixture
def line129():
    return Domain(1.0, 129)


@pytest.fixture
def line65():
    return Domain(1.0, 65)


@pytest.fixture
def square33():
    return Domain((1.0, 1.0), (33, 33))


@pytest.fixture
def square65():
    return Domain((1.0, 1.0), (65, 65))


@pytest.fixture
def applied_params():
    return ParameterSet(chi=0.1, xi=0.05, r=0.5, mu=1.0,
                        alpha=1.0, beta=1.0, gamma=1.0, delta=1.0)


@pytest.fixture
def nondegenerate_params():
    # beta != delta keeps the attractant and repellent channels distinguishable
    return ParameterSet(chi=0.1, xi=0.05, r=0.5, mu=1.0,
                        alpha=1.0, beta=1.0, gamma=0.8, delta=1.6)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def make_kinetics(params, **kw):
    return KineticsSpec.from_parameters(params, **kw)


def quick_cfg(tau=0, dt=1e-3, t_final=0.3, **kw):
    return SolverConfig(tau=tau, dt=dt, t_final=t_final, **kw)
