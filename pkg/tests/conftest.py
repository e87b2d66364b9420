import numpy as np
import pytest

from itots import config
from itots.stability import THEOREM1, analyze
from itots.synthesis import SynthesisProblem, synthesize
from itots.tsmodel import beta_bounds


def example1(a=-1.0, b=-1.0):
    return config.build_model(config.load("example1"), {"a": a, "b": b})


def example2():
    return config.build_model(config.load("example2"))


@pytest.fixture(scope="session")
def ex1():
    return example1()


@pytest.fixture(scope="session")
def ex2():
    return example2()


@pytest.fixture(scope="session")
def ex1_analysis(ex1):
    return analyze(ex1, THEOREM1, beta_bounds(ex1))


@pytest.fixture(scope="session")
def ex2_synthesis(ex2):
    return synthesize(SynthesisProblem(ex2, beta_bounds(ex2)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
