import numpy as np
import pytest

from rarlab.simulator import KnowledgeGraph, RuleBasedEnv, SimConfig

TOY_GRAPH = """\
concepts 3 questions 5
edge 0 1
edge 1 2
question 0 0
question 1 0
question 2 1
question 3 1
question 4 2
"""


@pytest.fixture
def toy_graph():
    return KnowledgeGraph.parse(TOY_GRAPH)


@pytest.fixture
def toy_env(toy_graph):
    return RuleBasedEnv(SimConfig(horizon=6, k_targets=1), toy_graph)


@pytest.fixture
def default_env():
    return RuleBasedEnv()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
