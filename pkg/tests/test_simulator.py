import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rarlab.simulator import KnowledgeGraph, RuleBasedEnv, SimConfig, reset


def two_concept_env(per_concept, **cfg):
    lines = ["concepts 2 questions %d" % (2 * per_concept)]
    lines += [f"question {q} {q // per_concept}" for q in range(2 * per_concept)]
    graph = KnowledgeGraph.parse("\n".join(lines))
    return RuleBasedEnv(SimConfig(k_targets=2, **cfg), graph)


# knowledge graph

def test_default_graph_shape():
    g = KnowledgeGraph.default()
    assert (g.num_concepts, g.num_questions) == (10, 50)
    assert all(len(g.concept_questions[c]) == 5 for c in range(10))
    roots = [c for c in range(10) if not g.prerequisites[c]]
    assert roots  # a DAG always has a root


def test_graph_round_trip(toy_graph):
    again = KnowledgeGraph.parse(toy_graph.dumps())
    assert again.edges == toy_graph.edges
    np.testing.assert_array_equal(again.question_concept, toy_graph.question_concept)


@pytest.mark.parametrize("text,match", [
    ("concepts 2 questions 2\nedge 0 1\nedge 1 0\nquestion 0 0\nquestion 1 1", "cycle"),
    ("concepts 2 questions 1\nquestion 0 0", "without questions"),
    ("concepts 1 questions 1\nquestion 0 3", "unknown concept"),
    ("concepts 1 questions 2\nquestion 0 0", "exactly"),
    ("nodes 1\n", "header"),
    ("concepts 1 questions 1\nquestion 0 0\nbogus line", "unrecognised"),
    ("", "empty"),
])
def test_invalid_graphs_fail_at_construction(text, match):
    with pytest.raises(ValueError, match=match):
        KnowledgeGraph.parse(text)


# config

def test_config_file_parsing(tmp_path):
    path = tmp_path / "env.cfg"
    path.write_text("# comment\nhorizon = 12\ngain = 0.25\n")
    cfg = SimConfig.load(path)
    assert cfg.horizon == 12 and cfg.gain == 0.25 and cfg.k_targets == 2


@pytest.mark.parametrize("text,match", [
    ("speed = 3", "unknown"),
    ("horizon = ten", "horizon"),
    ("gain_wrong = 0.5", "gain_wrong"),
    ("horizon = 0", "horizon"),
])
def test_config_errors_name_the_key(text, match):
    with pytest.raises(ValueError, match=match):
        SimConfig.parse(text)


def test_k_targets_larger_than_graph_rejected(toy_graph):
    with pytest.raises(ValueError, match="k_targets"):
        RuleBasedEnv(SimConfig(k_targets=4), toy_graph)


# reset

def test_reset_is_deterministic(default_env):
    a, b = default_env.reset(17), default_env.reset(17)
    np.testing.assert_array_equal(a.mastery, b.mastery)
    assert a.target == b.target
    assert a.steps_taken == 0 and len(a.record) == 0
    assert reset(17).target == a.target


def test_initial_mastery_range(default_env):
    m = np.stack([default_env.reset(s).mastery for s in range(200)])
    assert m.min() >= 0.0 and m.max() <= 0.3


def test_target_collisions_match_chance(default_env):
    # two independent 2-of-10 concept draws coincide with probability 1/45
    n = 1000
    same = sum(default_env.reset(s).target == default_env.reset(s + n).target for s in range(n))
    p = 1 / math.comb(10, 2)
    assert same <= n * p + 4 * math.sqrt(n * p * (1 - p))


def test_full_target_when_k_equals_concepts(toy_graph):
    env = RuleBasedEnv(SimConfig(k_targets=3), toy_graph)
    assert env.reset(0).target == set(range(5))


# response model

def test_answer_probability_examples(default_env):
    s = default_env.reset(0)
    c = default_env.graph.question_concept[7]
    s.mastery[c] = 0.5
    assert default_env.answer_probability(s, 7) == pytest.approx(0.5, abs=1e-15)
    s.mastery[c] = 1.0
    assert default_env.answer_probability(s, 7) == pytest.approx(1 / (1 + math.exp(-5)), abs=1e-12)


@given(st.floats(0, 1), st.floats(0, 1))
def test_answer_probability_monotone(m1, m2):
    env = RuleBasedEnv()
    s = env.reset(0)
    lo, hi = sorted((m1, m2))
    s.mastery[0] = lo
    p_lo = env.answer_probability(s, 0)
    s.mastery[0] = hi
    assert p_lo <= env.answer_probability(s, 0)


# step

def test_saturated_concept_gives_zero_reward(default_env):
    s = default_env.reset(3)
    q = s.target.sorted()[0]
    c = default_env.graph.question_concept[q]
    s.mastery[c] = 1.0
    out = default_env.step(s, q)
    assert s.mastery[c] == 1.0 and out.reward == 0.0


def test_gain_rule_hand_value(toy_graph):
    env = RuleBasedEnv(SimConfig(gain=0.3, gain_wrong=0.1), toy_graph)
    s = env.reset(0)
    s.mastery[:] = [0.4, 0.0, 0.0]  # concept 0 has no prerequisites
    out = env.step(s, 0)
    expected = 0.58 if out.correctness else 0.4 + 0.1 * 0.6
    assert s.mastery[0] == pytest.approx(expected, abs=1e-15)


def test_prerequisite_gate(toy_graph):
    env = RuleBasedEnv(SimConfig(gain=0.3, gain_wrong=0.1), toy_graph)
    s = env.reset(0)
    s.mastery[:] = [0.5, 0.2, 0.0]
    out = env.step(s, 2)  # concept 1, gated by concept 0 at 0.5
    rate = 0.3 if out.correctness else 0.1
    assert s.mastery[1] == pytest.approx(0.2 + rate * 0.5 * 0.8, abs=1e-15)
    s.mastery[1] = 0.0
    env.step(s, 4)  # concept 2 gated by concept 1 at 0 -> no change
    assert s.mastery[2] == 0.0


def test_target_mastery_examples():
    env = two_concept_env(2)
    s = env.reset(0)
    assert len(s.target) == 4
    s.mastery[:] = 0.0
    assert env.target_mastery(s) == 0.0
    s.mastery[:] = 1.0
    assert env.target_mastery(s) == 4.0
    env = two_concept_env(1)
    s = env.reset(0)
    s.mastery[:] = [0.2, 0.7]
    assert env.target_mastery(s) == pytest.approx(0.9, abs=1e-15)


def test_episode_limits(toy_env):
    s = toy_env.reset(0)
    with pytest.raises(IndexError):
        toy_env.step(s, 5)
    dones = [toy_env.step(s, 0).done for _ in range(toy_env.horizon)]
    assert dones == [False] * (toy_env.horizon - 1) + [True]
    with pytest.raises(RuntimeError, match="finished"):
        toy_env.step(s, 0)
    assert len(s.record) == toy_env.horizon


def test_reward_sum_telescopes(default_env):
    rng = np.random.default_rng(0)
    for seed in range(200):
        s = default_env.reset(seed)
        total = sum(default_env.step(s, int(rng.integers(50))).reward for _ in range(30))
        assert abs(total - default_env.learning_effect(s)) < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.lists(st.integers(0, 49), min_size=1, max_size=30))
def test_mastery_stays_clamped(seed, actions):
    env = RuleBasedEnv()
    s = env.reset(seed)
    for q in actions:
        env.step(s, q)
        assert ((s.mastery >= 0) & (s.mastery <= 1)).all()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.lists(st.integers(0, 49), min_size=30, max_size=30))
def test_same_seed_and_actions_are_bitwise_equal(seed, actions):
    env = RuleBasedEnv()
    a, b = env.reset(seed), env.reset(seed)
    ra = [env.step(a, q) for q in actions]
    rb = [env.step(b, q) for q in actions]
    assert ra == rb
    assert a.mastery.tobytes() == b.mastery.tobytes()


def test_batch_stepping_matches_one_at_a_time(default_env):
    seeds = list(range(40, 56))
    rng = np.random.default_rng(5)
    plan = rng.integers(0, 50, size=(30, len(seeds)))
    batch = default_env.reset_batch(seeds)
    singles = [default_env.reset(s) for s in seeds]
    for acts in plan:
        ys, rs = default_env.step_batch(batch, acts)
        for i, s in enumerate(singles):
            out = default_env.step(s, int(acts[i]))
            assert (out.correctness, out.reward) == (ys[i], rs[i])
    for b, s in zip(batch, singles):
        assert b.mastery.tobytes() == s.mastery.tobytes()
        assert b.record == s.record
