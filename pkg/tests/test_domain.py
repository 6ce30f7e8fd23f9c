import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rarlab.domain import (HistoricalRecord, Interaction, LearningTarget, MasterySnapshot,
                           append_interaction, learning_effect, target_from_concepts)

finite = st.floats(-1e3, 1e3, allow_nan=False)


@pytest.mark.parametrize("begin,end,sup,expected", [
    (0.3, 0.3, 1.0, 0.0),
    (0.0, 1.0, 1.0, 1.0),
    (0.2, 0.6, 1.0, 0.5),
])
def test_learning_effect_examples(begin, end, sup, expected):
    assert learning_effect(MasterySnapshot(begin, end, sup)) == pytest.approx(expected, abs=1e-15)


def test_learning_effect_can_be_negative():
    assert learning_effect(MasterySnapshot(0.5, 0.25, 1.0)) == pytest.approx(-0.5)


@pytest.mark.parametrize("sup", [0.4, 0.3])
def test_degenerate_denominator_is_an_error(sup):
    with pytest.raises(ValueError, match="degenerate"):
        learning_effect(MasterySnapshot(0.4, 0.4, sup))


def test_non_finite_mastery_rejected():
    with pytest.raises(ValueError, match="non-finite"):
        learning_effect(MasterySnapshot(0.0, float("nan"), 1.0))


@given(finite, finite, st.floats(1e-3, 1e3), st.floats(0.1, 10.0), finite)
def test_learning_effect_affine_invariant(begin, end, gap, scale, shift):
    sup = begin + gap
    base = learning_effect(MasterySnapshot(begin, end, sup))
    moved = learning_effect(MasterySnapshot(scale * begin + shift, scale * end + shift,
                                            scale * sup + shift))
    assert moved == pytest.approx(base, rel=1e-6, abs=1e-6)


@given(finite, st.floats(1e-3, 1e3), st.floats(0, 1))
def test_learning_effect_at_most_one_and_one_at_supremum(begin, gap, frac):
    sup = begin + gap
    assert learning_effect(MasterySnapshot(begin, sup, sup)) == 1.0
    assert learning_effect(MasterySnapshot(begin, begin + frac * gap, sup)) <= 1.0 + 1e-12


def test_target_from_concepts_examples():
    assert target_from_concepts({"c1"}, {"c1": {1, 2}}) == {1, 2}
    assert target_from_concepts({"c1", "c2"}, {"c1": {1, 2}, "c2": {2, 3}}) == {1, 2, 3}
    with pytest.raises(ValueError):
        target_from_concepts(set(), {"c1": {1}})


def test_target_from_unknown_concept_names_it():
    with pytest.raises(KeyError, match="c9"):
        target_from_concepts(["c9"], {"c1": {1}})


@given(st.dictionaries(st.integers(0, 6), st.frozensets(st.integers(0, 30), min_size=1),
                       min_size=1))
def test_target_from_concepts_is_order_free_union(cmap):
    keys = list(cmap)
    expected = set().union(*cmap.values())
    for perm in itertools.islice(itertools.permutations(keys), 6):
        assert target_from_concepts(perm, cmap) == expected


def test_learning_target_validation():
    with pytest.raises(ValueError):
        LearningTarget([])
    with pytest.raises(ValueError):
        LearningTarget([-1])
    t = LearningTarget([3, 1, 3])
    assert t.sorted() == [1, 3]
    np.testing.assert_array_equal(t.indicator(4), [0, 1, 0, 1])
    with pytest.raises(ValueError):
        t.indicator(3)


def test_append_interaction_examples():
    r = append_interaction(HistoricalRecord(), 3, 1)
    assert r.steps == (Interaction(3, 1),)
    r2 = append_interaction(r, 0, 0)
    assert r2.steps == (Interaction(3, 1), Interaction(0, 0))
    assert r.steps == (Interaction(3, 1),)  # original untouched
    assert r2.last_question == 0 and HistoricalRecord().last_question is None


@given(st.lists(st.tuples(st.integers(0, 49), st.integers(0, 1)), max_size=40))
def test_append_grows_by_one_and_preserves_prefix(pairs):
    r = HistoricalRecord()
    for i, (q, y) in enumerate(pairs):
        before = r
        r = append_interaction(r, q, y)
        assert len(r) == i + 1
        assert r.steps[:-1] == before.steps
    assert r.questions == [q for q, _ in pairs]
    assert r.correctness == [y for _, y in pairs]


def test_interaction_rejects_non_binary():
    with pytest.raises(ValueError):
        Interaction(0, 2)
