import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from padiff.diffwalk import (
    RelativeState,
    SupportTooLarge,
    collision_count,
    enumerate_support,
    origin,
    support_array,
    support_count,
    transitions,
)
from padiff.kernels import StepDistribution, drift, load_kernel, srw
from oracles import brute_support


def test_collision_counts_examples():
    for m in range(2, 7):
        assert collision_count(origin(m, 3)) == m * (m - 1) // 2
    assert collision_count(RelativeState(3, ((1, 0), (1, 0)))) == 1
    assert collision_count(RelativeState(3, ((1, 0), (0, 1)))) == 0


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 5), st.integers(1, 3), st.data())
def test_collision_count_matches_pairs(m, d, data):
    coords = data.draw(st.lists(st.tuples(*[st.integers(-1, 1)] * d), min_size=m - 1, max_size=m - 1))
    s = RelativeState(m, tuple(coords))
    pairs = s.pairwise()
    assert len(pairs) == m * (m - 1) // 2
    assert collision_count(s) == sum(1 for v in pairs.values() if not any(v))


def test_state_validation():
    with pytest.raises(ValueError):
        RelativeState(1, ())
    with pytest.raises(ValueError):
        RelativeState(3, ((0,),))
    with pytest.raises(ValueError):
        RelativeState(3, ((0,), (0, 1)))


def test_m2_transitions_are_symmetrized_walk():
    law = transitions(origin(2, 1), srw(1)).as_dict()
    assert law == pytest.approx({((1,),): 0.5, ((-1,),): 0.5})
    law = transitions(origin(2, 1), drift(0.7)).as_dict()
    assert law == pytest.approx({((1,),): 0.5, ((-1,),): 0.5})


def test_m3_transitions_by_hand():
    s = RelativeState(3, ((1,), (0,)))
    law = transitions(s, srw(1)).as_dict()
    # walker 1 moves y1, walker 2 moves y2, walker 3 moves both the other way
    expect = {
        ((2,), (0,)): 1 / 6,
        ((0,), (0,)): 1 / 6,
        ((1,), (1,)): 1 / 6,
        ((1,), (-1,)): 1 / 6,
        ((0,), (-1,)): 1 / 6,
        ((2,), (1,)): 1 / 6,
    }
    assert law == pytest.approx(expect)


kernels = [srw(1), srw(2), drift(0.7), load_kernel("srw3")]


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 4), st.sampled_from(kernels), st.data())
def test_transitions_conserve_mass(m, a, data):
    coords = data.draw(st.lists(st.tuples(*[st.integers(-2, 2)] * a.dim), min_size=m - 1, max_size=m - 1))
    tl = transitions(RelativeState(m, tuple(coords)), a)
    assert tl.total == pytest.approx(1.0, abs=1e-12)
    states = [s for s, _ in tl.entries]
    assert len(set(states)) == len(states)
    assert all(p > 0 for _, p in tl.entries)


@pytest.mark.parametrize("m,a", [(2, srw(1)), (3, srw(1)), (3, srw(2)), (4, srw(1))])
def test_transition_matrix_symmetric_on_box(m, a):
    L = 2
    box = list(itertools.product(itertools.product(range(-L, L + 1), repeat=a.dim), repeat=m - 1))
    P = {}
    for c in box:
        for s, p in transitions(RelativeState(m, c), a).entries:
            P[(c, s.coords)] = p
    for (x, y), p in P.items():
        if y in set(box):
            assert P.get((y, x), 0.0) == pytest.approx(p, abs=1e-14)


def test_support_examples():
    for L in range(4):
        assert [s.coords for s in enumerate_support(2, L, 2)] == [((0, 0),)]
    assert support_count(3, 1, 1) == 7
    assert support_count(3, 0, 3) == 1


@pytest.mark.parametrize("m,L,d", [(3, 1, 1), (3, 2, 1), (3, 1, 2), (4, 1, 1), (4, 1, 2), (5, 1, 1), (3, 2, 2)])
def test_support_matches_brute_force(m, L, d):
    got = [s.coords for s in enumerate_support(m, L, d)]
    assert got == brute_support(m, L, d)


@pytest.mark.parametrize("m,d", [(3, 1), (3, 2), (4, 1)])
def test_support_nested(m, d):
    prev = None
    for L in range(0, 4):
        cur = {s.coords for s in enumerate_support(m, L, d)}
        if prev is not None:
            assert prev <= cur
        prev = cur


def test_support_cap():
    with pytest.raises(SupportTooLarge) as e:
        support_array(4, 10, 3, cap=1000)
    assert e.value.estimate > 1000
