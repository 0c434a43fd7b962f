import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stvo import lie
from stvo.graph import FrameGraph, KeyframePolicy

SHAPE = (4, 5)


def filled_graph(n, dt=0.1):
    g = FrameGraph()
    for k in range(n):
        g.admit_frame(k * dt, flow_magnitude=10.0, shape=SHAPE)
    return g


def brute_force_edges(ids, r):
    return {(a, b) for ia, a in enumerate(ids) for ib, b in enumerate(ids)
            if a != b and abs(ia - ib) <= r}


def test_first_frame_admitted_at_zero():
    g = FrameGraph()
    assert g.admit_frame(0.0, shape=SHAPE) == 0
    kf = g.keyframes[0]
    assert np.allclose(kf.pose.matrix(), np.eye(4))
    np.testing.assert_array_equal(kf.inv_depth, 1.0)


def test_duplicate_frame_rejected():
    g = FrameGraph()
    g.admit_frame(0.0, shape=SHAPE)
    assert g.admit_frame(0.1, KeyframePolicy(threshold=2.4), flow_magnitude=0.0) is None
    assert len(g) == 1


def test_inverse_depth_initialised_from_previous_mean():
    g = FrameGraph()
    g.admit_frame(0.0, shape=SHAPE)
    g.keyframes[0].inv_depth = np.arange(20.0).reshape(SHAPE)
    g.admit_frame(1.0, flow_magnitude=3.0)
    np.testing.assert_array_equal(g.keyframes[1].inv_depth, 9.5)


def test_constant_velocity_extrapolation():
    g = FrameGraph()
    g.admit_frame(0.0, shape=SHAPE)
    g.admit_frame(1.0, flow_magnitude=3.0)
    step = lie.exp([0.1, 0.0, 0.02, 0.0, 0.03, 0.0])
    g.keyframes[1].pose = step
    g.admit_frame(3.0, flow_magnitude=3.0)
    expected = lie.exp(2 * lie.log(step)) * step
    np.testing.assert_allclose(g.keyframes[2].pose.matrix(), expected.matrix(), atol=1e-12)


def test_admission_replay_matches_brute_force():
    rng = np.random.default_rng(0)
    mags = rng.uniform(0, 5, size=30)
    policy = KeyframePolicy(threshold=2.4)
    g = FrameGraph()
    admitted = []
    for t, m in enumerate(mags):
        if g.admit_frame(float(t), policy, flow_magnitude=float(m), shape=SHAPE) is not None:
            admitted.append(t)
    expected = [0] + [t for t in range(1, 30) if mags[t] > 2.4]
    assert admitted == expected


def test_two_keyframes_r1():
    g = filled_graph(2)
    assert {e.key for e in g.build_edges(r=1)} == {(0, 1), (1, 0)}


def test_seven_keyframes_r2():
    g = filled_graph(7)
    keys = {e.key for e in g.build_edges(r=2)}
    for i in range(2, 5):
        assert {j for (s, j) in keys if s == i} == {i - 2, i - 1, i + 1, i + 2}
    assert keys == brute_force_edges(list(range(7)), 2)


def test_edges_preserve_state_across_rebuilds():
    g = filled_graph(3)
    g.build_edges(r=1)
    g.edges[(0, 1)].hidden = np.ones(3)
    g.admit_frame(10.0, flow_magnitude=10.0)
    g.build_edges(r=1)
    assert g.edges[(0, 1)].hidden is not None
    assert g.edges[(2, 3)].hidden is None


def test_flow_mode_picks_lowest_scores():
    g = filled_graph(5)
    score = lambda i, j: abs((i * 7) % 5 - (j * 7) % 5)
    keys = {e.key for e in g.build_edges(r=1, mode="flow", score=score)}
    for i in range(5):
        best = min((j for j in range(5) if j != i), key=lambda j: (score(i, j), j))
        assert (i, best) in keys and (best, i) in keys


def test_source_edge_sets_simple():
    g = filled_graph(2)
    g.build_edges(r=1)
    sets = g.source_edge_sets()
    assert [s.source for s in sets] == [0, 1]
    assert [[e.key for e in s.edges] for s in sets] == [[(0, 1)], [(1, 0)]]


def test_source_edge_sets_order_independent():
    g = filled_graph(6)
    g.build_edges(r=2)
    ref = [[e.key for e in s.edges] for s in g.source_edge_sets()]
    items = list(g.edges.items())
    random.Random(3).shuffle(items)
    g.edges = dict(items)
    assert [[e.key for e in s.edges] for s in g.source_edge_sets()] == ref


def test_source_edge_sets_partition_seven_frames():
    g = filled_graph(7)
    g.build_edges(r=2)
    sets = g.source_edge_sets()
    flat = [e.key for s in sets for e in s.edges]
    assert sorted(flat) == sorted(g.edges)
    assert len(flat) == len(set(flat))
    for s in sets:
        assert {e.key for e in s.edges} == {k for k in g.edges if k[0] == s.source}
        targets = [e.target for e in s.edges]
        assert targets == sorted(targets)
    assert [s.source for s in sets] == sorted(s.source for s in sets)


def test_evict_examples():
    g = filled_graph(7)
    assert g.evict_oldest(7) == []
    g.admit_frame(5.0, flow_magnitude=10.0)
    g.build_edges(r=2)
    assert g.evict_oldest(7) == [0]
    assert 0 not in g.keyframes and 0 in g.frozen
    assert all(0 not in k for k in g.edges)
    assert len(g.trajectory()) == 8


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 6), st.integers(1, 9)), min_size=1, max_size=25),
       st.integers(1, 4), st.integers(2, 8))
def test_random_admit_evict_sequences(ops, r, cap):
    g = FrameGraph()
    admitted = 0
    t = 0.0
    for mag, dt in ops:
        t += dt
        if g.admit_frame(t, KeyframePolicy(threshold=2.4), flow_magnitude=mag, shape=SHAPE) is not None:
            admitted += 1
        g.evict_oldest(cap)
        g.build_edges(r=r)
        assert len(g) <= cap
        ids = [k.index for k in g.live()]
        assert set(g.edges) == brute_force_edges(ids, r)
        sets = g.source_edge_sets()
        assert sorted(e.key for s in sets for e in s.edges) == sorted(g.edges)
    assert len(g.trajectory()) == admitted


def test_graph_is_deterministic():
    def run():
        g = FrameGraph()
        rng = np.random.default_rng(4)
        for t in range(20):
            g.admit_frame(float(t), flow_magnitude=float(rng.uniform(0, 5)), shape=SHAPE)
            g.evict_oldest(4)
            g.build_edges(r=2)
        return sorted(g.edges), [k.index for k in g.live()]
    assert run() == run()


def test_timestamps_must_increase():
    g = filled_graph(2)
    with pytest.raises(ValueError):
        g.admit_frame(0.05, flow_magnitude=10.0)
