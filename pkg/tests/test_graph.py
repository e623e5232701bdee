import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import adjacency_oracle, last_interaction_oracle, neighbors_oracle
from tiglab.graph import (DEFAULT_FEATURE_DIM, EventTable, GraphDataError, InteractionEvent, LastInteractionTracker,
                          SplitConfigError, build_graph, chronological_split, load_graph, load_jodie_csv,
                          mask_inductive_nodes, recent_neighbors, transductive_mask, write_jodie_csv)


def _write(tmp_path, text, name="data.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_three_lines_matches_hand_parse(tmp_path):
    p = _write(tmp_path, "user_id,item_id,timestamp,state_label,f\n"
                         "0,0,0.0,0,0.5,1.5\n"
                         "1,1,2.5,1,-1.0,0.0\n"
                         "0,1,4.0,0,2.0,3.25\n")
    events, n_users, n_items, d_e = load_jodie_csv(p)
    assert (n_users, n_items, d_e) == (2, 2, 2)
    hand = [(0, 2, 0.0, 0, [0.5, 1.5]), (1, 3, 2.5, 1, [-1.0, 0.0]), (0, 3, 4.0, 0, [2.0, 3.25])]
    for ev, (u, i, ts, lab, f) in zip(events, hand):
        assert (ev.src, ev.dst, ev.t, ev.state_label) == (u, i, ts, lab)
        assert ev.edge_feat.tolist() == f


def test_header_only_is_empty_stream(tmp_path):
    p = _write(tmp_path, "user_id,item_id,timestamp,state_label,f\n")
    with pytest.raises(GraphDataError, match="empty stream"):
        load_jodie_csv(p)


def test_malformed_lines_report_line_number(tmp_path):
    p = _write(tmp_path, "h\n0,0,1.0,0,0.1\n0,x,2.0,0,0.1\n")
    with pytest.raises(GraphDataError, match="line 3"):
        load_jodie_csv(p)
    p = _write(tmp_path, "h\n0,0,1.0,0,0.1\n0,1,2.0,0,0.1,0.2\n", "b.csv")
    with pytest.raises(GraphDataError, match="line 3: feature dimension"):
        load_jodie_csv(p)


def test_write_then_load_round_trips_bit_identically(tmp_path):
    rng = np.random.default_rng(0)
    n = 50
    src = rng.integers(0, 5, n)
    dst = rng.integers(5, 9, n)
    t = np.sort(rng.random(n) * 1e6)
    feats = rng.normal(size=(n, 3)).astype(np.float32)
    g = build_graph(EventTable(src, dst, t, feats, rng.integers(0, 2, n)), n_users=5, n_nodes=9)
    path = tmp_path / "rt.csv"
    write_jodie_csv(path, g)
    g2 = load_graph(path)
    assert np.array_equal(g.src, g2.src) and np.array_equal(g.dst, g2.dst)
    assert g.t.tobytes() == g2.t.tobytes()
    assert g.edge_feats.tobytes() == g2.edge_feats.tobytes()
    assert np.array_equal(g.labels, g2.labels)


def test_build_graph_stable_sort_and_zero_feature_fallback():
    events = [InteractionEvent(0, 2, 3.0, np.zeros(0)), InteractionEvent(1, 2, 1.0, np.zeros(0)),
              InteractionEvent(0, 3, 1.0, np.zeros(0))]
    g = build_graph(events)
    # equal timestamps keep their input order
    assert g.src.tolist() == [1, 0, 0] and g.dst.tolist() == [2, 3, 2]
    assert g.n_nodes == 4
    assert g.edge_feats.shape == (3, DEFAULT_FEATURE_DIM) and not g.edge_feats.any()
    assert g.node_feats.shape == (4, DEFAULT_FEATURE_DIM) and not g.node_feats.any()


def test_sorted_input_preserved(toy_graph, toy_events):
    assert np.array_equal(toy_graph.src, toy_events.src)
    assert np.array_equal(toy_graph.t, toy_events.t)


def test_negative_timestamp_rejected():
    with pytest.raises(GraphDataError, match="negative timestamp"):
        build_graph([InteractionEvent(0, 1, -1.0, np.zeros(2))])


def test_neighbor_lists_match_brute_force_adjacency(toy_graph):
    g = toy_graph
    for v in range(g.n_nodes):
        assert g.neighbor_index.node_list(v) == adjacency_oracle(g.src, g.dst, g.t, v)
    # every event sits in exactly two lists
    counts = np.zeros(g.n_events, dtype=int)
    for v in range(g.n_nodes):
        for _, e, _ in g.neighbor_index.node_list(v):
            counts[e] += 1
    assert (counts == 2).all()


def test_recent_neighbors_examples(toy_graph):
    idx = toy_graph.neighbor_index
    assert recent_neighbors(idx, 4, 5.0, 10) == []
    # node 0 has events at t=1 and t=3 before t=4: newest first
    assert recent_neighbors(idx, 0, 4.0, 10) == [(3, 2, 3.0), (2, 0, 1.0)]
    # strict bound: the event at t=3 is not visible at t=3
    assert recent_neighbors(idx, 3, 3.0, 10) == [(1, 1, 2.0)]
    # tie at t=3 for node 3? events 2 (0-3) at t=3 only; node 2 has 0 and 3 at t=1, t=3
    assert recent_neighbors(idx, 2, 10.0, 1) == [(1, 3, 3.0)]


def test_fifteen_events_truncated_to_ten():
    n = 15
    g = build_graph(EventTable(np.zeros(n, int), np.arange(1, n + 1), np.arange(n, dtype=float),
                               np.zeros((n, 1))))
    got = recent_neighbors(g.neighbor_index, 0, 100.0, 10)
    assert got == neighbors_oracle(g.src, g.dst, g.t, 0, 100.0, 10)
    assert [e for _, e, _ in got] == list(range(14, 4, -1))


def test_tied_timestamps_prefer_higher_event_index():
    g = build_graph(EventTable(np.zeros(3, int), np.array([1, 2, 3]), np.array([1.0, 1.0, 1.0]), np.zeros((3, 1))))
    assert [e for _, e, _ in recent_neighbors(g.neighbor_index, 0, 2.0, 2)] == [2, 1]


@st.composite
def _streams(draw):
    n = draw(st.integers(1, 40))
    n_nodes = draw(st.integers(2, 8))
    src = draw(st.lists(st.integers(0, n_nodes - 1), min_size=n, max_size=n))
    # interaction streams have no self-loops; a self-loop would sit twice in one list
    off = draw(st.lists(st.integers(1, n_nodes - 1), min_size=n, max_size=n))
    dst = [(a + o) % n_nodes for a, o in zip(src, off)]
    t = sorted(draw(st.lists(st.integers(0, 10), min_size=n, max_size=n)))
    return np.array(src), np.array(dst), np.array(t, dtype=float), n_nodes


@settings(max_examples=60, deadline=None)
@given(_streams(), st.integers(0, 12), st.integers(1, 6))
def test_query_equals_brute_force(stream, qt, k):
    src, dst, t, n_nodes = stream
    g = build_graph(EventTable(src, dst, t, np.zeros((len(src), 1))), n_nodes=n_nodes)
    for v in range(n_nodes):
        got = recent_neighbors(g.neighbor_index, v, float(qt), k)
        assert got == neighbors_oracle(g.src, g.dst, g.t, v, float(qt), k)
        assert all(ts < qt for _, _, ts in got)


@settings(max_examples=40, deadline=None)
@given(_streams(), st.data())
def test_tracker_replay_equals_brute_force(stream, data):
    src, dst, t, n_nodes = stream
    g = build_graph(EventTable(src, dst, t, np.zeros((len(src), 1))), n_nodes=n_nodes)
    prefix = data.draw(st.integers(0, g.n_events))
    tr = LastInteractionTracker(n_nodes).replay(g, np.arange(prefix))
    assert np.array_equal(tr.get(np.arange(n_nodes)), last_interaction_oracle(g.src, g.dst, g.t, prefix, n_nodes))


def test_tracker_is_monotone(toy_graph):
    tr = LastInteractionTracker(toy_graph.n_nodes)
    prev = tr.get(np.arange(toy_graph.n_nodes))
    for e in range(toy_graph.n_events):
        tr.replay(toy_graph, [e])
        cur = tr.get(np.arange(toy_graph.n_nodes))
        assert (cur >= prev).all()
        prev = cur


def test_split_examples():
    assert chronological_split(100, (0.5, 0.2, 0.15, 0.15)).boundaries == (50, 70, 85, 100)
    assert chronological_split(100, (0.7, 0.0, 0.15, 0.15), allow_empty_prompt=True).boundaries == (70, 70, 85, 100)
    with pytest.raises(SplitConfigError):
        chronological_split(100, (0.7, 0.0, 0.15, 0.15))
    with pytest.raises(SplitConfigError):
        chronological_split(100, (0.5, 0.2, 0.2, 0.2))
    with pytest.raises(SplitConfigError, match="empty"):
        chronological_split(3, (0.5, 0.2, 0.15, 0.15))


def test_wikipedia_sized_split_arithmetic():
    n = 157_474
    fr = (0.5, 0.2, 0.15, 0.15)
    sizes = chronological_split(n, fr).stage_sizes()
    assert sum(sizes) == n
    assert all(abs(s - f * n) <= 1 for s, f in zip(sizes, fr))


@settings(max_examples=100, deadline=None)
@given(st.integers(20, 5000), st.lists(st.floats(0.05, 1.0), min_size=4, max_size=4))
def test_split_partitions_events(n, raw):
    fr = np.array(raw) / np.sum(raw)
    fr[-1] = 1.0 - fr[:3].sum()
    try:
        spec = chronological_split(n, fr)
    except SplitConfigError:
        return
    ranges = [spec.stage(s) for s in ("pretrain", "prompt", "val", "test")]
    assert [i for r in ranges for i in r] == list(range(n))
    assert list(spec.boundaries) == sorted(spec.boundaries)


def test_split_is_time_monotone(drift_graph, drift_split):
    t = drift_graph.t
    stages = [drift_split.stage(s) for s in ("pretrain", "prompt", "val", "test")]
    for a, b in zip(stages, stages[1:]):
        assert t[a.stop - 1] <= t[b.start]


def test_mask_toy_node_matches_brute_force_filter():
    # node 3 appears in the test stage and in training events
    src = np.array([0, 1, 0, 1, 2, 0, 1, 2, 0, 1])
    dst = np.array([3, 4, 4, 3, 4, 4, 3, 4, 4, 3])
    g = build_graph(EventTable(src, dst, np.arange(10.0), np.zeros((10, 1))))
    split = chronological_split(g, (0.5, 0.2, 0.15, 0.15))
    for seed in range(50):
        spec = mask_inductive_nodes(g, split, node_fraction=0.34, seed=seed)
        if spec.unseen_nodes == {3}:
            break
    else:
        pytest.fail("no seed masked node 3 alone")
    train = [e for e in range(split.val_start) if spec.train_mask[e]]
    assert train == [e for e in range(split.val_start) if 3 not in (src[e], dst[e])]
    assert np.flatnonzero(spec.eval_mask).tolist() == [e for e in range(split.val_start, 10) if 3 in (src[e], dst[e])]


def test_mask_is_seeded_and_respects_invariants(drift_graph, drift_split):
    a = mask_inductive_nodes(drift_graph, drift_split, 0.1, seed=4)
    b = mask_inductive_nodes(drift_graph, drift_split, 0.1, seed=4)
    assert a.unseen_nodes == b.unseen_nodes and len(a.unseen_nodes) > 0
    unseen = np.array(sorted(a.unseen_nodes))
    touches = np.isin(drift_graph.src, unseen) | np.isin(drift_graph.dst, unseen)
    pre = np.arange(drift_split.boundaries[0])
    assert not (touches[pre] & a.train_mask[pre]).any()
    assert touches[a.eval_mask].all()
    later = np.arange(drift_split.val_start, drift_graph.n_events)
    assert set(unseen) <= set(drift_graph.src[later]) | set(drift_graph.dst[later])


def test_mask_fraction_limit_gives_empty_eval(drift_graph, drift_split):
    spec = mask_inductive_nodes(drift_graph, drift_split, 1e-6, seed=0)
    assert not spec.eval_mask.any()
    with pytest.raises(SplitConfigError):
        mask_inductive_nodes(drift_graph, drift_split, 0.0)


def test_mask_that_empties_training_is_an_error():
    g = build_graph(EventTable(np.zeros(20, int), np.ones(20, int), np.arange(20.0), np.zeros((20, 1))))
    split = chronological_split(g, (0.5, 0.2, 0.15, 0.15))
    with pytest.raises(SplitConfigError, match="removed every"):
        mask_inductive_nodes(g, split, 0.5, seed=0)


def test_transductive_mask_brute_force(drift_graph, drift_split):
    m = transductive_mask(drift_graph, drift_split)
    pre = range(drift_split.boundaries[0])
    seen = {int(drift_graph.src[e]) for e in pre} | {int(drift_graph.dst[e]) for e in pre}
    expect = [drift_graph.src[e] in seen and drift_graph.dst[e] in seen for e in range(drift_graph.n_events)]
    assert m.tolist() == expect
