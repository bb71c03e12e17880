import json

import numpy as np
import pytest

from hypercrs.env import AgentAction, ConversationEnv, init_state
from hypercrs.hypergraph import DISLIKE, LIKE, SOCIAL, build_hypergraph, incidence_oracle
from hypercrs.evaluation import RandomPolicy

from conftest import make_catalog, make_social, random_worlds


def expected_incidence(state, catalog, social):
    """Dense matrix written straight from the weight case table, independent of the builder."""
    v_p0 = sorted(catalog.attr_items[state.p0])
    nodes = ([("user", state.user)] + [("attr", p) for p in state.rejected_attrs]
             + [("attr", p) for p in state.accepted_attrs] + [("friend", f) for f in state.friends]
             + [("item", v) for v in v_p0])
    cols = ([(LIKE, p) for p in state.accepted_attrs] + [(DISLIKE, p) for p in state.rejected_attrs]
            + [(SOCIAL, f) for f in state.friends])
    A = np.zeros((len(nodes), len(cols)))
    for j, (view, anchor) in enumerate(cols):
        if view == SOCIAL:
            members = social.accepted_items[anchor] & state.cand_items
        else:
            members = {v for v in v_p0 if anchor in catalog.item_attrs[v]}
        for i, (kind, nid) in enumerate(nodes):
            if kind == "user":
                A[i, j] = -1.0 if view == DISLIKE else 1.0
            elif kind == "item" and nid in members:
                A[i, j] = 1.0 / len(members)
            elif (kind == "friend") == (view == SOCIAL) and kind != "item" and nid == anchor:
                A[i, j] = 1.0
    return nodes, A


def test_single_like_column():
    catalog = make_catalog({1: {0}, 2: {0}})
    social = make_social({9: set()}, {9: {1, 2}})
    g = build_hypergraph(init_state(catalog, social, 9, (1, 2), 0), catalog, social)
    dense = g.incidence.toarray()
    assert g.nodes == (("user", 9), ("attr", 0), ("item", 1), ("item", 2))
    np.testing.assert_array_equal(dense[:, 0], [1.0, 1.0, 0.5, 0.5])
    assert [h.view for h in g.hyperedges] == [LIKE]


def test_dislike_single_member_weight_one():
    catalog = make_catalog({1: {0, 1}, 2: {0}, 3: {0, 5}}, {0: 0, 1: 0, 5: 0})
    social = make_social({9: set()}, {9: {1, 2}})
    s = init_state(catalog, social, 9, (1, 2), 0)
    s.rejected_attrs = (5,)
    g = build_hypergraph(s, catalog, social)
    col = g.view_slice(DISLIKE)[0]
    d = g.incidence.toarray()[:, col]
    pos = g.node_pos
    assert d[0] == -1.0 and d[pos[("item", 3)]] == 1.0 and d[pos[("attr", 5)]] == 1.0
    assert np.count_nonzero(d) == 3


def test_empty_member_hyperedge_keeps_two_rows():
    catalog = make_catalog({1: {0}, 2: {0}, 3: {7}}, {0: 0, 7: 0})
    social = make_social({9: set()}, {9: {1, 2}})
    s = init_state(catalog, social, 9, (1, 2), 0)
    s.rejected_attrs = (7,)
    g = build_hypergraph(s, catalog, social)
    col = g.incidence.toarray()[:, g.view_slice(DISLIKE)[0]]
    assert np.count_nonzero(col) == 2


def test_turn_zero_views(small_world):
    catalog, social = small_world
    loner = make_social({u: set() for u in social.users}, social.accepted_items)
    s = ConversationEnv(catalog, loner).reset(0, np.random.default_rng(0))
    g = build_hypergraph(s, catalog, loner)
    assert len(g.view_slice(LIKE)) == 1
    assert g.view_slice(DISLIKE) == [] and g.view_slice(SOCIAL) == []


def test_oracle_empty_and_cap():
    catalog = make_catalog({1: {0}, 2: {0}})
    social = make_social({9: set()}, {9: {1, 2}})
    s = init_state(catalog, social, 9, (1, 2), 0)
    s.accepted_attrs = ()
    g = build_hypergraph(s, catalog, social)
    assert incidence_oracle(g).shape == (len(g.nodes), 0)
    with pytest.raises(ValueError):
        incidence_oracle(g, max_nodes=2)


def test_social_members_use_candidates():
    catalog = make_catalog({1: {0}, 2: {0}, 3: {0, 4}, 5: {6}}, {0: 0, 4: 0, 6: 0})
    social = make_social({9: {8}, 8: {9}}, {9: {1, 2}, 8: {2, 3, 5}})
    s = init_state(catalog, social, 9, (1, 2), 0)
    assert s.friend_items[8] == {2, 3}
    s.rejected_items = frozenset({3})
    from hypercrs.env import filter_friends, update_candidates
    update_candidates(s, catalog)
    filter_friends(s, social)
    g = build_hypergraph(s, catalog, social)
    h = g.hyperedges[g.view_slice(SOCIAL)[0]]
    assert h.members == (2,)
    assert build_hypergraph(s, catalog, social, use_social=False).view_slice(SOCIAL) == []


def states_from_rollouts(n_states, seed=0):
    worlds = list(random_worlds(20, seed=seed))
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n_states:
        catalog, social = worlds[len(out) % len(worlds)]
        env = ConversationEnv(catalog, social)
        state = env.reset(social.sorted_users[int(rng.integers(len(social.users)))], rng)
        emb = rng.normal(size=(len(social.users) + len(catalog.items) + len(catalog.attributes), 4))
        policy = RandomPolicy(catalog, social, emb)
        stop = int(rng.integers(0, 6))
        for _ in range(stop):
            if state.done:
                break
            action = policy(state, rng)
            if action is None:
                break
            state, _ = env.step(state, action)
        if not state.done:
            out.append((catalog, social, state))
    return out


def test_matches_independent_oracle():
    for catalog, social, state in states_from_rollouts(60, seed=1):
        g = build_hypergraph(state, catalog, social)
        nodes, A = expected_incidence(state, catalog, social)
        assert list(g.nodes) == nodes
        np.testing.assert_array_equal(g.incidence.toarray(), A)
        np.testing.assert_array_equal(incidence_oracle(g), A)
        assert g.shape[1] == len(state.accepted_attrs) + len(state.rejected_attrs) + len(state.friends)
        for j, h in enumerate(g.hyperedges):
            col = A[:, j]
            assert np.count_nonzero(col) == 2 + len(h.members)
            if h.members:
                items = [i for i, n in enumerate(nodes) if n[0] == "item"]
                assert col[items].sum() == pytest.approx(1.0)
        assert (A[1:] >= 0).all()


def test_gen_index_follows_event_order(small_world):
    catalog, social = small_world
    env = ConversationEnv(catalog, social)
    rng = np.random.default_rng(2)
    s = env.reset(1, rng)
    while not s.done and len(s.cand_attrs) > 0 and s.turn < 4:
        p = min(s.cand_attrs)
        s, _ = env.step(s, AgentAction.ask([p]))
    g = build_hypergraph(s, catalog, social)
    for view, anchors in ((LIKE, s.accepted_attrs), (DISLIKE, s.rejected_attrs)):
        hs = [g.hyperedges[j] for j in g.view_slice(view)]
        assert [h.anchor for h in hs] == list(anchors)
        assert [h.gen_index for h in hs] == list(range(len(hs)))


def test_debug_json(small_env):
    s = small_env.reset(0, np.random.default_rng(0))
    g = build_hypergraph(s, small_env.catalog, small_env.social)
    d = json.loads(g.to_json())
    assert len(d["incidence"]) == len(g.vals) and d["nodes"][0] == ["user", s.user]
