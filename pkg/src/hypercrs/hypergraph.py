"""Dynamic multi-view hypergraph built from a conversation state."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .env import EpisodeState
from .world import Catalog, SocialGraph

LIKE, DISLIKE, SOCIAL = "like", "dislike", "social"
VIEWS = (LIKE, DISLIKE, SOCIAL)

ORACLE_MAX_NODES = 50


class Hyperedge(NamedTuple):
    view: str
    anchor: int
    members: tuple[int, ...]
    gen_index: int


@dataclass(frozen=True)
class MultiViewHypergraph:
    """Nodes are ``(kind, id)`` pairs ordered user, rejected attrs, accepted attrs, friends, items."""

    nodes: tuple[tuple[str, int], ...]
    hyperedges: tuple[Hyperedge, ...]
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray

    @cached_property
    def incidence(self) -> sp.csc_matrix:
        return sp.csc_matrix((self.vals, (self.rows, self.cols)), shape=self.shape)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.nodes), len(self.hyperedges)

    @cached_property
    def node_pos(self) -> dict[tuple[str, int], int]:
        return {n: i for i, n in enumerate(self.nodes)}

    @property
    def user(self) -> int:
        return self.nodes[0][1]

    def view_slice(self, view: str) -> list[int]:
        return [j for j, h in enumerate(self.hyperedges) if h.view == view]

    def to_json(self) -> str:
        return json.dumps({
            "nodes": [list(n) for n in self.nodes],
            "hyperedges": [
                {"view": h.view, "anchor": h.anchor, "members": list(h.members), "gen_index": h.gen_index}
                for h in self.hyperedges
            ],
            "incidence": [[int(i), int(j), float(v)] for i, j, v in zip(self.rows, self.cols, self.vals)],
        })


def build_hypergraph(state: EpisodeState, catalog: Catalog, social: SocialGraph | None = None,
                     use_social: bool = True) -> MultiViewHypergraph:
    """Hypergraph of one state.

    Like/dislike members are the items of V_{p0} carrying the anchor attribute;
    social members are the friend's accepted items still in the candidate set.
    Hyperedges keep generation order within each view.
    """
    v_p0 = catalog.attr_items[state.p0]
    friends = state.friends if use_social else ()
    nodes = [("user", state.user)]
    nodes += [("attr", p) for p in state.rejected_attrs]
    nodes += [("attr", p) for p in state.accepted_attrs]
    nodes += [("friend", f) for f in friends]
    nodes += [("item", v) for v in sorted(v_p0)]
    pos = {n: i for i, n in enumerate(nodes)}

    edges = []
    for view, anchors in ((LIKE, state.accepted_attrs), (DISLIKE, state.rejected_attrs)):
        for g, p in enumerate(anchors):
            edges.append(Hyperedge(view, p, tuple(sorted(v_p0 & catalog.attr_items[p])), g))
    for g, f in enumerate(friends):
        edges.append(Hyperedge(SOCIAL, f, tuple(sorted(state.friend_items[f])), g))

    rows, cols, vals = [], [], []
    for j, h in enumerate(edges):
        rows.append(0)
        cols.append(j)
        vals.append(-1.0 if h.view == DISLIKE else 1.0)
        rows.append(pos[("friend", h.anchor)] if h.view == SOCIAL else pos[("attr", h.anchor)])
        cols.append(j)
        vals.append(1.0)
        if h.members:
            w = 1.0 / len(h.members)
            for v in h.members:
                rows.append(pos[("item", v)])
                cols.append(j)
                vals.append(w)
    return MultiViewHypergraph(
        nodes=tuple(nodes),
        hyperedges=tuple(edges),
        rows=np.asarray(rows, dtype=np.int64),
        cols=np.asarray(cols, dtype=np.int64),
        vals=np.asarray(vals, dtype=np.float64),
    )


def incidence_oracle(graph: MultiViewHypergraph, max_nodes: int = ORACLE_MAX_NODES) -> np.ndarray:
    """Dense incidence evaluated cell by cell from the case table; for small graphs only."""
    n, m = graph.shape
    if n > max_nodes:
        raise ValueError(f"oracle refuses graphs with more than {max_nodes} nodes (got {n})")
    dense = np.zeros((n, m))
    for j, h in enumerate(graph.hyperedges):
        for i, (kind, nid) in enumerate(graph.nodes):
            if kind == "user":
                dense[i, j] = 1.0 if h.view in (LIKE, SOCIAL) else -1.0
            elif kind == "item" and nid in h.members:
                dense[i, j] = 1.0 / len(h.members)
            elif kind == "attr" and h.view in (LIKE, DISLIKE) and nid == h.anchor:
                dense[i, j] = 1.0
            elif kind == "friend" and h.view == SOCIAL and nid == h.anchor:
                dense[i, j] = 1.0
    return dense
