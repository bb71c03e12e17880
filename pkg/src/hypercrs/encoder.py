"""Hypergraph state encoder and cross-view contrastive loss.

The encoder embeds hyperedges as ``H = A^T E``, refines each view's hyperedge
sequence with its own stack of self-attention layers, and reads the state out of
the user row: ``q = sum_l leaky(A psi^l(H))[user]``.

Graphs are encoded in batches. :class:`GraphBatch` lays every hyperedge of every
graph out in one flat array, ordered view-major, then graph, then generation
order, so each view's padded sequence tensor unpads back into a contiguous block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .hypergraph import DISLIKE, LIKE, SOCIAL, VIEWS, MultiViewHypergraph
from .world import NodeIndex

VIEW_CODE = {LIKE: 0, DISLIKE: 1, SOCIAL: 2}


@dataclass
class CompiledGraph:
    """Index arrays of one hypergraph, in embedding-table coordinates."""

    n_edges: int
    view_code: np.ndarray
    gen: np.ndarray
    sign: np.ndarray
    # A^T as triplets: (local hyperedge, table row, weight)
    at_edge: np.ndarray
    at_row: np.ndarray
    at_val: np.ndarray
    # item id -> (local hyperedges, weights), i.e. the item's row of A
    item_rows: dict[int, tuple[np.ndarray, np.ndarray]]


def compile_graph(graph: MultiViewHypergraph, index: NodeIndex | None) -> CompiledGraph:
    nodes = graph.nodes
    if index is not None:
        table_row = np.array([index.row(k, i) for k, i in nodes], dtype=np.int64)
        at_row = table_row[graph.rows]
    else:
        at_row = np.zeros(0, dtype=np.int64)
    item_rows: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    is_item = np.array([k == "item" for k, _ in nodes], dtype=bool)
    sel = is_item[graph.rows] if len(graph.rows) else np.zeros(0, dtype=bool)
    if sel.any():
        r, c, v = graph.rows[sel], graph.cols[sel], graph.vals[sel]
        order = np.argsort(r, kind="stable")
        r, c, v = r[order], c[order], v[order]
        bounds = np.flatnonzero(np.diff(r)) + 1
        for rr, cc, vv in zip(np.split(r, bounds), np.split(c, bounds), np.split(v, bounds)):
            item_rows[nodes[rr[0]][1]] = (cc, vv)
    hs = graph.hyperedges
    return CompiledGraph(
        n_edges=len(hs),
        view_code=np.array([VIEW_CODE[h.view] for h in hs], dtype=np.int64),
        gen=np.array([h.gen_index for h in hs], dtype=np.int64),
        sign=np.array([-1.0 if h.view == DISLIKE else 1.0 for h in hs]),
        at_edge=graph.cols.copy(),
        at_row=at_row,
        at_val=graph.vals.copy(),
        item_rows=item_rows,
    )


def _sparse(rows, cols, vals, shape, dtype):
    idx = torch.as_tensor(np.stack([rows, cols]) if len(rows) else np.zeros((2, 0)), dtype=torch.long)
    return torch.sparse_coo_tensor(idx, torch.as_tensor(vals, dtype=dtype), shape, check_invariants=False).coalesce()


class GraphBatch:
    """Flat hyperedge layout plus the sparse operators needed to encode a batch of graphs.

    ``queries[b]`` optionally lists item ids of graph ``b`` whose refined node
    outputs are wanted (their rows of ``A``).
    """

    def __init__(self, graphs: list[CompiledGraph], n_table: int = 0, queries=None,
                 dtype=torch.float32, max_positions: int = 64):
        self.size = len(graphs)
        local_to_flat = [np.zeros(g.n_edges, dtype=np.int64) for g in graphs]
        flat_view, flat_graph, flat_sign = [], [], []
        self.gather, self.mask, self.pos = {}, {}, {}
        offset = 0
        for code, view in enumerate(VIEWS):
            per_graph = [np.flatnonzero(g.view_code == code) for g in graphs]
            lmax = max((len(p) for p in per_graph), default=0)
            gather = np.zeros((self.size, lmax), dtype=np.int64)
            mask = np.zeros((self.size, lmax), dtype=bool)
            pos = np.zeros((self.size, lmax), dtype=np.int64)
            for b, local in enumerate(per_graph):
                n = len(local)
                flat = np.arange(offset, offset + n)
                local_to_flat[b][local] = flat
                gather[b, :n] = flat
                mask[b, :n] = True
                pos[b, :n] = np.minimum(graphs[b].gen[local], max_positions - 1)
                flat_view.extend([code] * n)
                flat_graph.extend([b] * n)
                flat_sign.extend(graphs[b].sign[local])
                offset += n
            self.gather[view] = torch.as_tensor(gather)
            self.mask[view] = torch.as_tensor(mask)
            self.pos[view] = torch.as_tensor(pos)
        self.n_edges = offset
        # padding rows of ``gather`` point at the extra zero row appended in ``psi``
        for view in VIEWS:
            g = self.gather[view]
            g[~self.mask[view]] = offset
        self.view_code = torch.as_tensor(np.array(flat_view, dtype=np.int64))
        self.graph_id = torch.as_tensor(np.array(flat_graph, dtype=np.int64))
        self.dtype = dtype

        self.user_op = _sparse(np.array(flat_graph, dtype=np.int64), np.arange(offset),
                               np.array(flat_sign), (self.size, offset), dtype)
        if n_table:
            rows = np.concatenate([local_to_flat[b][g.at_edge] for b, g in enumerate(graphs)] or [np.zeros(0)])
            cols = np.concatenate([g.at_row for g in graphs] or [np.zeros(0)])
            vals = np.concatenate([g.at_val for g in graphs] or [np.zeros(0)])
            self.edge_op = _sparse(rows.astype(np.int64), cols.astype(np.int64), vals, (offset, n_table), dtype)
        else:
            self.edge_op = None

        self.query_op = None
        if queries is not None:
            qr, qc, qv = [], [], []
            n_q = 0
            for b, items in enumerate(queries):
                for v in items:
                    if v in graphs[b].item_rows:
                        cols_, vals_ = graphs[b].item_rows[v]
                        qr.extend([n_q] * len(cols_))
                        qc.extend(local_to_flat[b][cols_])
                        qv.extend(vals_)
                    n_q += 1
            self.n_queries = n_q
            self.query_op = _sparse(np.array(qr, dtype=np.int64), np.array(qc, dtype=np.int64),
                                    np.array(qv), (n_q, offset), dtype)


@dataclass
class HyperedgeEmbeddings:
    views: dict[str, torch.Tensor]
    H: torch.Tensor


def dense_incidence(graph: MultiViewHypergraph, dtype=torch.float64) -> torch.Tensor:
    return torch.as_tensor(graph.incidence.toarray(), dtype=dtype)


def base_node_pass(graph_or_A, E: torch.Tensor, slope: float = 0.2) -> torch.Tensor:
    """Plain hypergraph message passing: ``leaky(A A^T E)``."""
    A = dense_incidence(graph_or_A, E.dtype) if isinstance(graph_or_A, MultiViewHypergraph) else graph_or_A
    if A.shape[0] != E.shape[0]:
        raise ValueError(f"embedding rows {E.shape[0]} do not match {A.shape[0]} nodes")
    return F.leaky_relu(A @ (A.T @ E), slope)


def hyperedge_embed(graph: MultiViewHypergraph, E: torch.Tensor) -> HyperedgeEmbeddings:
    A = dense_incidence(graph, E.dtype)
    if A.shape[0] != E.shape[0]:
        raise ValueError(f"embedding rows {E.shape[0]} do not match {A.shape[0]} nodes")
    H = A.T @ E
    return HyperedgeEmbeddings({v: H[graph.view_slice(v)] for v in VIEWS}, H)


class ViewAttention(nn.Module):
    """Multi-head self-attention over one view's hyperedge sequence.

    ``block="transformer"`` wraps it in the usual residual + layer-norm + feed-forward
    encoder block; ``block="attention"`` returns the bare attention output.
    """

    def __init__(self, d: int, heads: int = 2, block: str = "transformer", ff_mult: int = 2):
        super().__init__()
        if d % heads:
            raise ValueError(f"model dimension {d} is not divisible by {heads} heads")
        if block not in ("transformer", "attention"):
            raise ValueError(f"unknown block type {block!r}")
        self.heads, self.block = heads, block
        self.q, self.k, self.v, self.o = (nn.Linear(d, d) for _ in range(4))
        if block == "transformer":
            self.norm1 = nn.LayerNorm(d)
            self.norm2 = nn.LayerNorm(d)
            self.ff = nn.Sequential(nn.Linear(d, ff_mult * d), nn.ReLU(), nn.Linear(ff_mult * d, d))

    def attend(self, x, mask):
        b, n, d = x.shape
        h = self.heads

        def split(t):
            return t.view(b, n, h, d // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        scores = scores.masked_fill(~mask[:, None, None, :], -1e9)
        out = torch.softmax(scores, dim=-1) @ v
        return self.o(out.transpose(1, 2).reshape(b, n, d))

    def forward(self, x, mask):
        out = self.attend(x, mask)
        if self.block == "attention":
            return out
        x = self.norm1(x + out)
        return self.norm2(x + self.ff(x))

    def make_passthrough(self):
        """Identity value/output projections; with one row per sequence the layer becomes a no-op."""
        with torch.no_grad():
            for lin in (self.q, self.k, self.v, self.o):
                lin.bias.zero_()
            self.v.weight.copy_(torch.eye(self.v.weight.shape[0]))
            self.o.weight.copy_(torch.eye(self.o.weight.shape[0]))


class HypergraphEncoder(nn.Module):
    def __init__(self, n_nodes: int, d: int = 64, n_layers: int = 2, heads: int = 2,
                 slope: float = 0.2, block: str = "transformer", max_positions: int = 64,
                 use_positions: bool = True, init_embeddings=None):
        super().__init__()
        if not 1 <= n_layers <= 4:
            raise ValueError(f"layer count must be in 1..4, got {n_layers}")
        self.d, self.n_layers, self.slope = d, n_layers, slope
        self.max_positions, self.use_positions = max_positions, use_positions
        self.embedding = nn.Embedding(n_nodes, d)
        if init_embeddings is not None:
            with torch.no_grad():
                self.embedding.weight.copy_(torch.as_tensor(np.asarray(init_embeddings)))
        self.positions = nn.ModuleDict({v: nn.Embedding(max_positions, d) for v in VIEWS})
        for emb in self.positions.values():
            nn.init.normal_(emb.weight, std=0.02)
        self.layers = nn.ModuleList(
            nn.ModuleDict({v: ViewAttention(d, heads, block) for v in VIEWS}) for _ in range(n_layers)
        )

    @property
    def dtype(self):
        return self.embedding.weight.dtype

    def batch(self, graphs: list[CompiledGraph], queries=None) -> GraphBatch:
        return GraphBatch(graphs, self.embedding.num_embeddings, queries, self.dtype, self.max_positions)

    def hyperedges(self, batch: GraphBatch) -> torch.Tensor:
        if batch.n_edges == 0:
            return self.embedding.weight.new_zeros(0, self.d)
        return torch.sparse.mm(batch.edge_op, self.embedding.weight)

    def psi(self, H: torch.Tensor, batch: GraphBatch) -> list[torch.Tensor]:
        """Per-layer refined hyperedge rows (flat layout), layers 1..L."""
        padded = torch.cat([H, H.new_zeros(1, H.shape[1])])
        outs: list[list[torch.Tensor]] = [[] for _ in range(self.n_layers)]
        for view in VIEWS:
            gather, mask = batch.gather[view], batch.mask[view]
            if gather.numel() == 0:
                continue
            x = padded[gather]
            if self.use_positions:
                x = x + self.positions[view](batch.pos[view])
            for l, layer in enumerate(self.layers):
                x = layer[view](x, mask)
                outs[l].append(x[mask])
        return [torch.cat(o) if o else H.new_zeros(0, H.shape[1]) for o in outs]

    def _readout(self, op, psi_list, rows: int) -> torch.Tensor:
        if op is None or op.shape[1] == 0:
            return self.embedding.weight.new_zeros(rows, self.d)
        return sum(F.leaky_relu(torch.sparse.mm(op, p), self.slope) for p in psi_list)

    def encode(self, batch: GraphBatch):
        """State vectors ``q`` (B x d) and, when queries were given, refined query-item rows."""
        H = self.hyperedges(batch)
        psi_list = self.psi(H, batch)
        q = self._readout(batch.user_op, psi_list, batch.size)
        refined = None
        if batch.query_op is not None:
            refined = self._readout(batch.query_op, psi_list, batch.n_queries)
        return q, refined, H

    # single-graph reference forms, E aligned with graph.nodes

    def node_embeddings(self, graph: MultiViewHypergraph, index: NodeIndex) -> torch.Tensor:
        rows = torch.as_tensor([index.row(k, i) for k, i in graph.nodes])
        return self.embedding.weight[rows]

    def hierarchical_pass(self, graph: MultiViewHypergraph, E: torch.Tensor, layer: int) -> torch.Tensor:
        if not 1 <= layer <= self.n_layers:
            raise ValueError(f"layer must be in 1..{self.n_layers}")
        A = dense_incidence(graph, E.dtype)
        batch = GraphBatch([compile_graph(graph, None)], dtype=E.dtype, max_positions=self.max_positions)
        psi_l = self.psi(A.T @ E, batch)[layer - 1]
        return F.leaky_relu(A @ psi_l, self.slope)

    def state_readout(self, graph: MultiViewHypergraph, E: torch.Tensor) -> torch.Tensor:
        return sum(self.hierarchical_pass(graph, E, l)[0] for l in range(1, self.n_layers + 1))


def contrastive_loss(H, views, tau: float = 0.1, groups=None) -> torch.Tensor:
    """Cross-view InfoNCE summed over anchor hyperedges; see :func:`contrastive_terms`."""
    same_view, correlated = contrastive_terms(H, views, tau, groups)
    return same_view + correlated


def contrastive_terms(H, views, tau: float = 0.1, groups=None) -> tuple[torch.Tensor, torch.Tensor]:
    """The two InfoNCE terms of the cross-view loss, returned separately.

    Term one: same-view hyperedges (anchor included) are positives, other views negatives.
    Term two: like and social are positives for each other, dislike is their negative;
    dislike anchors have no correlated view and contribute nothing. Anchors whose
    positive or negative set is empty are skipped. ``groups`` restricts pairs to
    hyperedges of the same graph when several graphs share one flat layout.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if isinstance(H, HyperedgeEmbeddings):
        views = torch.as_tensor([VIEW_CODE[v] for v in VIEWS for _ in range(len(H.views[v]))])
        H = torch.cat([H.views[v] for v in VIEWS])
    views = torch.as_tensor(views)
    if groups is None:
        groups = torch.zeros_like(views)
    if H.shape[0] == 0:
        return H.sum() * 0, H.sum() * 0
    hn = F.normalize(H, dim=1, eps=1e-12)
    S = hn @ hn.T / tau
    same = groups[:, None] == groups[None, :]
    vi, vj = views[:, None], views[None, :]
    like, dis, soc = VIEW_CODE[LIKE], VIEW_CODE[DISLIKE], VIEW_CODE[SOCIAL]
    pos1 = same & (vi == vj)
    neg1 = same & (vi != vj)
    pos2 = same & (((vi == like) & (vj == soc)) | ((vi == soc) & (vj == like)))
    neg2 = same & (vi != dis) & (vj == dis)
    return _infonce(S, pos1, neg1), _infonce(S, pos2, neg2)


def _infonce(S, pos, neg):
    valid = pos.any(1) & neg.any(1)
    if not bool(valid.any()):
        return S.sum() * 0
    s, p, n = S[valid], pos[valid], neg[valid]
    lse_all = torch.logsumexp(s.masked_fill(~(p | n), float("-inf")), dim=1)
    lse_pos = torch.logsumexp(s.masked_fill(~p, float("-inf")), dim=1)
    return (lse_all - lse_pos).sum()
