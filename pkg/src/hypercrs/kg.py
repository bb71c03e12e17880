"""Translational (TransE-style) pretraining of node embeddings over the world knowledge graph."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .world import Catalog, NodeIndex, SocialGraph

log = logging.getLogger(__name__)

INTERACT, HAS_ATTRIBUTE, FRIEND = 0, 1, 2
RELATIONS = ("interact", "has_attribute", "friend")
FORMAT_VERSION = 1
_MAGIC = "# hypercrs-embeddings"


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


@dataclass
class EmbeddingTable:
    node_vecs: np.ndarray
    relation_vecs: np.ndarray
    seed: int = 0
    loss_history: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.node_vecs.shape[1]

    def __eq__(self, other):
        if not isinstance(other, EmbeddingTable):
            return NotImplemented
        return (
            self.seed == other.seed
            and np.array_equal(self.node_vecs, other.node_vecs)
            and np.array_equal(self.relation_vecs, other.relation_vecs)
        )


def build_triples(catalog: Catalog, social: SocialGraph, train_interactions=None) -> list[Triple]:
    """KG triples over the unified node index (users | items | attributes).

    ``train_interactions`` defaults to the full interaction history.
    """
    index = NodeIndex.from_world(catalog, social)
    if train_interactions is None:
        train_interactions = social.interactions()
    triples = []
    for u, v in sorted(train_interactions):
        if v not in catalog.items:
            raise ValueError(f"interaction references unknown item {v}")
        triples.append(Triple(index.user(u), INTERACT, index.item(v)))
    for v in catalog.sorted_items:
        for p in sorted(catalog.item_attrs[v]):
            triples.append(Triple(index.item(v), HAS_ATTRIBUTE, index.attr(p)))
    for u, f in social.edges():
        triples.append(Triple(index.user(u), FRIEND, index.user(f)))
    return triples


def margin_loss(node_vecs, relation_vecs, pos, neg, margin: float = 1.0):
    """Mean hinge loss over (positive, corrupted) triple pairs, L2 distance.

    ``pos``/``neg`` are int arrays of shape (n, 3) with columns head, relation, tail.
    Returns ``(loss, grad_nodes, grad_relations)``.
    """
    pos = np.asarray(pos)
    neg = np.asarray(neg)
    dp = node_vecs[pos[:, 0]] + relation_vecs[pos[:, 1]] - node_vecs[pos[:, 2]]
    dn = node_vecs[neg[:, 0]] + relation_vecs[neg[:, 1]] - node_vecs[neg[:, 2]]
    np_, nn_ = np.linalg.norm(dp, axis=1), np.linalg.norm(dn, axis=1)
    hinge = margin + np_ - nn_
    active = hinge > 0
    n = len(pos)
    loss = float(np.where(active, hinge, 0.0).sum() / n)

    gn = np.zeros_like(node_vecs)
    gr = np.zeros_like(relation_vecs)
    a = active[:, None] / n
    up = a * dp / np.maximum(np_, 1e-12)[:, None]
    un = a * dn / np.maximum(nn_, 1e-12)[:, None]
    np.add.at(gn, pos[:, 0], up)
    np.add.at(gn, pos[:, 2], -up)
    np.add.at(gr, pos[:, 1], up)
    np.add.at(gn, neg[:, 0], -un)
    np.add.at(gn, neg[:, 2], un)
    np.add.at(gr, neg[:, 1], -un)
    return loss, gn, gr


def corrupt(triples: np.ndarray, n_nodes: int, known: set, rng: np.random.Generator, max_tries: int = 20) -> np.ndarray:
    """One corrupted copy per triple; head or tail replaced with equal probability, true triples avoided."""
    out = triples.copy()
    for i in range(len(out)):
        h, r, t = (int(x) for x in triples[i])
        for _ in range(max_tries):
            e = int(rng.integers(n_nodes))
            cand = (e, r, t) if rng.random() < 0.5 else (h, r, e)
            if cand not in known:
                break
        out[i] = cand
    return out


def init_table(n_nodes: int, d: int, n_relations: int, rng: np.random.Generator):
    bound = 6.0 / np.sqrt(d)
    nodes = rng.uniform(-bound, bound, size=(n_nodes, d))
    rels = rng.uniform(-bound, bound, size=(n_relations, d))
    rels /= np.linalg.norm(rels, axis=1, keepdims=True)
    return nodes, rels


def pretrain(
    triples,
    d: int = 64,
    epochs: int = 100,
    margin: float = 1.0,
    seed: int = 0,
    *,
    n_nodes: int | None = None,
    lr: float = 0.01,
    batch_size: int = 256,
) -> EmbeddingTable:
    if d <= 0 or epochs < 0:
        raise ValueError(f"invalid pretraining config: d={d}, epochs={epochs}")
    triples = np.asarray([tuple(t) for t in triples], dtype=np.int64)
    if len(triples) == 0:
        raise ValueError("no triples to train on")
    if n_nodes is None:
        n_nodes = int(max(triples[:, 0].max(), triples[:, 2].max())) + 1
    rng = np.random.default_rng(seed)
    nodes, rels = init_table(n_nodes, d, len(RELATIONS), rng)
    known = {tuple(int(x) for x in t) for t in triples}
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(triples))
        total = 0.0
        for start in range(0, len(order), batch_size):
            pos = triples[order[start:start + batch_size]]
            neg = corrupt(pos, n_nodes, known, rng)
            loss, gn, gr = margin_loss(nodes, rels, pos, neg, margin)
            nodes -= lr * gn * len(pos)
            rels -= lr * gr * len(pos)
            nodes /= np.maximum(np.linalg.norm(nodes, axis=1, keepdims=True), 1e-12)
            total += loss * len(pos)
        history.append(total / len(triples))
        if epoch % 20 == 0:
            log.debug("transe epoch %d loss %.4f", epoch, history[-1])
    return EmbeddingTable(nodes, rels, seed=seed, loss_history=history)


def score(table: EmbeddingTable, h: int, r: int, t: int) -> float:
    return -float(np.linalg.norm(table.node_vecs[h] + table.relation_vecs[r] - table.node_vecs[t]))


def save_embeddings(table: EmbeddingTable, path) -> None:
    """Text checkpoint: a header block, then node rows, then relation rows."""
    path = Path(path)
    n, d = table.node_vecs.shape
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{_MAGIC}\nversion {FORMAT_VERSION}\nnodes {n}\nrelations {len(table.relation_vecs)}\n")
        fh.write(f"dim {d}\nseed {table.seed}\n")
        np.savetxt(fh, table.node_vecs, fmt="%.17g")
        np.savetxt(fh, table.relation_vecs, fmt="%.17g")


def load_embeddings(path) -> EmbeddingTable:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        if fh.readline().rstrip("\n") != _MAGIC:
            raise ValueError(f"{path} is not an embedding checkpoint")
        header = {}
        for _ in range(5):
            key, value = fh.readline().split()
            header[key] = int(value)
        if header["version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported embedding format version {header['version']}")
        data = np.loadtxt(fh, ndmin=2)
    n, r, d = header["nodes"], header["relations"], header["dim"]
    if data.shape != (n + r, d):
        raise ValueError(f"{path}: expected {(n + r, d)} matrix, found {data.shape}")
    return EmbeddingTable(data[:n].copy(), data[n:].copy(), seed=header["seed"])
