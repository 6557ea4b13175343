"""Interaction-augmented knowledge graph with user-oriented layers.

Node ids are dense: KG entities (aligned items included) occupy
``[0, n_entities)`` and users ``[n_entities, n_nodes)``. Relation ids are
``[0, R)`` for KG relations, ``R`` for the interaction relation, and
``R + 1 + r`` for the inverse of relation ``r``.
"""
from dataclasses import dataclass, field

import numpy as np

from . import kernels

UNREACHABLE = -1

PLAIN_ENTITY = 0
ITEM_ENTITY = 1
USER = 2

INTERACT = "interact"
INVERSE_SUFFIX = "_inv"


class StructuralError(ValueError):
    pass


class Vocab:
    """Dense ids for nodes and relations.

    ``entities`` and ``users`` are lists of names; ``items`` is the subset of
    entity names that are aligned to an interaction item.
    """

    def __init__(self, entities, relations, users=(), items=()):
        entities = list(entities)
        users = list(users)
        overlap = set(entities) & set(users)
        if overlap:
            raise StructuralError(f"names used as both user and entity: {sorted(overlap)[:5]}")
        if len(set(entities)) != len(entities) or len(set(users)) != len(users):
            raise StructuralError("duplicate node names")
        relations = list(relations)
        if len(set(relations)) != len(relations):
            raise StructuralError("duplicate relation names")
        if INTERACT in relations or any(r.endswith(INVERSE_SUFFIX) for r in relations):
            raise StructuralError(f"relation names may not be {INTERACT!r} or end in {INVERSE_SUFFIX!r}")
        self.node_names = entities + users
        self.n_entities = len(entities)
        self.n_users = len(users)
        self.node_index = {n: i for i, n in enumerate(self.node_names)}
        self.node_kind = np.full(len(self.node_names), PLAIN_ENTITY, dtype=np.int8)
        self.node_kind[self.n_entities:] = USER
        for it in items:
            if it not in self.node_index or self.node_index[it] >= self.n_entities:
                raise StructuralError(f"aligned item {it!r} is not a KG entity")
            self.node_kind[self.node_index[it]] = ITEM_ENTITY
        self.base_relations = relations
        names = relations + [INTERACT]
        self.relation_names = names + [n + INVERSE_SUFFIX for n in names]
        self.relation_index = {n: i for i, n in enumerate(self.relation_names)}

    @property
    def n_nodes(self):
        return len(self.node_names)

    @property
    def n_base(self):
        return len(self.base_relations)

    @property
    def interact_id(self):
        return self.n_base

    @property
    def n_relations(self):
        return len(self.relation_names)

    def inverse(self, rid):
        half = self.n_base + 1
        if np.ndim(rid):
            rid = np.asarray(rid)
            return np.where(rid < half, rid + half, rid - half)
        rid = int(rid)
        return rid + half if rid < half else rid - half

    def is_user(self, nid):
        return self.node_kind[nid] == USER

    def users(self):
        return np.arange(self.n_entities, self.n_nodes, dtype=np.int64)

    def node(self, name):
        return self.node_index[name]

    def relation(self, name):
        return self.relation_index[name]

    def signature(self):
        return (tuple(self.node_names), tuple(self.relation_names), tuple(self.node_kind.tolist()))

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.signature() == other.signature()


def _unique_rows(arr):
    arr = np.asarray(arr, dtype=np.int64).reshape(-1, 3)
    if len(arr) == 0:
        return arr
    return np.unique(arr, axis=0)


class TripleStore:
    """KG triples and (user, interact, item) triples as deduplicated (n, 3) id arrays."""

    def __init__(self, vocab, kg_triples, ui_triples=()):
        self.vocab = vocab
        self.kg = _unique_rows(kg_triples)
        self.ui = _unique_rows(ui_triples)
        self._validate()

    def _validate(self):
        v = self.vocab
        for arr, label in ((self.kg, "kg"), (self.ui, "ui")):
            if len(arr) and (arr[:, [0, 2]].min() < 0 or arr[:, [0, 2]].max() >= v.n_nodes):
                raise StructuralError(f"{label} triple references unknown node")
        if len(self.kg):
            if self.kg[:, 1].min() < 0 or self.kg[:, 1].max() >= v.n_base:
                raise StructuralError("kg triple references unknown relation")
            if np.any(v.node_kind[self.kg[:, [0, 2]]] == USER):
                raise StructuralError("kg triple touches a user node")
        if len(self.ui):
            if np.any(self.ui[:, 1] != v.interact_id):
                raise StructuralError("interaction triples must use the interaction relation")
            if np.any(v.node_kind[self.ui[:, 0]] != USER):
                raise StructuralError("interaction head is not a user")
            if np.any(v.node_kind[self.ui[:, 2]] != ITEM_ENTITY):
                raise StructuralError("interaction tail is not an aligned item")


def _csr(keys, n):
    order = np.argsort(keys, kind="stable")
    counts = np.bincount(keys, minlength=n)
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    return ptr, order.astype(np.int64)


@dataclass
class LayeredGraph:
    vocab: Vocab
    depth: np.ndarray
    heads: np.ndarray
    rels: np.ndarray
    tails: np.ndarray
    fwd_ptr: np.ndarray
    fwd_edges: np.ndarray
    bwd_ptr: np.ndarray
    bwd_edges: np.ndarray
    n_nodes: int = field(init=False)

    def __post_init__(self):
        self.n_nodes = len(self.depth)

    @property
    def max_depth(self):
        return int(self.depth.max()) if self.n_nodes else 0

    def forward_edge_ids(self, n):
        return self.fwd_edges[self.fwd_ptr[n]:self.fwd_ptr[n + 1]]

    def backward_edge_ids(self, n):
        return self.bwd_edges[self.bwd_ptr[n]:self.bwd_ptr[n + 1]]

    def _triples(self, ids):
        return [(int(self.heads[e]), int(self.rels[e]), int(self.tails[e])) for e in ids]

    def forward_adj(self, n):
        return self._triples(self.forward_edge_ids(n))

    def backward_adj(self, n):
        return self._triples(self.backward_edge_ids(n))

    def same_as(self, other):
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("depth", "heads", "rels", "tails", "fwd_ptr", "fwd_edges", "bwd_ptr", "bwd_edges")
        )


def build_graph(vocab, store, add_inverses=True):
    """Layer the union of KG and interaction triples by BFS depth from the users."""
    parts = [a for a in (store.kg, store.ui) if len(a)]
    triples = np.concatenate(parts) if parts else np.zeros((0, 3), dtype=np.int64)
    if add_inverses and len(triples):
        inv = np.stack([triples[:, 2], vocab.inverse(triples[:, 1]), triples[:, 0]], axis=1)
        triples = np.concatenate([triples, inv])
    triples = _unique_rows(triples)
    n = vocab.n_nodes
    h, r, t = (triples[:, i].copy() for i in range(3))

    und_src = np.concatenate([h, t])
    und_dst = np.concatenate([t, h])
    ptr, order = _csr(und_src, n)
    depth = kernels.bfs_depths(n, ptr, und_dst[order], vocab.users())

    dh, dt = depth[h], depth[t]
    reach = (dh >= 0) & (dt >= 0)
    fwd = np.flatnonzero(reach & (dt == dh + 1))
    bwd = np.flatnonzero(reach & (dt == dh - 1))
    fptr, forder = _csr(h[fwd], n)
    bptr, border = _csr(h[bwd], n)
    return LayeredGraph(
        vocab=vocab, depth=depth, heads=h, rels=r, tails=t,
        fwd_ptr=fptr, fwd_edges=fwd[forder], bwd_ptr=bptr, bwd_edges=bwd[border],
    )


def _expand(ptr, edges, tails, seeds, n):
    """Closure of ``seeds`` under the edge relation given in CSR form."""
    mask = np.zeros(n, dtype=bool)
    frontier = np.unique(np.asarray(seeds, dtype=np.int64))
    mask[frontier] = True
    while frontier.size:
        chunks = [edges[ptr[v]:ptr[v + 1]] for v in frontier]
        if not chunks:
            break
        eids = np.concatenate(chunks)
        nxt = np.unique(tails[eids])
        nxt = nxt[~mask[nxt]]
        mask[nxt] = True
        frontier = nxt
    return mask


def activated_users(g, heads):
    """Users reachable from any head by following backward triples."""
    heads = np.asarray(sorted(set(int(x) for x in heads)), dtype=np.int64)
    heads = heads[g.depth[heads] != UNREACHABLE] if heads.size else heads
    mask = _expand(g.bwd_ptr, g.bwd_edges, g.tails, heads, g.n_nodes)
    users = np.flatnonzero(mask & (g.vocab.node_kind == USER))
    return set(int(u) for u in users)


def canonical_order(g, nodes):
    nodes = np.asarray(nodes, dtype=np.int64)
    return nodes[np.lexsort((nodes, g.depth[nodes]))]


@dataclass
class Subgraph:
    """Nodes and edges needed to compute preference vectors for a set of heads.

    ``nodes`` covers everything stage 1 touches (backward tree plus its
    forward closure); ``backward_nodes`` is the tree spanned from the heads
    down to the activated users. Both are in (layer, id) order.
    """

    heads: np.ndarray
    nodes: np.ndarray
    backward_nodes: np.ndarray
    forward_edges: np.ndarray
    backward_edges: np.ndarray

    @property
    def edges(self):
        return self.backward_edges


def extract_batch_subgraph(g, heads):
    heads = np.asarray(sorted(set(int(x) for x in heads)), dtype=np.int64)
    reach = heads[g.depth[heads] != UNREACHABLE] if heads.size else heads
    bmask = _expand(g.bwd_ptr, g.bwd_edges, g.tails, reach, g.n_nodes)
    bnodes = np.flatnonzero(bmask)
    fmask = _expand(g.fwd_ptr, g.fwd_edges, g.tails, bnodes, g.n_nodes)
    nodes = canonical_order(g, np.flatnonzero(fmask))
    bnodes = canonical_order(g, bnodes)

    def edges_of(ptr, edges, members):
        chunks = [edges[ptr[v]:ptr[v + 1]] for v in members]
        return np.concatenate(chunks).astype(np.int64) if chunks else np.zeros(0, dtype=np.int64)

    return Subgraph(
        heads=heads,
        nodes=nodes,
        backward_nodes=bnodes,
        forward_edges=edges_of(g.fwd_ptr, g.fwd_edges, nodes),
        backward_edges=edges_of(g.bwd_ptr, g.bwd_edges, bnodes),
    )


@dataclass
class QueryBatch:
    heads: np.ndarray
    relations: np.ndarray
    gold: np.ndarray
    subgraph: Subgraph = None

    @property
    def queries(self):
        return list(zip(self.heads.tolist(), self.relations.tolist()))
