"""Two-stage propagation over the layered graph.

Stage 1 runs from the deepest layer down to the users:

    tv[n] = tanh(W0 v[n] + mean_{(n, r, k) in F_n} Wr tv[k])

Stage 2 runs from the users back up to the query heads, replacing each
node's vector by an attention-weighted mix of its lower-layer neighbours:

    p[n] = sum_{(n, r, k) in B_n} alpha(n, r, k) p[k],  p[u] = tv[u] for users
    alpha = softmax over B_n of leaky_relu(w . [Wr tv[n]; Wr p[k]])

Parameters live in a ParameterStore under ``<prefix>entity``,
``<prefix>gnn.W0``, ``<prefix>gnn.Wr`` (one K x K slice per relation id) and
``<prefix>att``.
"""
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .graph import UNREACHABLE, extract_batch_subgraph


def init_gnn_params(store, dim, n_relations, rng, prefix="D."):
    a = np.sqrt(6.0 / (2 * dim))
    store.add(prefix + "gnn.W0", rng.uniform(-a, a, size=(dim, dim)))
    store.add(prefix + "gnn.Wr", rng.uniform(-a, a, size=(n_relations, dim, dim)))
    b = np.sqrt(6.0 / (2 * dim + 1))
    store.add(prefix + "att", rng.uniform(-b, b, size=2 * dim))


@dataclass
class PropagationState:
    """Plain-array snapshot of one forward pass, keyed by node / edge id."""

    tilde_v: dict
    p: dict
    alpha: dict


@dataclass
class _Layers:
    nodes: list      # node ids per layer
    pos: np.ndarray  # node id -> row within its layer (-1 if absent)


def _layers(graph, members):
    pos = np.full(graph.n_nodes, -1, dtype=np.int64)
    if members.size == 0:
        return _Layers([], pos)
    depth = graph.depth[members]
    nodes = [members[depth == L] for L in range(int(depth.max()) + 1)]
    for arr in nodes:
        pos[arr] = np.arange(arr.size)
    return _Layers(nodes, pos)


class Propagation:
    """Runs both stages for one subgraph on a tape and keeps the per-layer Vars."""

    def __init__(self, tape, store, graph, sub, slope=0.2, prefix="D."):
        self.tape = tape
        self.graph = graph
        self.sub = sub
        self.slope = slope
        self.E = tape.param(store, prefix + "entity")
        self.W0 = tape.param(store, prefix + "gnn.W0")
        self.Wr = tape.param(store, prefix + "gnn.Wr")
        self.att = ad.reshape(tape.param(store, prefix + "att"), (1, -1))
        self.dim = store[prefix + "gnn.W0"].shape[0]
        self.full = _layers(graph, sub.nodes)
        self.back = _layers(graph, sub.backward_nodes)
        self.tv = self._stage1()
        self.p, self.alpha = self._stage2()

    def _stage1(self):
        g, sub = self.graph, self.sub
        layers = self.full
        fe = sub.forward_edges
        fe_depth = g.depth[g.heads[fe]]
        tv = [None] * len(layers.nodes)
        for L in range(len(layers.nodes) - 1, -1, -1):
            nodes = layers.nodes[L]
            pre = ad.matvec_affine(self.W0, ad.gather(self.E, nodes))
            e = fe[fe_depth == L]
            if e.size:
                incoming = ad.gather(tv[L + 1], layers.pos[g.tails[e]])
                msg = ad.rel_matvec(self.Wr, g.rels[e], incoming)
                pre = ad.add(pre, ad.mean_over_set(msg, layers.pos[g.heads[e]], nodes.size))
            tv[L] = ad.tanh(pre)
        return tv

    def _stage2(self):
        g, sub = self.graph, self.sub
        full, back = self.full, self.back
        if not back.nodes:
            return [], {}
        be = sub.backward_edges
        be_depth = g.depth[g.heads[be]]
        p = [ad.gather(self.tv[0], full.pos[back.nodes[0]])]
        alpha = {}
        for L in range(1, len(back.nodes)):
            nodes = back.nodes[L]
            e = be[be_depth == L]
            rel = g.rels[e]
            seg = back.pos[g.heads[e]]
            lower = ad.gather(p[L - 1], back.pos[g.tails[e]])
            a = ad.rel_matvec(self.Wr, rel, ad.gather(self.tv[L], full.pos[g.heads[e]]))
            b = ad.rel_matvec(self.Wr, rel, lower)
            logits = ad.leaky_relu(ad.matvec_affine(self.att, ad.concat([a, b], axis=1)), self.slope)
            weights = ad.segment_softmax(ad.reshape(logits, (-1,)), seg, nodes.size)
            p.append(ad.segment_sum(ad.scale_rows(lower, weights), seg, nodes.size))
            alpha[L] = (e, weights)
        return p, alpha

    def preference(self, heads, unreachable="zero"):
        """p vectors for ``heads`` (duplicates allowed), as an (n, K) Var.

        Unreachable heads get zeros, or tanh(W0 v_h) with ``unreachable="self"``.
        """
        heads = np.asarray(heads, dtype=np.int64)
        blocks = list(self.p)
        offsets = np.cumsum([0] + [b.shape[0] for b in blocks])
        row = np.full(heads.size, -1, dtype=np.int64)
        depth = self.graph.depth[heads]
        ok = depth != UNREACHABLE
        if np.any(ok):
            d = depth[ok]
            local = self.back.pos[heads[ok]]
            if np.any(local < 0):
                raise ValueError("head not in the subgraph")
            row[ok] = offsets[d] + local
        lost = np.flatnonzero(~ok)
        if lost.size:
            if unreachable == "self":
                fill = ad.tanh(ad.matvec_affine(self.W0, ad.gather(self.E, heads[lost])))
            else:
                fill = self.tape.const(np.zeros((lost.size, self.dim)))
            row[lost] = offsets[-1] + np.arange(lost.size)
            blocks.append(fill)
        if not blocks:
            return self.tape.const(np.zeros((0, self.dim)))
        table = ad.concat(blocks, axis=0) if len(blocks) > 1 else blocks[0]
        return ad.gather(table, row)

    def state(self):
        """Numeric snapshot: tilde_v and p per node, alpha per backward edge id."""
        tilde_v = {}
        for L, nodes in enumerate(self.full.nodes):
            for i, n in enumerate(nodes):
                tilde_v[int(n)] = self.tv[L].value[i].copy()
        p = {}
        for L, nodes in enumerate(self.back.nodes):
            for i, n in enumerate(nodes):
                p[int(n)] = self.p[L].value[i].copy()
        alpha = {}
        for e, w in self.alpha.values():
            for eid, a in zip(e.tolist(), w.value.tolist()):
                alpha[eid] = a
        return PropagationState(tilde_v, p, alpha)


def stage1_propagate(tape, store, graph, sub, slope=0.2, prefix="D."):
    return Propagation(tape, store, graph, sub, slope, prefix)


def preference_vectors(tape, store, graph, heads, slope=0.2, prefix="D.", unreachable="zero"):
    """Build the batch subgraph for ``heads`` and return (p Var, Propagation)."""
    sub = extract_batch_subgraph(graph, heads)
    prop = Propagation(tape, store, graph, sub, slope, prefix)
    return prop.preference(heads, unreachable), prop


def attention_coeff(logits):
    """Softmax of raw attention logits over one node's backward edges."""
    x = np.asarray(logits, dtype=np.float64)
    z = np.exp(x - x.max())
    return z / z.sum()


def path_weight_oracle(graph, alpha, head):
    """Sum over every backward path head -> user of the product of alphas.

    Exhaustive enumeration; only meant for small graphs.
    """
    weights = {}

    def walk(n, w):
        if graph.depth[n] == 0:
            weights[int(n)] = weights.get(int(n), 0.0) + w
            return
        for e in graph.backward_edge_ids(n):
            walk(graph.tails[e], w * alpha[int(e)])

    if graph.depth[head] != UNREACHABLE:
        walk(head, 1.0)
    return weights


def user_weights(graph, alpha, head):
    """Same weights as the oracle, computed layer by layer."""
    if graph.depth[head] == UNREACHABLE:
        return {}
    mass = {int(head): 1.0}
    for _ in range(int(graph.depth[head])):
        nxt = {}
        for n, w in mass.items():
            for e in graph.backward_edge_ids(n):
                k = int(graph.tails[e])
                nxt[k] = nxt.get(k, 0.0) + w * alpha[int(e)]
        mass = nxt
    return mass


def rgcn_vectors(tape, store, graph, heads, rounds=2, prefix="D."):
    """Undifferentiated relational propagation over every edge, ignoring layers.

    Used for the R-GCN-style ablation: all node types are treated alike.
    """
    E = tape.param(store, prefix + "entity")
    W0 = tape.param(store, prefix + "gnn.W0")
    Wr = tape.param(store, prefix + "gnn.Wr")
    n = graph.n_nodes
    h = E
    for _ in range(rounds):
        msg = ad.rel_matvec(Wr, graph.rels, ad.gather(h, graph.tails))
        h = ad.tanh(ad.add(ad.matvec_affine(W0, h), ad.mean_over_set(msg, graph.heads, n)))
    return ad.gather(h, np.asarray(heads, dtype=np.int64))
