"""Filtered ranking evaluation (MR, MRR, H@k) with sparsity and hop breakdowns."""
from dataclasses import dataclass, field

import numpy as np

from . import kernels

SPARSITY_LABELS = ("A", "B", "C", "D", "E")
HOP_LABELS = ("1", "2", ">=3")


class DataError(ValueError):
    pass


class KnownTriples:
    """Every known true answer per (head, relation), both directions."""

    def __init__(self, vocab, *triple_sets):
        answers = {}
        for triples in triple_sets:
            for h, r, t in np.asarray(triples, dtype=np.int64).reshape(-1, 3).tolist():
                answers.setdefault((h, r), set()).add(t)
                answers.setdefault((t, int(vocab.inverse(r))), set()).add(h)
        self._answers = {k: np.array(sorted(v), dtype=np.int64) for k, v in answers.items()}
        self._empty = np.zeros(0, dtype=np.int64)

    def answers(self, h, r):
        return self._answers.get((int(h), int(r)), self._empty)


def both_direction_queries(triples, vocab):
    """(heads, relations, golds): each triple gives <h, r, ?> -> t and <t, r_inv, ?> -> h."""
    tr = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    heads = np.empty(2 * len(tr), dtype=np.int64)
    rels = np.empty_like(heads)
    golds = np.empty_like(heads)
    heads[0::2], rels[0::2], golds[0::2] = tr[:, 0], tr[:, 1], tr[:, 2]
    heads[1::2], golds[1::2] = tr[:, 2], tr[:, 0]
    rels[1::2] = vocab.inverse(tr[:, 1]) if len(tr) else tr[:, 1]
    return heads, rels, golds


def query_ids(n_triples):
    return [f"{i}:{d}" for i in range(n_triples) for d in ("tail", "head")]


def filtered_candidates(h, r, gold, n_entities, known):
    if not 0 <= gold < n_entities:
        raise DataError(f"gold entity {gold} outside the entity range")
    drop = set(known.answers(h, r).tolist())
    drop.discard(int(gold))
    return [e for e in range(n_entities) if e not in drop]


def rank_query(scores, gold, pessimistic=False):
    """1 + number of other candidates scoring higher (>= when pessimistic).

    ``scores`` maps candidate -> score (dict) or is an array indexed by candidate.
    """
    if isinstance(scores, dict):
        target = scores[gold]
        others = [s for c, s in scores.items() if c != gold]
    else:
        scores = np.asarray(scores)
        target = scores[gold]
        others = np.delete(scores, gold)
    others = np.asarray(others)
    beats = others >= target if pessimistic else others > target
    return 1 + int(np.count_nonzero(beats))


@dataclass
class RankReport:
    ranks: np.ndarray
    ks: list = field(default_factory=lambda: [1, 3, 10])
    groups: dict = field(default_factory=dict)

    @property
    def mr(self):
        return float(np.mean(self.ranks)) if self.ranks.size else float("nan")

    @property
    def mrr(self):
        return float(np.mean(1.0 / self.ranks)) if self.ranks.size else float("nan")

    def hits(self, k):
        return float(np.mean(self.ranks <= k)) if self.ranks.size else float("nan")

    def metrics(self):
        out = {"MR": self.mr, "MRR": self.mrr}
        for k in self.ks:
            out[f"H@{k}"] = self.hits(k)
        return out

    def breakdown(self, kind, k=3):
        labels = self.groups[kind]
        order = SPARSITY_LABELS if kind == "sparsity" else HOP_LABELS
        out = {}
        for lab in order:
            sel = self.ranks[np.asarray(labels) == lab]
            out[lab] = float(np.mean(sel <= k)) if sel.size else float("nan")
        return out


def aggregate(ranks, ks=(1, 3, 10)):
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise ValueError("aggregate needs at least one rank")
    return RankReport(ranks=ranks, ks=list(ks))


def rank_all(score_fn, heads, rels, golds, known, n_entities, pessimistic=False, batch_size=512):
    """Filtered ranks for every query.

    ``score_fn(heads, rels)`` returns a (B, n_entities) score matrix.
    """
    heads = np.asarray(heads, dtype=np.int64)
    rels = np.asarray(rels, dtype=np.int64)
    golds = np.asarray(golds, dtype=np.int64)
    if golds.size and (golds.min() < 0 or golds.max() >= n_entities):
        raise DataError("gold entity outside the entity range")
    out = np.empty(heads.size, dtype=np.int64)
    for lo in range(0, heads.size, batch_size):
        hi = min(lo + batch_size, heads.size)
        scores = np.asarray(score_fn(heads[lo:hi], rels[lo:hi]), dtype=np.float64)
        filt = [known.answers(h, r) for h, r in zip(heads[lo:hi], rels[lo:hi])]
        ptr = np.zeros(len(filt) + 1, dtype=np.int64)
        np.cumsum([f.size for f in filt], out=ptr[1:])
        idx = np.concatenate(filt) if filt else np.zeros(0, dtype=np.int64)
        out[lo:hi] = kernels.filtered_rank(scores, golds[lo:hi], ptr, idx, pessimistic)
    return out


def entity_frequency(train_triples, n_nodes):
    tr = np.asarray(train_triples, dtype=np.int64).reshape(-1, 3)
    return np.bincount(np.concatenate([tr[:, 0], tr[:, 2]]), minlength=n_nodes)


def sparsity_groups(golds, freq):
    """Equal-count quintiles by ascending train frequency of the answer; ties keep query order."""
    golds = np.asarray(golds, dtype=np.int64)
    order = np.argsort(np.asarray(freq)[golds], kind="stable")
    labels = np.empty(golds.size, dtype=object)
    for lab, chunk in zip(SPARSITY_LABELS, np.array_split(order, 5)):
        labels[chunk] = lab
    return labels.tolist()


def hop_groups(heads, graph):
    d = graph.depth[np.asarray(heads, dtype=np.int64)]
    return ["1" if x == 1 else "2" if x == 2 else ">=3" for x in d.tolist()]


def evaluate(score_fn, triples, vocab, known, graph=None, train_triples=None,
             ks=(1, 3, 10), pessimistic=False):
    heads, rels, golds = both_direction_queries(triples, vocab)
    ranks = rank_all(score_fn, heads, rels, golds, known, vocab.n_entities, pessimistic)
    report = RankReport(ranks=ranks, ks=list(ks))
    if train_triples is not None:
        report.groups["sparsity"] = sparsity_groups(golds, entity_frequency(train_triples, vocab.n_nodes))
    if graph is not None:
        report.groups["hops"] = hop_groups(heads, graph)
    return report


# report files

def format_metrics_header(ks):
    return "\t".join(["model", "MR", "MRR"] + [f"H@{k}" for k in ks])


def format_metrics_row(name, report):
    m = report.metrics()
    cells = [name, f"{m['MR']:.1f}", f"{100 * m['MRR']:.1f}"]
    cells += [f"{100 * m[f'H@{k}']:.1f}" for k in report.ks]
    return "\t".join(cells)


def format_breakdown(name, report, kind, k=3):
    labels = SPARSITY_LABELS if kind == "sparsity" else HOP_LABELS
    vals = report.breakdown(kind, k)
    header = "\t".join(["model"] + list(labels))
    row = "\t".join([name] + [f"{100 * vals[l]:.1f}" for l in labels])
    return header + "\n" + row + "\n"


def write_ranks(path, ids, ranks):
    with open(path, "w", encoding="utf-8") as fh:
        for q, r in zip(ids, ranks):
            fh.write(f"{q}\t{int(r)}\n")


def read_ranks(path):
    ids, ranks = [], []
    with open(path, encoding="utf-8") as fh:
        for no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{no}: expected query_id<TAB>rank")
            try:
                rank = int(parts[1])
            except ValueError:
                rank = 0
            if rank < 1:
                raise DataError(f"{path}:{no}: rank must be a positive integer")
            ids.append(parts[0])
            ranks.append(rank)
    return ids, np.asarray(ranks, dtype=np.int64)

