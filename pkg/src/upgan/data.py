"""Corpus ingestion, filtering, splitting, dataset I/O and synthetic corpora.

Raw corpus files are tab separated:

* triples:      head<TAB>relation<TAB>tail
* interactions: user<TAB>item
* alignment:    item<TAB>entity

Filtering works on string ids; dense ids are assigned once at the end.
"""
import hashlib
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .graph import ITEM_ENTITY, USER, TripleStore, Vocab, build_graph


class ParseError(ValueError):
    pass


class SynthConfigError(ValueError):
    pass


@dataclass
class RawCorpus:
    triples_path: str
    interactions_path: str
    alignment_path: str
    exclude_relations: list = field(default_factory=list)


@dataclass
class RawData:
    triples: list            # (head, relation, tail) names
    interactions: list       # (user, item) names, item already mapped to its entity
    items: set               # aligned entity names

    def copy(self):
        return RawData(list(self.triples), list(self.interactions), set(self.items))


def _read_tsv(path, width):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for no, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != width or any(not p for p in parts):
                raise ParseError(f"{path}:{no}: expected {width} tab-separated fields")
            rows.append(tuple(parts))
    return rows


def read_corpus(corpus):
    for p in (corpus.triples_path, corpus.interactions_path, corpus.alignment_path):
        if not os.path.exists(p):
            raise FileNotFoundError(p)
    triples = _read_tsv(corpus.triples_path, 3)
    entities = {h for h, _, _ in triples} | {t for _, _, t in triples}
    alignment = {}
    with open(corpus.alignment_path, encoding="utf-8") as fh:
        for no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\r\n").split("\t")
            if len(parts) != 2 or not all(parts):
                raise ParseError(f"{corpus.alignment_path}:{no}: expected item<TAB>entity")
            item, ent = parts
            if ent not in entities:
                raise ParseError(f"{corpus.alignment_path}:{no}: unknown alignment target {ent!r}")
            alignment[item] = ent
    interactions = [
        (u, alignment[i]) for u, i in _read_tsv(corpus.interactions_path, 2) if i in alignment
    ]
    excluded = set(corpus.exclude_relations)
    triples = [tr for tr in triples if tr[1] not in excluded]
    return RawData(
        triples=sorted(set(triples)),
        interactions=sorted(set(interactions)),
        items=set(alignment.values()),
    )


def build_vocab(raw):
    """Dense ids from string data: entities sorted by name, then users."""
    entities = sorted({h for h, _, _ in raw.triples} | {t for _, _, t in raw.triples})
    ent_set = set(entities)
    relations = sorted({r for _, r, _ in raw.triples})
    users = sorted({u for u, _ in raw.interactions})
    items = sorted(i for i in raw.items if i in ent_set)
    vocab = Vocab(entities, relations, users=users, items=items)
    kg = [(vocab.node(h), vocab.relation(r), vocab.node(t)) for h, r, t in raw.triples]
    ui = [
        (vocab.node(u), vocab.interact_id, vocab.node(i))
        for u, i in raw.interactions if i in ent_set
    ]
    return vocab, TripleStore(vocab, kg, ui)


def parse(corpus):
    return build_vocab(read_corpus(corpus))


def serialize(vocab, store, out_dir):
    """Write a TripleStore back out as a raw corpus (items align to themselves)."""
    os.makedirs(out_dir, exist_ok=True)
    names = vocab.node_names
    rels = vocab.relation_names
    corpus = RawCorpus(
        os.path.join(out_dir, "triples.tsv"),
        os.path.join(out_dir, "interactions.tsv"),
        os.path.join(out_dir, "alignment.tsv"),
    )
    with open(corpus.triples_path, "w", encoding="utf-8") as fh:
        for h, r, t in store.kg.tolist():
            fh.write(f"{names[h]}\t{rels[r]}\t{names[t]}\n")
    with open(corpus.interactions_path, "w", encoding="utf-8") as fh:
        for u, _, i in store.ui.tolist():
            fh.write(f"{names[u]}\t{names[i]}\n")
    with open(corpus.alignment_path, "w", encoding="utf-8") as fh:
        for n in np.flatnonzero(vocab.node_kind == ITEM_ENTITY).tolist():
            fh.write(f"{names[n]}\t{names[n]}\n")
    return corpus


# filters

def kcore_filter(interactions, k_user, k_item):
    """Largest interaction subset where every user has >= k_user and every item >= k_item."""
    current = sorted(set(interactions))
    while True:
        ucount = Counter(u for u, _ in current)
        icount = Counter(i for _, i in current)
        kept = [(u, i) for u, i in current if ucount[u] >= k_user and icount[i] >= k_item]
        if len(kept) == len(current):
            return kept
        current = kept


def _hop_distance(triples, seeds):
    adj = defaultdict(set)
    for h, _, t in triples:
        adj[h].add(t)
        adj[t].add(h)
    dist = {s: 0 for s in seeds if s in adj}
    frontier = sorted(dist)
    d = 0
    while frontier:
        d += 1
        nxt = []
        for n in frontier:
            for k in sorted(adj[n]):
                if k not in dist:
                    dist[k] = d
                    nxt.append(k)
        frontier = nxt
    return dist


def bfs_kg_subgraph(triples, seeds, max_hops=4, exclude=(), min_triples=0):
    """Triples within ``max_hops`` (undirected) of a seed, iterated jointly with
    the minimum-triples-per-entity filter until nothing changes."""
    excluded = set(exclude)
    current = sorted({tr for tr in triples if tr[1] not in excluded})
    while True:
        dist = _hop_distance(current, seeds)
        kept = [
            tr for tr in current
            if dist.get(tr[0], max_hops + 1) <= max_hops and dist.get(tr[2], max_hops + 1) <= max_hops
        ]
        if min_triples > 0:
            deg = Counter()
            for h, _, t in kept:
                deg[h] += 1
                deg[t] += 1
            kept = [tr for tr in kept if deg[tr[0]] >= min_triples and deg[tr[2]] >= min_triples]
        if kept == current:
            return kept
        current = kept


def filter_corpus(raw, k_user, k_item, max_hops, min_triples, exclude=()):
    """Joint fixpoint of k-core, BFS radius and entity-frequency filtering."""
    triples = list(raw.triples)
    interactions = list(raw.interactions)
    while True:
        interactions = kcore_filter(interactions, k_user, k_item)
        seeds = sorted({i for _, i in interactions})
        new_triples = bfs_kg_subgraph(triples, seeds, max_hops, exclude, min_triples)
        present = {h for h, _, _ in new_triples} | {t for _, _, t in new_triples}
        new_inter = [(u, i) for u, i in interactions if i in present]
        if new_triples == triples and new_inter == interactions:
            break
        triples, interactions = new_triples, new_inter
    return RawData(triples, interactions, set(raw.items))


# splitting

def split(triples, ratios=(0.8, 0.1, 0.1), seed=0):
    """Random triple-level split; valid/test triples whose entity or relation
    never occurs in train are moved to train, then train donates triples back
    (never orphaning anything) to restore the target sizes."""
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValueError("ratios must be non-negative and sum to 1")
    triples = list(triples)
    n = len(triples)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_valid = int(round(ratios[1] * n))
    n_test = int(round(ratios[2] * n))
    n_train = n - n_valid - n_test
    train = [triples[i] for i in perm[:n_train]]
    valid = [triples[i] for i in perm[n_train:n_train + n_valid]]
    test = [triples[i] for i in perm[n_train + n_valid:]]

    count = Counter()
    for h, r, t in train:
        count[h] += 1
        count[t] += 1
        count[("rel", r)] += 1

    def covered(tr):
        return count[tr[0]] > 0 and count[tr[2]] > 0 and count[("rel", tr[1])] > 0

    def add(tr, sign):
        count[tr[0]] += sign
        count[tr[2]] += sign
        count[("rel", tr[1])] += sign

    moved = True
    while moved:
        moved = False
        for part in (valid, test):
            keep = []
            for tr in part:
                if covered(tr):
                    keep.append(tr)
                else:
                    train.append(tr)
                    add(tr, +1)
                    moved = True
            part[:] = keep

    def donate(part, target):
        i = 0
        while len(part) < target and i < len(train):
            tr = train[i]
            add(tr, -1)
            if covered(tr):
                part.append(train.pop(i))
            else:
                add(tr, +1)
                i += 1

    donate(valid, n_valid)
    donate(test, n_test)
    return train, valid, test


# datasets

@dataclass
class SplitDataset:
    vocab: Vocab
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    ui: np.ndarray
    split_seed: int = 0
    _graph: object = field(default=None, repr=False)

    @property
    def graph(self):
        """Layered graph over train triples and interactions only."""
        if self._graph is None:
            self._graph = build_graph(self.vocab, TripleStore(self.vocab, self.train, self.ui))
        return self._graph

    @property
    def all_triples(self):
        return np.concatenate([self.train, self.valid, self.test])

    def without_interactions(self):
        return SplitDataset(self.vocab, self.train, self.valid, self.test,
                            np.zeros((0, 3), dtype=np.int64), self.split_seed)

    def manifest(self):
        v = self.vocab
        items_used = np.unique(self.ui[:, 2]) if len(self.ui) else []
        rows = [
            ("#Users", v.n_users),
            ("#Items", len(items_used)),
            ("#Interactions", len(self.ui)),
            ("#Entities", v.n_entities),
            ("#Relations", v.n_base),
            ("#Triples", len(self.train) + len(self.valid) + len(self.test)),
            ("#Train", len(self.train)),
            ("#Valid", len(self.valid)),
            ("#Test", len(self.test)),
            ("split_seed", self.split_seed),
        ]
        return "".join(f"{k}\t{val}\n" for k, val in rows)

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        v = self.vocab
        kinds = {0: "entity", ITEM_ENTITY: "item", USER: "user"}
        with open(os.path.join(out_dir, "entities.tsv"), "w", encoding="utf-8") as fh:
            for name, kind in zip(v.node_names, v.node_kind.tolist()):
                fh.write(f"{name}\t{kinds[kind]}\n")
        with open(os.path.join(out_dir, "relations.tsv"), "w", encoding="utf-8") as fh:
            for r in v.base_relations:
                fh.write(r + "\n")
        for label, arr in (("train", self.train), ("valid", self.valid), ("test", self.test)):
            with open(os.path.join(out_dir, f"{label}.tsv"), "w", encoding="utf-8") as fh:
                for h, r, t in arr.tolist():
                    fh.write(f"{v.node_names[h]}\t{v.relation_names[r]}\t{v.node_names[t]}\n")
        with open(os.path.join(out_dir, "interactions.tsv"), "w", encoding="utf-8") as fh:
            for u, _, i in self.ui.tolist():
                fh.write(f"{v.node_names[u]}\t{v.node_names[i]}\n")
        with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
            fh.write(self.manifest())

    @classmethod
    def load(cls, in_dir):
        def path(name):
            p = os.path.join(in_dir, name)
            if not os.path.exists(p):
                raise FileNotFoundError(p)
            return p

        rows = _read_tsv(path("entities.tsv"), 2)
        entities = [n for n, k in rows if k != "user"]
        users = [n for n, k in rows if k == "user"]
        items = [n for n, k in rows if k == "item"]
        with open(path("relations.tsv"), encoding="utf-8") as fh:
            relations = [line.rstrip("\r\n") for line in fh if line.strip()]
        vocab = Vocab(entities, relations, users=users, items=items)

        def triples(name):
            out = []
            for h, r, t in _read_tsv(path(name), 3):
                try:
                    out.append((vocab.node(h), vocab.relation(r), vocab.node(t)))
                except KeyError as exc:
                    raise ParseError(f"{name}: unknown id {exc}") from None
            return np.asarray(out, dtype=np.int64).reshape(-1, 3)

        ui = [(vocab.node(u), vocab.interact_id, vocab.node(i))
              for u, i in _read_tsv(path("interactions.tsv"), 2)]
        seed = 0
        mpath = os.path.join(in_dir, "manifest.txt")
        if os.path.exists(mpath):
            for k, val in _read_tsv(mpath, 2):
                if k == "split_seed":
                    seed = int(val)
        return cls(vocab, triples("train.tsv"), triples("valid.tsv"), triples("test.tsv"),
                   np.asarray(ui, dtype=np.int64).reshape(-1, 3), seed)


def prepare(raw, config):
    """Filter a raw corpus and split it into a SplitDataset."""
    filtered = filter_corpus(raw, config.k_core_user, config.k_core_item, config.max_hops,
                             config.entity_min_triples, config.excluded)
    vocab, store = build_vocab(filtered)
    names = [(vocab.node_names[h], vocab.relation_names[r], vocab.node_names[t]) for h, r, t in store.kg.tolist()]
    train, valid, test = split(names, seed=config.split_seed)

    def ids(rows):
        arr = [(vocab.node(h), vocab.relation(r), vocab.node(t)) for h, r, t in rows]
        return np.asarray(arr, dtype=np.int64).reshape(-1, 3)

    return SplitDataset(vocab, ids(train), ids(valid), ids(test), store.ui, config.split_seed)


def dataset_from_arrays(vocab, train, valid, test, ui=()):
    def rows(a):
        return np.asarray(a, dtype=np.int64).reshape(-1, 3)

    return SplitDataset(vocab, rows(train), rows(valid), rows(test), rows(ui))


def split_digest(train, valid, test):
    h = hashlib.sha256()
    for part in (train, valid, test):
        for tr in part:
            h.update("\t".join(map(str, tr)).encode())
            h.update(b"\n")
        h.update(b"|")
    return h.hexdigest()


# synthetic corpora

@dataclass
class SynthSpec:
    n_items: int = 100
    n_clusters: int = 4
    n_creators: int = 30
    n_countries: int = 6
    n_tags: int = 60
    tags_per_item: int = 2
    n_users: int = 100
    interactions_per_user: int = 15
    strength: float = 1.0

    def check(self):
        if self.n_items + self.n_clusters + self.n_creators < 20 or self.n_users < 5:
            raise SynthConfigError("need at least 20 entities and 5 users")
        if self.n_clusters > self.n_items or self.n_clusters < 1:
            raise SynthConfigError("more clusters than items")
        if not 0.0 <= self.strength <= 1.0:
            raise SynthConfigError("strength must be in [0, 1]")
        if min(self.n_creators, self.n_countries, self.n_tags) < 1:
            raise SynthConfigError("attribute pools must be non-empty")


def synth_data(spec, seed=0):
    """Synthetic KG plus interactions whose co-occurrence reveals item genres.

    Every item has one genre (its latent cluster), a random creator and random
    tags; creators have a random country. Each user belongs to a cluster and,
    with probability ``strength`` per interaction, picks an item of that
    cluster (otherwise any item). Returns (RawData, metadata dict).
    """
    spec.check()
    rng = np.random.default_rng(seed)
    items = [f"item{i:03d}" for i in range(spec.n_items)]
    genres = [f"genre{c}" for c in range(spec.n_clusters)]
    creators = [f"creator{i:02d}" for i in range(spec.n_creators)]
    countries = [f"country{i}" for i in range(spec.n_countries)]
    tags = [f"tag{i:02d}" for i in range(spec.n_tags)]
    cluster = rng.permutation(np.arange(spec.n_items) % spec.n_clusters)
    triples = []
    for i, name in enumerate(items):
        triples.append((name, "has_genre", genres[cluster[i]]))
        triples.append((name, "made_by", creators[rng.integers(spec.n_creators)]))
        for t in rng.choice(spec.n_tags, size=spec.tags_per_item, replace=False):
            triples.append((name, "has_tag", tags[t]))
    for c in creators:
        triples.append((c, "from_country", countries[rng.integers(spec.n_countries)]))
    members = [np.flatnonzero(cluster == c) for c in range(spec.n_clusters)]
    user_cluster = rng.integers(spec.n_clusters, size=spec.n_users)
    interactions = set()
    for u in range(spec.n_users):
        for _ in range(spec.interactions_per_user):
            if rng.random() < spec.strength:
                i = members[user_cluster[u]][rng.integers(members[user_cluster[u]].size)]
            else:
                i = rng.integers(spec.n_items)
            interactions.add((f"user{u:03d}", items[i]))
    raw = RawData(sorted(set(triples)), sorted(interactions), set(items))
    meta = {
        "item_cluster": {items[i]: int(cluster[i]) for i in range(spec.n_items)},
        "user_cluster": {f"user{u:03d}": int(user_cluster[u]) for u in range(spec.n_users)},
        "strength": spec.strength,
        "seed": seed,
    }
    return raw, meta


def synth_generate(out_dir, spec, seed=0):
    """Write a synthetic corpus (triples, interactions, alignment, metadata) to ``out_dir``."""
    raw, meta = synth_data(spec, seed)
    os.makedirs(out_dir, exist_ok=True)
    corpus = RawCorpus(
        os.path.join(out_dir, "triples.tsv"),
        os.path.join(out_dir, "interactions.tsv"),
        os.path.join(out_dir, "alignment.tsv"),
    )
    with open(corpus.triples_path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{h}\t{r}\t{t}\n" for h, r, t in raw.triples)
    with open(corpus.interactions_path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{u}\t{i}\n" for u, i in raw.interactions)
    with open(corpus.alignment_path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{i}\t{i}\n" for i in sorted(raw.items))
    with open(os.path.join(out_dir, "metadata.tsv"), "w", encoding="utf-8") as fh:
        fh.write(f"strength\t{meta['strength']}\nseed\t{seed}\n")
        for k, c in sorted(meta["item_cluster"].items()):
            fh.write(f"item_cluster\t{k}\t{c}\n")
        for k, c in sorted(meta["user_cluster"].items()):
            fh.write(f"user_cluster\t{k}\t{c}\n")
    return corpus, meta
