"""DistMult and TransE baselines with 1-N scoring, used standalone and to
initialise the adversarial model.

Tables are stored as ``KG.entity`` (one row per node, users included) and
``KG.relation`` (one row per relation id, inverses included).
"""
import numpy as np

from . import autodiff as ad
from .evaluation import KnownTriples, both_direction_queries, rank_all

DISTMULT = "distmult"
TRANSE = "transe"
KINDS = (DISTMULT, TRANSE)


class TrainingDiverged(RuntimeError):
    pass


def distmult_score(vh, vr, vt):
    # head * tail first so swapping them gives bit-identical scores
    return float(np.sum(np.asarray(vh) * np.asarray(vt) * np.asarray(vr)))


def transe_score(vh, vr, vt):
    return -float(np.linalg.norm(np.asarray(vh) + np.asarray(vr) - np.asarray(vt)))


def init_embeddings(store, n_nodes, n_relations, dim, rng, prefix="KG."):
    a = 6.0 / np.sqrt(dim)
    store.add(prefix + "entity", rng.uniform(-a, a, size=(n_nodes, dim)))
    store.add(prefix + "relation", rng.uniform(-a, a, size=(n_relations, dim)))


class EmbeddingModel:
    """Frozen view over a store holding ``KG.entity`` / ``KG.relation``."""

    def __init__(self, store, kind, n_entities):
        if kind not in KINDS:
            raise ValueError(f"unknown model kind {kind!r}")
        self.store = store
        self.kind = kind
        self.n_entities = n_entities

    @property
    def entity(self):
        return self.store["KG.entity"]

    @property
    def relation(self):
        return self.store["KG.relation"]

    def score(self, h, r, t):
        fn = distmult_score if self.kind == DISTMULT else transe_score
        return fn(self.entity[h], self.relation[r], self.entity[t])

    def score_all(self, heads, rels):
        """(B, n_entities) scores for every candidate tail."""
        E = self.entity[: self.n_entities]
        q = self.entity[np.asarray(heads)]
        R = self.relation[np.asarray(rels)]
        if self.kind == DISTMULT:
            return (q * R) @ E.T
        diff = (q + R)[:, None, :] - E[None, :, :]
        return -np.sqrt(np.sum(diff * diff, axis=-1))

    def tensors(self):
        return {
            "KG.entity": self.entity,
            "KG.relation": self.relation,
            "KG.kind": np.asarray(KINDS.index(self.kind), dtype=np.float64),
        }

    @classmethod
    def from_tensors(cls, tensors, n_entities):
        store = ad.ParameterStore()
        store.add("KG.entity", tensors["KG.entity"])
        store.add("KG.relation", tensors["KG.relation"])
        return cls(store, KINDS[int(tensors["KG.kind"])], n_entities)


# losses

def one_n_targets(gold_sets, n_entities, label_smoothing):
    """Smoothed 1-N targets: 1-eps on gold entities, eps/N elsewhere."""
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError("label_smoothing must be in [0, 1)")
    t = np.full((len(gold_sets), n_entities), label_smoothing / n_entities)
    for i, gold in enumerate(gold_sets):
        if len(gold) == 0:
            raise ValueError("one_n_loss needs at least one gold entity per query")
        t[i, np.asarray(list(gold), dtype=np.int64)] = 1.0 - label_smoothing
    return t


def one_n_loss_var(tape, store, heads, rels, targets, n_entities, prefix="KG."):
    E = tape.param(store, prefix + "entity")
    R = tape.param(store, prefix + "relation")
    q = ad.mul(ad.gather(E, heads), ad.gather(R, rels))
    cand = ad.gather(E, np.arange(n_entities))
    scores = ad.matmul(q, ad.transpose(cand))
    return ad.bce_with_logits(scores, targets)


def one_n_loss(scores, gold, label_smoothing=0.0):
    """Numeric 1-N loss for a single query's score vector."""
    scores = np.asarray(scores, dtype=np.float64)
    t = one_n_targets([gold], scores.size, label_smoothing)[0]
    loss = np.maximum(scores, 0) - scores * t + np.log1p(np.exp(-np.abs(scores)))
    return float(loss.mean())


def transe_margin_loss_var(tape, store, heads, rels, tails, neg_tails, margin, prefix="KG."):
    E = tape.param(store, prefix + "entity")
    R = tape.param(store, prefix + "relation")
    q = ad.add(ad.gather(E, heads), ad.gather(R, rels))
    pos = ad.row_norm(ad.sub(q, ad.gather(E, tails)))
    neg = ad.row_norm(ad.sub(q, ad.gather(E, neg_tails)))
    hinge = ad.relu(ad.add_const(ad.sub(pos, neg), np.full(len(heads), float(margin))))
    return ad.mean(hinge)


def _reg(tape, store, names, weight):
    terms = [ad.sumsq(tape.param(store, n)) for n in names]
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return ad.scale(out, weight)


# training

class EarlyStopping:
    """Keeps the best snapshot by validation MRR; stops after ``patience``
    evaluations without improvement (patience 0 never stops)."""

    def __init__(self, patience):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = None
        self.best_state = None
        self.bad = 0

    def update(self, epoch, mrr, snapshot):
        if mrr > self.best:
            self.best, self.best_epoch, self.best_state = mrr, epoch, snapshot()
            self.bad = 0
        else:
            self.bad += 1
        return self.patience > 0 and self.bad >= self.patience


def validation_mrr(score_fn, dataset, known=None):
    if len(dataset.valid) == 0:
        return 0.0
    known = known or KnownTriples(dataset.vocab, dataset.train, dataset.valid, dataset.test)
    h, r, g = both_direction_queries(dataset.valid, dataset.vocab)
    ranks = rank_all(score_fn, h, r, g, known, dataset.vocab.n_entities)
    return float(np.mean(1.0 / ranks))


def training_queries(triples, vocab):
    """Unique (head, relation) pairs from both directions with their gold sets."""
    h, r, g = both_direction_queries(triples, vocab)
    golds = {}
    for a, b, c in zip(h.tolist(), r.tolist(), g.tolist()):
        golds.setdefault((a, b), set()).add(c)
    keys = sorted(golds)
    heads = np.array([k[0] for k in keys], dtype=np.int64)
    rels = np.array([k[1] for k in keys], dtype=np.int64)
    return heads, rels, [sorted(golds[k]) for k in keys]


def pretrain(dataset, config, kind=None, seed=None, on_step=None, history=None):
    """Train a baseline on ``dataset.train``; returns the best EmbeddingModel by
    validation MRR (checked every ``config.eval_every`` epochs)."""
    kind = kind or config.pretrain_model
    seed = config.train_seed if seed is None else seed
    vocab = dataset.vocab
    n_ent = vocab.n_entities
    rng = np.random.default_rng([seed, 1])
    store = ad.ParameterStore()
    init_embeddings(store, vocab.n_nodes, vocab.n_relations, config.dim, rng)
    ad.project_rows_inplace(store, "KG.entity", config.min_norm)
    model = EmbeddingModel(store, kind, n_ent)
    if config.pretrain_epochs == 0 or len(dataset.train) == 0:
        return model

    heads, rels, golds = training_queries(dataset.train, vocab)
    if kind == TRANSE:
        qh, qr, qg = both_direction_queries(dataset.train, vocab)
    known = KnownTriples(vocab, dataset.train, dataset.valid, dataset.test)
    stopper = EarlyStopping(config.patience)
    stopper.update(0, validation_mrr(model.score_all, dataset, known), store.copy)
    names = ["KG.entity", "KG.relation"]

    for epoch in range(1, config.pretrain_epochs + 1):
        losses = []
        if kind == DISTMULT:
            order = rng.permutation(heads.size)
        else:
            order = rng.permutation(qh.size)
        for lo in range(0, order.size, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            tape = ad.Tape()
            if kind == DISTMULT:
                targets = one_n_targets([golds[i] for i in idx], n_ent, config.label_smoothing)
                loss = one_n_loss_var(tape, store, heads[idx], rels[idx], targets, n_ent)
            else:
                neg = rng.integers(n_ent, size=idx.size)
                loss = transe_margin_loss_var(tape, store, qh[idx], qr[idx], qg[idx], neg, config.margin)
            if config.lambda_d > 0:
                loss = ad.add(loss, _reg(tape, store, names, config.lambda_d))
            value = float(loss.value)
            if not np.isfinite(value):
                raise TrainingDiverged(f"pretraining loss became non-finite at epoch {epoch}")
            tape.backward(loss)
            try:
                ad.adam_step(store, config.pretrain_lr, names=names)
            except ad.NonFiniteGradient as exc:
                raise TrainingDiverged(str(exc)) from None
            ad.project_rows_inplace(store, "KG.entity", config.min_norm)
            if on_step is not None:
                on_step(store)
            losses.append(value)
        if history is not None:
            history.append(float(np.mean(losses)))
        if epoch % config.eval_every == 0 or epoch == config.pretrain_epochs:
            if stopper.update(epoch, validation_mrr(model.score_all, dataset, known), store.copy):
                break
    return EmbeddingModel(stopper.best_state, kind, n_ent)
