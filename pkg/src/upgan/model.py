"""Preference-guided discriminator, query-specific generator and the
alternating adversarial training loop.

Discriminator tensors live under ``D.``: entity and relation tables, the
propagation weights (``D.gnn.W0``, ``D.gnn.Wr``, ``D.att``) and the scoring
layers ``D.W1`` (K x 2K), ``D.b1``, ``D.W2`` (K x K), ``D.b2``. The score of a
candidate tail t for a query (h, r) is

    x_q = [v_h * v_r ; p_h * v_r]
    s   = (W2 v_t + b2) . tanh(W1 x_q + b1)

The generator has its own ``G.entity`` / ``G.relation`` tables and a three
layer MLP ``G.mlp.<layer>.{W,b}`` (2K -> K -> K -> K, LeakyReLU between).

RNG streams are derived from ``train_seed`` with fixed stream ids, so a run
is reproducible bit for bit.
"""
import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint, kernels
from .evaluation import KnownTriples, both_direction_queries
from .gnn import Propagation, init_gnn_params, rgcn_vectors, user_weights
from .graph import UNREACHABLE, extract_batch_subgraph
from .kg_embed import EarlyStopping, TrainingDiverged, validation_mrr

D_PREFIX = "D."
G_PREFIX = "G."
N_MLP_LAYERS = 3

# stream ids for np.random.default_rng([seed, stream])
_STREAM_INIT, _STREAM_SHUFFLE, _STREAM_POOL, _STREAM_NOISE, _STREAM_SAMPLE = 2, 3, 4, 5, 6


# parameter initialisation

def init_discriminator(store, vocab, dim, rng, kg=None, init_noise=1e-3):
    """Scoring layers start close to a plain bilinear model on the KG half:
    W1 = [I | 0], W2 = I (plus small noise), zero biases."""
    a = 6.0 / np.sqrt(dim)
    if kg is not None:
        store.add("D.entity", kg.entity.copy())
        store.add("D.relation", kg.relation.copy())
    else:
        store.add("D.entity", rng.uniform(-a, a, size=(vocab.n_nodes, dim)))
        store.add("D.relation", rng.uniform(-a, a, size=(vocab.n_relations, dim)))
    init_gnn_params(store, dim, vocab.n_relations, rng, prefix=D_PREFIX)
    eye = np.eye(dim)
    store.add("D.W1", np.hstack([eye, np.zeros((dim, dim))]) + init_noise * rng.standard_normal((dim, 2 * dim)))
    store.add("D.b1", np.zeros(dim))
    store.add("D.W2", eye + init_noise * rng.standard_normal((dim, dim)))
    store.add("D.b2", np.zeros(dim))


def init_generator(store, vocab, dim, rng, kg=None):
    a = 6.0 / np.sqrt(dim)
    if kg is not None:
        store.add("G.entity", kg.entity.copy())
        store.add("G.relation", kg.relation.copy())
    else:
        store.add("G.entity", rng.uniform(-a, a, size=(vocab.n_nodes, dim)))
        store.add("G.relation", rng.uniform(-a, a, size=(vocab.n_relations, dim)))
    widths = [2 * dim, dim, dim, dim]
    for layer in range(N_MLP_LAYERS):
        fan_in, fan_out = widths[layer], widths[layer + 1]
        b = np.sqrt(6.0 / (fan_in + fan_out))
        store.add(f"G.mlp.{layer}.W", rng.uniform(-b, b, size=(fan_out, fan_in)))
        store.add(f"G.mlp.{layer}.b", np.zeros(fan_out))


# discriminator

def disc_query_embedding(vh, vr, ph):
    return ad.concat([ad.mul(vh, vr), ad.mul(ph, vr)], axis=1)


def disc_hidden(tape, store, query_vec):
    W1, b1 = tape.param(store, "D.W1"), tape.param(store, "D.b1")
    return ad.tanh(ad.matvec_affine(W1, query_vec, b1))


def disc_tail(tape, store, vt):
    W2, b2 = tape.param(store, "D.W2"), tape.param(store, "D.b2")
    return ad.matvec_affine(W2, vt, b2)


def disc_score_value(query_vec, vt, W1, b1, W2, b2):
    """Numeric score for one query embedding and one tail vector."""
    return float((W2 @ vt + b2) @ np.tanh(W1 @ query_vec + b1))


def disc_prob(s):
    return ad.sigmoid_value(np.asarray(s, dtype=np.float64))


class Discriminator:
    """Builds discriminator scores on a tape for a batch of queries."""

    def __init__(self, tape, store, graph, heads, mode="none", slope=0.2, unreachable="zero"):
        self.tape = tape
        self.store = store
        heads = np.asarray(heads, dtype=np.int64)
        self.E = tape.param(store, "D.entity")
        self.R = tape.param(store, "D.relation")
        self.dim = store["D.entity"].shape[1]
        self.prop = None
        if mode == "no_ui":
            self.p = tape.const(np.zeros((heads.size, self.dim)))
        elif mode == "rgcn_style":
            self.p = rgcn_vectors(tape, store, graph, heads, prefix=D_PREFIX)
        else:
            uniq, inv = np.unique(heads, return_inverse=True)
            sub = extract_batch_subgraph(graph, uniq)
            self.prop = Propagation(tape, store, graph, sub, slope, D_PREFIX)
            self.p = ad.gather(self.prop.preference(uniq, unreachable), inv)
        self.heads = heads

    def hidden(self, rels):
        vh = ad.gather(self.E, self.heads)
        vr = ad.gather(self.R, np.asarray(rels, dtype=np.int64))
        return disc_hidden(self.tape, self.store, disc_query_embedding(vh, vr, self.p))

    def pair_scores(self, hidden, query_idx, tails):
        """Scores of (query[query_idx[j]], tails[j]) pairs."""
        uniq, inv = np.unique(np.asarray(tails, dtype=np.int64), return_inverse=True)
        vt = disc_tail(self.tape, self.store, ad.gather(self.E, uniq))
        return ad.rowdot(ad.gather(hidden, np.asarray(query_idx, dtype=np.int64)), ad.gather(vt, inv))


def disc_loss(pos_scores, neg_scores, label_smoothing):
    """Smoothed BCE: positives against 1 - eps, negatives against eps."""
    eps = label_smoothing
    return ad.add(ad.bce_with_logits(pos_scores, 1.0 - eps), ad.bce_with_logits(neg_scores, eps))


def l2_penalty(tape, store, prefix, weight):
    names = store.names(prefix)
    out = ad.sumsq(tape.param(store, names[0]))
    for n in names[1:]:
        out = ad.add(out, ad.sumsq(tape.param(store, n)))
    return ad.scale(out, weight)


# generator

def gen_logits(tape, store, heads, rels, noise, pool_query, pool_ids, slope=0.2):
    """Generator logits for flattened pool entries (pool_query[j], pool_ids[j])."""
    E = tape.param(store, "G.entity")
    R = tape.param(store, "G.relation")
    vq = ad.mul(ad.gather(E, heads), ad.gather(R, rels))
    x = ad.concat([vq, tape.const(noise)], axis=1)
    for layer in range(N_MLP_LAYERS):
        W = tape.param(store, f"G.mlp.{layer}.W")
        b = tape.param(store, f"G.mlp.{layer}.b")
        x = ad.matvec_affine(W, x, b)
        if layer < N_MLP_LAYERS - 1:
            x = ad.leaky_relu(x, slope)
    return ad.rowdot(ad.gather(x, pool_query), ad.gather(E, pool_ids))


def gen_distribution(store, h, r, pool, rng, sigma=1.0, slope=0.2):
    """Sampling distribution over one pool for query (h, r)."""
    pool = np.asarray(pool, dtype=np.int64)
    if pool.size == 0:
        raise ad.ContractError("empty candidate pool")
    dim = store["G.entity"].shape[1]
    noise = sigma * rng.standard_normal((1, dim))
    logits = gen_logits(ad.Tape(), store, np.array([h]), np.array([r]), noise,
                        np.zeros(pool.size, dtype=np.int64), pool, slope)
    return kernels.segment_softmax(logits.value, np.zeros(pool.size, dtype=np.int64), 1)


def sample_negatives(dist, n_g, rng):
    """n_g independent draws (with replacement) from each row of ``dist``; returns column indices."""
    dist = np.atleast_2d(np.asarray(dist, dtype=np.float64))
    if n_g < 1:
        raise ValueError("n_g must be >= 1")
    u = rng.random((dist.shape[0], n_g))
    return kernels.categorical_sample(dist, u)


def reward(scores, pool_query=None, n_queries=1):
    """Softmax of discriminator scores within each pool minus the uniform reference."""
    scores = np.asarray(scores, dtype=np.float64)
    seg = np.zeros(scores.size, dtype=np.int64) if pool_query is None else np.asarray(pool_query)
    soft = kernels.segment_softmax(scores, seg, n_queries)
    size = np.bincount(seg, minlength=n_queries).astype(np.float64)
    return soft - 1.0 / size[seg]


def reinforce_loss(logits, pool_query, n_queries, sample_pos, rewards):
    """-mean over samples of R(a) log G(a); ``sample_pos`` index the flattened pool."""
    logp = ad.segment_log_softmax(logits, pool_query, n_queries)
    picked = ad.gather(logp, sample_pos)
    return ad.scale(ad.total(ad.mul(picked, picked.tape.const(np.asarray(rewards, dtype=np.float64)))),
                    -1.0 / max(len(sample_pos), 1))


def gen_pg_update(store, heads, rels, noise, pool_query, pool_ids, sample_pos, rewards,
                  lr, lambda_g, slope=0.2):
    """One REINFORCE ascent step on the generator; returns the pre-step loss."""
    tape = ad.Tape()
    logits = gen_logits(tape, store, heads, rels, noise, pool_query, pool_ids, slope)
    loss = reinforce_loss(logits, pool_query, len(heads), sample_pos, rewards)
    if lambda_g > 0:
        loss = ad.add(loss, l2_penalty(tape, store, G_PREFIX, lambda_g))
    tape.backward(loss)
    ad.adam_step(store, lr, names=store.names(G_PREFIX))
    return float(loss.value)


# candidate pools

@dataclass
class CandidatePools:
    """Flattened per-query pools: entry j is entity ``ids[j]`` in pool ``query[j]``."""

    query: np.ndarray
    ids: np.ndarray
    ptr: np.ndarray

    def of(self, b):
        return self.ids[self.ptr[b]:self.ptr[b + 1]]


def sample_pools(heads, rels, known, n_entities, n_c, rng):
    """Up to n_c entities per query drawn without replacement, never a known answer."""
    pools = []
    for h, r in zip(heads.tolist(), rels.tolist()):
        keep = np.ones(n_entities, dtype=bool)
        keep[known.answers(h, r)] = False
        allowed = np.flatnonzero(keep)
        if allowed.size > n_c:
            allowed = np.sort(rng.choice(allowed, size=n_c, replace=False))
        pools.append(allowed)
    sizes = np.array([p.size for p in pools], dtype=np.int64)
    ptr = np.zeros(len(pools) + 1, dtype=np.int64)
    np.cumsum(sizes, out=ptr[1:])
    return CandidatePools(
        query=np.repeat(np.arange(len(pools)), sizes),
        ids=np.concatenate(pools) if pools else np.zeros(0, dtype=np.int64),
        ptr=ptr,
    )


def padded_probs(values, pools):
    width = int(np.diff(pools.ptr).max())
    out = np.zeros((len(pools.ptr) - 1, width))
    cols = np.arange(values.size) - pools.ptr[pools.query]
    out[pools.query, cols] = values
    return out


# model

MODES = ("none", "no_ui", "rgcn_style")


class VocabMismatch(ValueError):
    pass


def vocab_digest(vocab):
    """Vocabulary fingerprint as 16 byte values (exact in float32)."""
    h = hashlib.sha256(repr(vocab.signature()).encode("utf-8")).digest()[:16]
    return np.frombuffer(h, dtype=np.uint8).astype(np.float64)


class UPGAN:
    """Parameter stores plus scoring for a trained (or training) model."""

    def __init__(self, dataset, config, store=None):
        self.dataset = dataset
        self.vocab = dataset.vocab
        self.graph = dataset.graph
        self.config = config
        self.store = store if store is not None else ad.ParameterStore()

    @classmethod
    def initialise(cls, dataset, config, kg=None, seed=None):
        seed = config.train_seed if seed is None else seed
        rng = np.random.default_rng([seed, _STREAM_INIT])
        model = cls(dataset, config)
        init_discriminator(model.store, dataset.vocab, config.dim, rng, kg)
        init_generator(model.store, dataset.vocab, config.dim, rng, kg)
        model.project()
        return model

    @property
    def mode(self):
        return self.config.ablation if self.config.ablation in ("no_ui", "rgcn_style") else "none"

    def project(self):
        for name in ("D.entity", "G.entity"):
            ad.project_rows_inplace(self.store, name, self.config.min_norm)

    def discriminator(self, tape, heads):
        return Discriminator(tape, self.store, self.graph, heads, self.mode,
                             self.config.leaky_slope, self.config.unreachable_head)

    def score_all(self, heads, rels):
        """(B, n_entities) discriminator scores, used for ranking."""
        tape = ad.Tape()
        disc = self.discriminator(tape, heads)
        hid = disc.hidden(rels).value
        n = self.vocab.n_entities
        tails = self.store["D.entity"][:n] @ self.store["D.W2"].T + self.store["D.b2"]
        return hid @ tails.T

    def preference(self, heads):
        tape = ad.Tape()
        return self.discriminator(tape, heads).p.value

    # checkpoints

    def tensors(self):
        out = {"meta.mode": np.asarray(MODES.index(self.mode), dtype=np.float64),
               "meta.vocab": vocab_digest(self.vocab)}
        for name in self.store:
            value = self.store[name]
            if name == "D.gnn.Wr":
                for rid in range(value.shape[0]):
                    out[f"D.gnn.Wr.{rid}"] = value[rid]
            else:
                out[name] = value
        return out

    def save(self, path):
        checkpoint.save(path, self.tensors())

    @classmethod
    def from_tensors(cls, tensors, dataset, config):
        wr = sorted((int(k.rsplit(".", 1)[1]), k) for k in tensors if k.startswith("D.gnn.Wr."))
        if "meta.vocab" in tensors and not np.array_equal(tensors["meta.vocab"], vocab_digest(dataset.vocab)):
            raise VocabMismatch("checkpoint was trained on a different vocabulary")
        store = ad.ParameterStore()
        for name in sorted(tensors):
            if not name.startswith(("D.gnn.Wr.", "meta.")):
                store.add(name, tensors[name])
        if wr:
            store.add("D.gnn.Wr", np.stack([tensors[k] for _, k in wr]))
        v = dataset.vocab
        if store["D.entity"].shape[0] != v.n_nodes or store["D.relation"].shape[0] != v.n_relations:
            raise VocabMismatch("checkpoint table sizes do not match the dataset vocabulary")
        if "meta.mode" in tensors:
            config = config.replace(ablation=MODES[int(tensors["meta.mode"])])
        return cls(dataset, config, store)

    @classmethod
    def load(cls, path, dataset, config):
        return cls.from_tensors(checkpoint.load(path), dataset, config)

    def dump_attention(self, heads, path):
        """Write ``head<TAB>user<TAB>weight`` lines: each head's weight on every reachable user."""
        heads = np.asarray(sorted(set(int(h) for h in heads)), dtype=np.int64)
        tape = ad.Tape()
        sub = extract_batch_subgraph(self.graph, heads)
        prop = Propagation(tape, self.store, self.graph, sub, self.config.leaky_slope, D_PREFIX)
        alpha = prop.state().alpha
        names = self.vocab.node_names
        with open(path, "w", encoding="utf-8") as fh:
            for h in heads.tolist():
                if self.graph.depth[h] == UNREACHABLE:
                    continue
                for u, w in sorted(user_weights(self.graph, alpha, h).items()):
                    fh.write(f"{names[h]}\t{names[u]}\t{w:.6g}\n")


# training

@dataclass
class EpochStats:
    epoch: int
    d_loss: float
    g_reward_mean: float
    val_mrr: float

    def line(self):
        return f"{self.epoch}\t{self.d_loss:.6f}\t{self.g_reward_mean:.6f}\t{self.val_mrr:.6f}"


@dataclass
class TrainResult:
    model: UPGAN
    best_epoch: int
    best_val_mrr: float
    log: list = field(default_factory=list)


class _Streams:
    def __init__(self, seed):
        self.shuffle = np.random.default_rng([seed, _STREAM_SHUFFLE])
        self.pool = np.random.default_rng([seed, _STREAM_POOL])
        self.noise = np.random.default_rng([seed, _STREAM_NOISE])
        self.sample = np.random.default_rng([seed, _STREAM_SAMPLE])


def _batch_step(model, heads, rels, golds, known, streams, adversarial, on_step):
    cfg = model.config
    store = model.store
    n_ent = model.vocab.n_entities
    nq = heads.size
    pools = sample_pools(heads, rels, known, n_ent, cfg.n_c, streams.pool)

    # frozen discriminator scores over every pool entry, for the rewards
    tape = ad.Tape()
    disc = model.discriminator(tape, heads)
    hid = disc.hidden(rels)
    pool_scores = disc.pair_scores(hid, pools.query, pools.ids).value
    rewards = reward(pool_scores, pools.query, nq)

    if adversarial:
        noise = cfg.noise_sigma * streams.noise.standard_normal((nq, cfg.dim))
        g_tape = ad.Tape()
        logits = gen_logits(g_tape, store, heads, rels, noise, pools.query, pools.ids, cfg.leaky_slope)
        probs = kernels.segment_softmax(logits.value, pools.query, nq)
    else:
        probs = 1.0 / np.diff(pools.ptr)[pools.query]
    cols = sample_negatives(padded_probs(probs, pools), cfg.n_g, streams.sample)
    sample_pos = (pools.ptr[:-1, None] + cols).reshape(-1)
    sample_rewards = rewards[sample_pos]

    if adversarial:
        loss_g = reinforce_loss(logits, pools.query, nq, sample_pos, sample_rewards)
        if cfg.lambda_g > 0:
            loss_g = ad.add(loss_g, l2_penalty(g_tape, store, G_PREFIX, cfg.lambda_g))
        g_tape.backward(loss_g)
        ad.adam_step(store, cfg.lr, names=store.names(G_PREFIX))

    # discriminator step on positives and the sampled negatives
    query_of_sample = np.repeat(np.arange(nq), cfg.n_g)
    pos = disc.pair_scores(hid, np.arange(nq), golds)
    neg = disc.pair_scores(hid, query_of_sample, pools.ids[sample_pos])
    loss_d = disc_loss(pos, neg, cfg.label_smoothing)
    if cfg.lambda_d > 0:
        loss_d = ad.add(loss_d, l2_penalty(tape, store, D_PREFIX, cfg.lambda_d))
    value = float(loss_d.value)
    if not np.isfinite(value):
        raise TrainingDiverged("discriminator loss became non-finite")
    tape.backward(loss_d)
    ad.adam_step(store, cfg.lr, names=store.names(D_PREFIX))
    model.project()
    if on_step is not None:
        on_step(store)
    return value, float(np.mean(sample_rewards))


def run_phase(model, epochs, adversarial, log_path=None, on_step=None, seed=None):
    """D pretraining (uniform negatives) or the adversarial phase.

    Validation MRR is checked at the start and every ``eval_every`` epochs;
    the best snapshot is kept and restored at the end.
    """
    cfg = model.config
    ds = model.dataset
    seed = cfg.train_seed if seed is None else seed
    streams = _Streams(seed * 2 + int(adversarial))
    known = KnownTriples(ds.vocab, ds.train, ds.valid, ds.test)
    heads_all, rels_all, golds_all = both_direction_queries(ds.train, ds.vocab)
    stopper = EarlyStopping(cfg.patience)
    val = validation_mrr(model.score_all, ds, known)
    stopper.update(0, val, model.store.copy)
    log = []
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, epochs + 1):
            order = streams.shuffle.permutation(heads_all.size)
            d_losses, g_rewards = [], []
            for lo in range(0, order.size, cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                try:
                    d, g = _batch_step(model, heads_all[idx], rels_all[idx], golds_all[idx],
                                       known, streams, adversarial, on_step)
                except ad.NonFiniteGradient as exc:
                    raise TrainingDiverged(str(exc)) from None
                d_losses.append(d)
                g_rewards.append(g)
            stop = False
            if epoch % cfg.eval_every == 0 or epoch == epochs:
                val = validation_mrr(model.score_all, ds, known)
                stop = stopper.update(epoch, val, model.store.copy)
            stats = EpochStats(epoch, float(np.mean(d_losses)), float(np.mean(g_rewards)), val)
            log.append(stats)
            if fh:
                fh.write(stats.line() + "\n")
                fh.flush()
            if stop:
                break
    except TrainingDiverged as exc:
        model.store = stopper.best_state
        exc.last_good = model
        raise
    finally:
        if fh:
            fh.close()
    model.store = stopper.best_state
    return TrainResult(model, stopper.best_epoch, stopper.best, log)


def train_upgan(dataset, config, kg=None, out_dir=None, on_step=None):
    """Discriminator pretraining followed by the adversarial phase.

    ``kg`` is a pretrained EmbeddingModel used to initialise both embedding
    tables. With ``ablation = no_g`` the adversarial phase is skipped.
    """
    model = UPGAN.initialise(dataset, config, kg)
    dlog = os.path.join(out_dir, "dpretrain.log") if out_dir else None
    alog = os.path.join(out_dir, "train.log") if out_dir else None
    result = run_phase(model, config.d_pretrain_epochs, False, dlog, on_step)
    if config.ablation != "no_g" and config.adv_epochs > 0:
        pre = result
        result = run_phase(model, config.adv_epochs, True, alog, on_step)
        result.log = pre.log + result.log
    return result
