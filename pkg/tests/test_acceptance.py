"""Acceptance suite. Every criterion records one PASS/FAIL line, listed in the
terminal summary. The synthetic experiment (criteria 7 and 8) is marked slow."""
import time
from collections import Counter, deque
from fractions import Fraction

import numpy as np
import pytest

from conftest import TINY_SPEC, make_graph, tiny_config
from upgan import autodiff as ad
from upgan.cli import main
from upgan.config import RunConfig
from upgan.data import (
    SynthSpec, bfs_kg_subgraph, dataset_from_arrays, kcore_filter, prepare, split,
    synth_data, synth_generate,
)
from upgan.evaluation import KnownTriples, aggregate, both_direction_queries, evaluate, rank_all
from upgan.gnn import init_gnn_params, path_weight_oracle, preference_vectors
from upgan.graph import Vocab
from upgan.kg_embed import (
    DISTMULT, TRANSE, EmbeddingModel, distmult_score, init_embeddings, one_n_loss_var,
    one_n_targets, pretrain,
)
from upgan.model import (
    UPGAN, Discriminator, disc_loss, gen_logits, init_generator, l2_penalty, reinforce_loss,
    reward, sample_pools, train_upgan,
)


@pytest.fixture
def verdict(verdicts):
    def record(n, ok, detail):
        verdicts.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return record


# 1. linear-combination property

def layered_graph(rng, max_nodes=30):
    """Random interaction-augmented graph with depth at most 3 by construction."""
    n_users = int(rng.integers(2, 6))
    sizes = [int(rng.integers(2, 8)) for _ in range(3)]
    while n_users + sum(sizes) > max_nodes:
        sizes[int(np.argmax(sizes))] -= 1
    layers = [[f"L{d}_{i}" for i in range(s)] for d, s in enumerate(sizes, 1)]
    users = [f"u{i}" for i in range(n_users)]
    entities = [n for layer in layers for n in layer]
    rels = ["r0", "r1", "r2"]
    ui = {(users[rng.integers(n_users)], i) for i in layers[0]}
    ui |= {(users[rng.integers(n_users)], layers[0][rng.integers(sizes[0])]) for _ in range(4)}
    kg = set()
    for d in (1, 2):
        for n in layers[d]:
            for _ in range(int(rng.integers(1, 3))):
                kg.add((layers[d - 1][rng.integers(sizes[d - 1])], rels[rng.integers(3)], n))
    for _ in range(3):
        d = int(rng.integers(3))
        a, b = rng.choice(sizes[d], size=2) if sizes[d] > 1 else (0, 0)
        if a != b:
            kg.add((layers[d][a], rels[rng.integers(3)], layers[d][b]))
    return make_graph(entities, rels, users, layers[0], sorted(kg), sorted(ui))


def test_criterion_1_linear_combination(verdict):
    start = time.perf_counter()
    worst_rel, worst_sum, n_heads = 0.0, 0.0, 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        vocab, _, g = layered_graph(rng)
        assert vocab.n_nodes <= 30 and g.max_depth <= 3
        store = ad.ParameterStore()
        store.add("D.entity", rng.normal(size=(vocab.n_nodes, 6)))
        init_gnn_params(store, 6, vocab.n_relations, rng)
        heads = np.flatnonzero(g.depth > 0)
        p, prop = preference_vectors(ad.Tape(), store, g, heads)
        state = prop.state()
        for row, h in enumerate(heads):
            w = path_weight_oracle(g, state.alpha, h)
            combo = sum(wu * state.tilde_v[u] for u, wu in w.items())
            rel = np.linalg.norm(p.value[row] - combo) / max(np.linalg.norm(combo), 1e-300)
            worst_rel = max(worst_rel, rel)
            worst_sum = max(worst_sum, abs(sum(w.values()) - 1))
            n_heads += 1
    elapsed = time.perf_counter() - start
    ok = worst_rel < 1e-6 and worst_sum < 1e-6 and elapsed < 10
    verdict(1, ok, f"{n_heads} heads on 50 graphs, max rel err {worst_rel:.1e}, "
                   f"max |sum w - 1| {worst_sum:.1e}, {elapsed:.1f}s")


# 2. gradient suite

def test_criterion_2_gradients(verdict, rng):
    start = time.perf_counter()
    errs = {}

    store = ad.ParameterStore()
    init_embeddings(store, 8, 4, 5, rng)
    heads, rels = np.array([0, 3, 5]), np.array([1, 2, 0])
    targets = one_n_targets([[1, 2], [6], [0, 4]], 8, 0.1)
    errs["distmult 1-N"] = ad.grad_check(
        lambda tape, s: one_n_loss_var(tape, s, heads, rels, targets, 8), store, step=1e-5)

    vocab, kgs, g = make_graph(
        ["i1", "i2", "a", "b"], ["r1", "r2"], users=["u1", "u2"], items=["i1", "i2"],
        kg=[("i1", "r1", "a"), ("i2", "r1", "a"), ("a", "r2", "b"), ("i2", "r2", "b")],
        ui=[("u1", "i1"), ("u2", "i1"), ("u2", "i2")],
    )
    ds = dataset_from_arrays(vocab, kgs.kg, [], [], kgs.ui)
    m = UPGAN.initialise(ds, tiny_config(dim=3), seed=4)
    # move the scoring layers away from their near-identity start
    for name in ("D.W1", "D.W2", "D.b1", "D.b2"):
        m.store[name][...] += 0.5 * rng.normal(size=m.store[name].shape)
    qh = np.array([vocab.node(n) for n in ("i1", "i2", "a", "b")])
    qr = np.array([0, 1, 2, 3])
    qt = np.array([vocab.node(n) for n in ("a", "b", "i1", "i2")])
    neg = np.array([vocab.node(n) for n in ("b", "a", "i2", "a", "i1", "b", "a", "i1")])

    def d_loss(tape, s):
        d = Discriminator(tape, s, ds.graph, qh)
        hid = d.hidden(qr)
        pos = d.pair_scores(hid, np.arange(4), qt)
        negs = d.pair_scores(hid, np.repeat(np.arange(4), 2), neg)
        return ad.add(disc_loss(pos, negs, 0.1), l2_penalty(tape, s, "D.", 1e-3))

    errs["discriminator through both stages"] = ad.grad_check(
        d_loss, m.store, step=1e-5, names=m.store.names("D."))

    gstore = ad.ParameterStore()
    init_generator(gstore, vocab, 4, rng)
    noise = rng.normal(size=(2, 4))
    pq, pid = np.array([0, 0, 0, 1, 1]), np.array([1, 2, 3, 0, 4])
    weights = rng.normal(size=5)

    def g_loss(tape, s):
        return ad.total(ad.mul(gen_logits(tape, s, np.array([0, 2]), np.array([1, 0]), noise, pq, pid),
                               tape.const(weights)))

    errs["generator logits"] = ad.grad_check(g_loss, gstore, step=1e-5)
    elapsed = time.perf_counter() - start
    ok = max(errs.values()) < 1e-3 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    verdict(2, ok, f"max rel err: {detail}; {elapsed:.1f}s")


# 3. REINFORCE oracle

def test_criterion_3_reinforce(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    vocab = Vocab([f"e{i}" for i in range(6)], ["r"])
    store = ad.ParameterStore()
    init_generator(store, vocab, 4, rng)
    store["G.entity"][...] *= 0.2
    heads, rels, noise = np.array([0]), np.array([0]), rng.normal(size=(1, 4))
    pq, pid = np.zeros(3, dtype=np.int64), np.array([2, 3, 5])
    R = np.array([0.25, -0.05, -0.2])

    def probs():
        lg = gen_logits(ad.Tape(), store, heads, rels, noise, pq, pid).value
        e = np.exp(lg - lg.max())
        return e / e.sum()

    # every outcome a once, weighted by G(a) R(a): the exact REINFORCE expectation
    G = probs()
    tape = ad.Tape()
    tape.backward(reinforce_loss(gen_logits(tape, store, heads, rels, noise, pq, pid), pq, 1,
                                 np.arange(3), 3 * G * R))
    worst = 0.0
    for name in store:
        flat = store[name].reshape(-1)
        grad = store.grad(name).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + 1e-6
            up = probs() @ R
            flat[i] = orig - 1e-6
            down = probs() @ R
            flat[i] = orig
            # the loss is the negated objective
            worst = max(worst, abs(-grad[i] - (up - down) / 2e-6))
    elapsed = time.perf_counter() - start
    verdict(3, worst < 1e-4 and elapsed < 5, f"max |REINFORCE - grad E[R]| {worst:.1e}, {elapsed:.1f}s")


# 4. reward zero-sum

def test_criterion_4_reward_zero_sum(verdict, tiny):
    rng = np.random.default_rng(0)
    worst = 0.0
    nq = 1000
    # discriminator scores over sampled pools
    m = UPGAN.initialise(tiny, tiny_config())
    known = KnownTriples(tiny.vocab, tiny.train, tiny.valid, tiny.test)
    heads = rng.integers(tiny.vocab.n_nodes, size=nq)
    rels = rng.integers(tiny.vocab.n_relations, size=nq)
    pools = sample_pools(heads, rels, known, tiny.vocab.n_entities, 16, rng)
    tape = ad.Tape()
    d = m.discriminator(tape, heads)
    scores = d.pair_scores(d.hidden(rels), pools.query, pools.ids).value
    r = reward(scores, pools.query, nq)
    worst = max(worst, np.abs(np.bincount(pools.query, weights=r, minlength=nq)).max())
    # and arbitrary pool sizes and score scales
    sizes = rng.integers(1, 60, size=nq)
    query = np.repeat(np.arange(nq), sizes)
    r = reward(rng.normal(size=query.size) * rng.uniform(0.1, 30), query, nq)
    worst = max(worst, np.abs(np.bincount(query, weights=r, minlength=nq)).max())
    verdict(4, worst < 1e-6, f"2 x {nq} pools, max |sum R| {worst:.1e}")


# 5. ranking oracle

def test_criterion_5_ranking_oracle(verdict):
    rng = np.random.default_rng(5)
    n = 20
    vocab = Vocab([f"e{i}" for i in range(n)], ["r0", "r1", "r2"])
    triples = sorted({(int(rng.integers(n)), int(rng.integers(3)), int(rng.integers(n))) for _ in range(90)})
    perm = rng.permutation(len(triples))
    parts = [np.array([triples[i] for i in perm[a:b]]) for a, b in ((0, 60), (60, 72), (72, len(triples)))]
    train, valid, test = parts
    store = ad.ParameterStore()
    # coarse embeddings so scores tie now and then
    store.add("KG.entity", np.round(rng.normal(size=(n, 3)), 0))
    store.add("KG.relation", np.round(rng.normal(size=(vocab.n_relations, 3)), 0))
    model = EmbeddingModel(store, DISTMULT, n)
    known = KnownTriples(vocab, train, valid, test)
    report = evaluate(model.score_all, test, vocab, known)

    truth = set()
    for h, r, t in np.concatenate(parts).tolist():
        truth.add((h, r, t))
        truth.add((t, r + 4, h))
    E, R = store["KG.entity"], store["KG.relation"]
    oracle = []
    for h, r, t in test.tolist():
        for qh, qr, gold in ((h, r, t), (t, r + 4, h)):
            target = distmult_score(E[qh], R[qr], E[gold])
            better = sum(1 for c in range(n) if c != gold and (qh, qr, c) not in truth
                         and distmult_score(E[qh], R[qr], E[c]) > target)
            oracle.append(better + 1)
    q = len(oracle)
    expect = {"MR": Fraction(sum(oracle), q), "MRR": sum(Fraction(1, x) for x in oracle) / q}
    for k in (1, 3, 10):
        expect[f"H@{k}"] = Fraction(sum(x <= k for x in oracle), q)
    got = report.metrics()
    same_ranks = report.ranks.tolist() == oracle
    # each float metric must be the correctly rounded value of the exact rational
    same_metrics = all(got[k] == float(v) for k, v in expect.items())
    matched = sum(1 for a, b in zip(report.ranks.tolist(), oracle) if a == b)
    verdict(5, same_ranks and same_metrics,
            f"{q} queries (both directions), {matched}/{q} ranks identical, metrics exact: {same_metrics}")


# 6. pipeline invariants

def undirected_dist(triples, seeds):
    adj = {}
    for h, _, t in triples:
        adj.setdefault(h, set()).add(t)
        adj.setdefault(t, set()).add(h)
    dist = {s: 0 for s in seeds if s in adj}
    todo = deque(dist)
    while todo:
        n = todo.popleft()
        for m in adj[n]:
            if m not in dist:
                dist[m] = dist[n] + 1
                todo.append(m)
    return dist


def test_criterion_6_pipeline(verdict):
    problems = []
    raw, _ = synth_data(SynthSpec(n_users=150), seed=0)
    for k in (2, 5, 10):
        out = kcore_filter(raw.interactions, k, k)
        uc, ic = Counter(u for u, _ in out), Counter(i for _, i in out)
        if not all(uc[u] >= k and ic[i] >= k for u, i in out) or kcore_filter(out, k, k) != out:
            problems.append(f"k-core {k}")

    # long random chains hanging off the synthetic KG so the radius matters
    rng = np.random.default_rng(1)
    kg = list(raw.triples)
    for c in range(20):
        prev = f"item{int(rng.integers(100)):03d}"
        for j in range(8):
            kg.append((prev, "next", f"chain{c}_{j}"))
            prev = f"chain{c}_{j}"
    seeds = sorted({i for _, i in raw.interactions})[:30]
    kept = bfs_kg_subgraph(kg, seeds, 4)
    before = undirected_dist(kg, seeds)
    after = undirected_dist(kept, seeds)
    far = [tr for tr in kept if max(before[tr[0]], before[tr[2]]) > 4 or max(after[tr[0]], after[tr[2]]) > 4]
    if far:
        problems.append(f"{len(far)} triples beyond radius 4")
    if any(before[h] <= 4 and before[t] <= 4 and (h, r, t) not in set(kept) for h, r, t in kg):
        problems.append("in-radius triple dropped")

    lonely = [(f"item{i:03d}", "has_tag", f"unique{i}") for i in range(5)]
    triples = sorted(set(raw.triples)) + lonely
    train, valid, test = split(triples, seed=0)
    n = len(triples)
    ratios = (len(train) / n, len(valid) / n, len(test) / n)
    if any(abs(a - b) > 0.01 for a, b in zip(ratios, (0.8, 0.1, 0.1))):
        problems.append(f"split ratios {ratios}")
    if not all(tr in train for tr in lonely):
        problems.append("unique-entity triple outside train")
    if Counter(train + valid + test) != Counter(triples):
        problems.append("split changed the triple multiset")
    detail = f"k-core k=2,5,10; {len(kept)}/{len(kg)} triples within radius; split " + \
             "/".join(f"{r:.3f}" for r in ratios)
    verdict(6, not problems, detail + ("; " + ", ".join(problems) if problems else ""))


# 7 and 8. directional synthetic experiment

SYNTH_SEEDS = (0, 1, 2)


def synth_config(seed):
    return RunConfig(dim=32, k_core_user=1, k_core_item=1, entity_min_triples=1,
                     pretrain_epochs=600, batch_size=32, pretrain_lr=0.01,
                     d_pretrain_epochs=300, adv_epochs=20, lr=0.003, n_c=1024, n_g=20,
                     eval_every=10, patience=5, split_seed=seed, train_seed=seed)


def heldout_mrr(score_fn, ds):
    known = KnownTriples(ds.vocab, ds.train, ds.valid, ds.test)
    h, r, g = both_direction_queries(ds.test, ds.vocab)
    return float(np.mean(1.0 / rank_all(score_fn, h, r, g, known, ds.vocab.n_entities)))


@pytest.fixture(scope="module")
def synth_results():
    start = time.perf_counter()
    out = {}
    for strength in (1.0, 0.0):
        for seed in SYNTH_SEEDS:
            raw, _ = synth_data(SynthSpec(strength=strength), seed=seed)
            cfg = synth_config(seed)
            ds = prepare(raw, cfg)
            kg = pretrain(ds, cfg)
            cfg = cfg.replace(batch_size=64)
            row = {"entities": ds.vocab.n_entities, "distmult": heldout_mrr(kg.score_all, ds)}
            for name, ablation in (("upgan", "none"), ("no_ui", "no_ui")):
                res = train_upgan(ds, cfg.replace(ablation=ablation), kg)
                row[name] = heldout_mrr(res.model.score_all, ds)
            out[strength, seed] = row
    return out, time.perf_counter() - start


def table(results, strength):
    return " ".join(f"[seed {s}: upgan {results[strength, s]['upgan']:.3f} no_ui {results[strength, s]['no_ui']:.3f} "
                    f"distmult {results[strength, s]['distmult']:.3f}]" for s in SYNTH_SEEDS)


@pytest.mark.slow
def test_criterion_7_directional(verdict, synth_results):
    results, elapsed = synth_results
    mean = lambda strength, key: float(np.mean([results[strength, s][key] for s in SYNTH_SEEDS]))
    planted_gap = mean(1.0, "upgan") - mean(1.0, "no_ui")
    beats_distmult = mean(1.0, "upgan") >= mean(1.0, "distmult")
    control_gap = mean(0.0, "upgan") - mean(0.0, "no_ui")
    ok = planted_gap >= 0.01 and beats_distmult and -0.02 <= control_gap <= 0.02 and elapsed < 900
    n_ent = sorted({r["entities"] for r in results.values()})
    verdict(7, ok, f"planted gap {planted_gap:+.4f} (need >= +0.01), upgan {mean(1.0, 'upgan'):.4f} vs "
                   f"distmult {mean(1.0, 'distmult'):.4f}, control gap {control_gap:+.4f} (need within 0.02), "
                   f"entities {n_ent}, {elapsed:.0f}s; planted {table(results, 1.0)} control {table(results, 0.0)}")


@pytest.mark.slow
def test_criterion_8_ablation_order(verdict, synth_results):
    results, _ = synth_results
    wins = sum(results[1.0, s]["no_ui"] <= results[1.0, s]["upgan"] for s in SYNTH_SEEDS)
    verdict(8, wins >= 2, f"no_ui <= upgan in {wins}/3 seeds")


# 9. determinism of the train verb

def test_criterion_9_determinism(verdict, tmp_path):
    synth_generate(tmp_path / "raw", TINY_SPEC, seed=3)
    cfg = tmp_path / "run.cfg"
    cfg.write_text("dim = 8\nk_core_user = 1\nk_core_item = 1\nentity_min_triples = 1\nbatch_size = 32\n"
                   "pretrain_epochs = 5\nd_pretrain_epochs = 3\nadv_epochs = 3\neval_every = 1\n"
                   "patience = 0\nn_c = 32\nn_g = 8\nlr = 0.01\npretrain_lr = 0.01\ntrain_seed = 11\n")
    raw = tmp_path / "raw"
    main(["prepare", "--triples", str(raw / "triples.tsv"), "--interactions", str(raw / "interactions.tsv"),
          "--alignment", str(raw / "alignment.tsv"), "--out", str(tmp_path / "ds"), "--config", str(cfg)])
    blobs = []
    for run in ("a", "b"):
        code = main(["train", "--data", str(tmp_path / "ds"), "--out", str(tmp_path / run), "--config", str(cfg)])
        assert code == 0
        blobs.append((tmp_path / run / "best.upgn").read_bytes())
    verdict(9, blobs[0] == blobs[1], f"two train runs, best.upgn {len(blobs[0])} bytes, identical: {blobs[0] == blobs[1]}")


# 10. norm constraint after every optimizer step

def test_criterion_10_norms(verdict, tiny):
    mins = {"distmult": [], "transe": [], "upgan": []}
    cfg = tiny_config(pretrain_epochs=6, d_pretrain_epochs=3, adv_epochs=3)

    def watch(key, names):
        return lambda store: mins[key].append(min(np.linalg.norm(store[n], axis=1).min() for n in names))

    kg = pretrain(tiny, cfg, kind=DISTMULT, on_step=watch("distmult", ["KG.entity"]))
    pretrain(tiny, cfg, kind=TRANSE, on_step=watch("transe", ["KG.entity"]))
    train_upgan(tiny, cfg, kg, on_step=watch("upgan", ["D.entity", "G.entity"]))
    worst = min(min(v) for v in mins.values())
    steps = {k: len(v) for k, v in mins.items()}
    ok = all(steps.values()) and worst >= 1 - 1e-6
    verdict(10, ok, f"steps checked {steps}, min entity-row norm {worst:.9f}")
