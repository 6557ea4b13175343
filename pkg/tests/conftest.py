import numpy as np
import pytest

from upgan.config import RunConfig
from upgan.data import SynthSpec, prepare, synth_data
from upgan.graph import TripleStore, Vocab, build_graph

TINY_SPEC = SynthSpec(n_items=20, n_clusters=2, n_creators=5, n_countries=2, n_tags=8,
                      n_users=10, interactions_per_user=4)


def make_graph(entities, relations, users=(), items=(), kg=(), ui=(), add_inverses=True):
    """Graph from name-level triples; ``ui`` holds (user, item) pairs."""
    vocab = Vocab(entities, relations, users=users, items=items)
    kg_ids = [(vocab.node(h), vocab.relation(r), vocab.node(t)) for h, r, t in kg]
    ui_ids = [(vocab.node(u), vocab.interact_id, vocab.node(i)) for u, i in ui]
    store = TripleStore(vocab, kg_ids, ui_ids)
    return vocab, store, build_graph(vocab, store, add_inverses)


@pytest.fixture
def diamond():
    # u interacts with i1 and i2, both linked to e
    return make_graph(
        ["i1", "i2", "e"], ["r"], users=["u"], items=["i1", "i2"],
        kg=[("i1", "r", "e"), ("i2", "r", "e")], ui=[("u", "i1"), ("u", "i2")],
    )


@pytest.fixture
def six_node():
    # two users, two items, one attribute, one deeper attribute
    return make_graph(
        ["i1", "i2", "a", "b"], ["r1", "r2"], users=["u1", "u2"], items=["i1", "i2"],
        kg=[("i1", "r1", "a"), ("i2", "r1", "a"), ("a", "r2", "b"), ("i2", "r2", "b")],
        ui=[("u1", "i1"), ("u2", "i1"), ("u2", "i2")],
    )


def random_layered_graph(rng, n_entities=20, n_users=6, n_relations=3, n_kg=30, n_ui=10):
    entities = [f"e{i}" for i in range(n_entities)]
    users = [f"u{i}" for i in range(n_users)]
    items = entities[: max(2, n_entities // 3)]
    relations = [f"r{i}" for i in range(n_relations)]
    kg = {(entities[rng.integers(n_entities)], relations[rng.integers(n_relations)],
           entities[rng.integers(n_entities)]) for _ in range(n_kg)}
    kg = [t for t in kg if t[0] != t[2]]
    ui = {(users[rng.integers(n_users)], items[rng.integers(len(items))]) for _ in range(n_ui)}
    return make_graph(entities, relations, users, items, sorted(kg), sorted(ui))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**kw):
    base = dict(dim=8, k_core_user=1, k_core_item=1, entity_min_triples=1, batch_size=16,
                pretrain_epochs=4, d_pretrain_epochs=2, adv_epochs=2, eval_every=2, patience=0,
                pretrain_lr=0.01, lr=0.01, n_c=16, n_g=4)
    base.update(kw)
    return RunConfig(**base)


def tiny_dataset(seed=0, strength=1.0):
    raw, _ = synth_data(SynthSpec(**{**TINY_SPEC.__dict__, "strength": strength}), seed)
    return prepare(raw, tiny_config(split_seed=seed))


@pytest.fixture(scope="session")
def tiny():
    return tiny_dataset()


# acceptance verdict lines, shown in the terminal summary

VERDICTS = []


@pytest.fixture(scope="session")
def verdicts():
    return VERDICTS


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
