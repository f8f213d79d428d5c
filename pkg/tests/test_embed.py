import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rgrec.embed import (
    EmbeddingModel,
    KgeConfig,
    KgeNet,
    base_triples,
    compose,
    composition_confidence,
    relation_distance,
    train_embeddings,
)
from rgrec.errors import CheckpointError
from rgrec.gradcheck import check_gradients
from rgrec.graph import build_graph, inverse
from rgrec.rules import ROTATE, TRANSE, Rule


def _rot(phases):
    phases = np.atleast_2d(np.asarray(phases, dtype=float))
    return EmbeddingModel(ROTATE, np.zeros((1, phases.shape[1]), complex), phases)


def _trans(vectors):
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
    return EmbeddingModel(TRANSE, np.zeros((1, vectors.shape[1])), vectors)


def test_default_dimension():
    assert KgeConfig().dim == 1024


def test_rotate_phases_add():
    m = _rot([[0.0], [math.pi / 4]])
    assert compose(m, (2, 2)) == pytest.approx([math.pi / 2])


def test_identity_rotation_leaves_vector():
    m = _rot([[0.0, 0.0], [0.3, 1.7]])
    assert compose(m, (2, 0)) == pytest.approx([0.3, 1.7])


def test_transe_sum():
    m = _trans([[1.0, 0.0], [0.0, 2.0]])
    assert compose(m, (0, 2)).tolist() == [1.0, 2.0]


def test_exact_composition_has_zero_confidence():
    m = _rot([[math.pi / 2], [math.pi / 4]])
    s = composition_confidence(m, Rule((2, 2)), head=0)
    assert s.value == 0.0


def test_unit_phase_gap_confidence():
    m = _rot([[math.pi / 2], [0.0]])
    s = composition_confidence(m, Rule((2, 2)), head=0)
    assert s.value == pytest.approx(-math.sqrt(2), abs=1e-9)
    assert s.value == pytest.approx(-abs(1j - 1), abs=1e-12)


def test_transe_exact_composition():
    m = _trans([[1.0, 1.0], [0.5, 0.25]])
    # body (p1, p1) sums to (1, 0.5); make the head match it
    m.relations[0] = [1.0, 0.5]
    assert composition_confidence(m, Rule((2, 2)), head=0).value == 0.0


def test_inverse_is_conjugate_and_negation():
    r = _rot([[0.4, -1.1]])
    assert np.array_equal(r.relation(1), -r.relation(0))
    t = _trans([[0.4, -1.1]])
    assert np.array_equal(t.relation(inverse(0)), -t.relation(0))


phase_rows = st.lists(st.floats(-10, 10, allow_nan=False), min_size=3, max_size=3)


@given(st.lists(phase_rows, min_size=3, max_size=3), st.sampled_from([ROTATE, TRANSE]))
@settings(max_examples=80, deadline=None)
def test_confidence_properties(rows, kind):
    m = _rot(rows) if kind == ROTATE else _trans(rows)
    head = 0
    for body in [(2, 4), (4, 2), (2, 2, 5)]:
        assert composition_confidence(m, Rule(body), head).value <= 0
    # order of the product does not matter
    a = composition_confidence(m, Rule((2, 4)), head).value
    b = composition_confidence(m, Rule((4, 2)), head).value
    assert a == pytest.approx(b, abs=1e-9)
    # p followed by its inverse cancels out
    plain = relation_distance(m, m.relation(head), compose(m, (2,)))
    loop = relation_distance(m, m.relation(head), compose(m, (2, 4, 5)))
    assert plain == pytest.approx(loop, abs=1e-9)


@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=6))
@settings(max_examples=50, deadline=None)
def test_rotation_entries_unit_modulus(phases):
    m = _rot([phases])
    assert np.allclose(np.abs(np.exp(1j * compose(m, (0, 0, 1)))), 1.0, atol=0, rtol=1e-15)


def test_rotate_distance_matches_complex_norm():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(-9, 9, 7), rng.uniform(-9, 9, 7)
    m = _rot([a])
    assert relation_distance(m, a, b) == pytest.approx(np.linalg.norm(np.exp(1j * a) - np.exp(1j * b)), abs=1e-12)


def _chain():
    return build_graph([("a", "next", "b"), ("b", "next", "c"), ("c", "next", "d")])


def _distances(model, triples):
    h, r, t = triples[:, 0], triples[:, 1], triples[:, 2]
    if model.kind == ROTATE:
        diff = model.entities[h] * np.exp(1j * model.relations[r]) - model.entities[t]
        return np.abs(diff).sum(1)
    return np.abs(model.entities[h] + model.relations[r] - model.entities[t]).sum(1)


@pytest.mark.parametrize("kind", [ROTATE, TRANSE])
def test_chain_positives_closer_than_corruptions(kind):
    g = _chain()
    cfg = KgeConfig(kind=kind, dim=8, negatives=3, lr=0.01, steps=2000, batch_size=3, seed=1, margin=2.0)
    model = train_embeddings(g, cfg)
    pos = base_triples(g)
    corrupt = np.array([(h, r, t) for h in range(4) for r in range(1) for t in range(4)
                        if (h, r, t) not in set(map(tuple, pos.tolist()))])
    assert _distances(model, pos).mean() < _distances(model, corrupt).mean()
    tenth = len(model.losses) // 10
    assert np.mean(model.losses[-tenth:]) < np.mean(model.losses[:tenth])
    if kind == ROTATE:
        assert np.allclose(np.abs(np.exp(1j * model.relations)), 1.0)


def test_training_is_deterministic():
    cfg = KgeConfig(dim=4, negatives=2, steps=30, batch_size=2, lr=0.01)
    a, b = train_embeddings(_chain(), cfg), train_embeddings(_chain(), cfg)
    assert np.array_equal(a.entities, b.entities) and a.losses == b.losses


def test_bad_config():
    with pytest.raises(ValueError):
        KgeConfig(kind="distmult")
    with pytest.raises(ValueError):
        KgeConfig(dim=0)


@pytest.mark.parametrize("kind", [ROTATE, TRANSE])
def test_checkpoint_roundtrip(tmp_path, kind):
    model = train_embeddings(_chain(), KgeConfig(kind=kind, dim=3, steps=5, batch_size=2, negatives=2))
    model.save(tmp_path / "e.bin")
    back = EmbeddingModel.load(tmp_path / "e.bin")
    assert back.kind == kind
    assert np.array_equal(back.entities, model.entities)
    assert np.array_equal(back.relations, model.relations)


def test_checkpoint_truncated_and_version(tmp_path):
    model = train_embeddings(_chain(), KgeConfig(dim=3, steps=2, batch_size=2, negatives=2))
    p = tmp_path / "e.bin"
    model.save(p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-5])
    with pytest.raises(CheckpointError, match="expected"):
        EmbeddingModel.load(p)
    p.write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(CheckpointError, match="version"):
        EmbeddingModel.load(p)
    p.write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        EmbeddingModel.load(p)


@pytest.mark.parametrize("kind", [ROTATE, TRANSE])
def test_loss_gradient_matches_finite_differences(kind):
    g = build_graph([("a", "p", "b"), ("b", "q", "c"), ("c", "p", "d"), ("d", "q", "a"), ("a", "q", "c")])
    torch.manual_seed(0)
    net = KgeNet(kind, g.n_entities, 2, 3, margin=2.0, eps=2.0, dtype=torch.float64)
    pos = torch.from_numpy(base_triples(g))
    rng = np.random.default_rng(0)
    neg = torch.from_numpy(rng.integers(0, g.n_entities, (len(pos), 3)))
    head = torch.tensor([True, False, True, False, True])
    errs = check_gradients(lambda: net.loss(pos, neg, head, 0.0),
                           {"entity": net.entity, "relation": net.relation})
    assert max(errs.values()) < 1e-4, errs
