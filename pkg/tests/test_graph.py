import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgrec.graph import (
    INTERACTS,
    GraphFormatError,
    build_graph,
    inverse,
    load_graph,
    merge_interactions,
)

labels = st.sampled_from([f"e{i}" for i in range(8)])
relations = st.sampled_from(["r0", "r1", "r2"])
triple_lists = st.lists(st.tuples(labels, relations, labels), min_size=1, max_size=30)


def test_single_triple_gets_its_inverse():
    g = build_graph([("A", "singer", "B")])
    assert g.n_triples == 2
    a, b = g.entity_id("A"), g.entity_id("B")
    p = g.predicate_id("singer")
    assert g.contains(a, p, b)
    assert g.contains(b, inverse(p), a)
    assert g.predicate_labels[inverse(p)] == "singer__inv"
    assert g.neighbors(b, g.predicate_id("singer__inv")).tolist() == [a]


def test_duplicates_are_dropped():
    g = build_graph([("A", "p", "B"), ("A", "p", "B")])
    assert g.n_triples == 2


def test_inverse_label_in_input_means_reverse_edge():
    g = build_graph([("A", "p", "B"), ("B", "p__inv", "A")])
    assert g.n_triples == 2


def test_neighbors_sorted_and_empty():
    g = build_graph([("A", "p", "C"), ("A", "p", "B"), ("C", "q", "A")])
    a = g.entity_id("A")
    assert g.neighbors(a, g.predicate_id("p")).tolist() == sorted([g.entity_id("B"), g.entity_id("C")])
    assert len(g.neighbors(a, g.predicate_id("q"))) == 0


def test_wrong_arity_reports_position():
    with pytest.raises(GraphFormatError, match="triple 2"):
        build_graph([("A", "p", "B"), ("A", "p")])


def test_file_parse_error_has_line_number(tmp_path):
    f = tmp_path / "kg.txt"
    f.write_text("1\t0\t2\n3\t4\n")
    with pytest.raises(GraphFormatError, match=r"kg.txt:2"):
        load_graph(f)


def test_integer_tokens_load(tmp_path):
    f = tmp_path / "kg.txt"
    f.write_text("0\t0\t1\n1\t1\t2\n\n")
    g = load_graph(f)
    assert g.n_entities == 3 and g.n_triples == 4


def test_merge_empty_interactions_adds_nothing():
    kg = build_graph([("A", "p", "B")])
    g = merge_interactions(kg, [])
    assert g.n_users == 0
    assert g.n_entities == kg.n_entities
    assert (g.predicates == g.interacts).sum() == 0


def test_merge_one_pair():
    kg = build_graph([("A", "p", "B")])
    g = merge_interactions(kg, [("u1", "A")])
    assert g.n_entities == kg.n_entities + 1
    assert g.n_triples == kg.n_triples + 2
    assert g.items_of(g.user("u1")).tolist() == [g.entity_id("A")]


def test_merge_unmapped_item_names_it():
    kg = build_graph([("A", "p", "B")])
    with pytest.raises(GraphFormatError, match="'song9'"):
        merge_interactions(kg, [("u1", "song9")], item_map={"A": "A"})


def test_merge_rejects_reserved_predicate():
    kg = build_graph([("A", INTERACTS, "B")])
    with pytest.raises(GraphFormatError):
        merge_interactions(kg, [("u", "A")])


def test_songs_user_neighbors(songs):
    u = songs.entity_id("user")
    got = {songs.entity_labels[x] for x in songs.neighbors(u, songs.interacts)}
    assert got == {"Red", "Katy Parry"}


@given(triple_lists)
@settings(max_examples=60, deadline=None)
def test_inverse_symmetry_and_adjacency(triples):
    g = build_graph(triples)
    stored = set(g.triples())
    assert len(stored) == g.n_triples
    for s, p, o in stored:
        assert (o, inverse(p), s) in stored
    rebuilt = set()
    for e in range(g.n_entities):
        for p in range(g.n_predicates):
            nb = g.neighbors(e, p)
            assert np.all(np.diff(nb) > 0)
            rebuilt |= {(e, p, int(o)) for o in nb}
    assert rebuilt == stored


@given(triple_lists)
@settings(max_examples=30, deadline=None)
def test_build_is_deterministic(triples):
    a, b = build_graph(triples), build_graph(triples)
    assert a.entity_labels == b.entity_labels
    assert a.predicate_labels == b.predicate_labels
    assert np.array_equal(a.subjects, b.subjects) and np.array_equal(a.objects, b.objects)


@given(triple_lists, st.lists(st.tuples(st.sampled_from(["u0", "u1", "u2"]), labels), max_size=12))
@settings(max_examples=60, deadline=None)
def test_users_only_touch_interacts(triples, pairs):
    kg = build_graph(triples)
    pairs = [(u, m) for u, m in pairs if kg.has_entity(m)]
    g = merge_interactions(kg, pairs)
    for s, p, o in g.triples():
        if g.is_user(s):
            assert p == g.interacts
        if g.is_user(o):
            assert p == inverse(g.interacts)
    assert (g.predicates == g.interacts).sum() == len(set(pairs))
