import dataclasses

import numpy as np
import pytest
import torch

from rgrec.graph import AugmentedGraph, build_graph, merge_interactions


def random_augmented(seed, n_ent=8, n_pred=3, n_tr=14, n_users=4, n_int=8, n_items=4):
    """Small random KG plus random interactions; at most ``n_ent + n_users``
    entities."""
    rng = np.random.default_rng(seed)
    tr = [(f"e{rng.integers(n_ent)}", f"r{rng.integers(n_pred)}", f"e{rng.integers(n_ent)}") for _ in range(n_tr)]
    kg = build_graph(tr or [("e0", "r0", "e1")])
    items = [f"e{i}" for i in range(min(n_items, n_ent))]
    item_map = {m: m for m in items if kg.has_entity(m)} or {"e0": "e0"}
    pool = sorted(item_map)
    inter = sorted({(f"u{rng.integers(n_users)}", pool[rng.integers(len(pool))]) for _ in range(n_int)})
    return merge_interactions(kg, inter, item_map)


def augmented_view(kg, users, interacts="interacts"):
    """Treat a plain KG (that already contains ``interacts`` edges) as an
    augmented graph; used for hand-built fragments whose users also carry
    non-interaction edges."""
    ids = sorted(kg.entity_id(u) for u in users)
    base = {f.name: getattr(kg, f.name) for f in dataclasses.fields(kg)}
    return AugmentedGraph(**base, user_start=ids[0], user_end=ids[-1] + 1, interacts=kg.predicate_id(interacts),
                          user_ids={u: kg.entity_id(u) for u in users})


@pytest.fixture
def songs():
    """Song example: the user listened to Red and Katy Parry; Style is the
    held-out item to explain."""
    triples = [
        ("user", "interacts", "Red"),
        ("user", "interacts", "Katy Parry"),
        ("Red", "singer", "Taylor Swift"),
        ("Style", "singer", "Taylor Swift"),
        ("user", "motherTongue", "English"),
        ("Style", "language", "English"),
        ("Katy Parry", "nationality", "U.S.A."),
        ("Taylor Swift", "nationality", "U.S.A."),
    ]
    return augmented_view(build_graph(triples), ["user"])


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
