"""Interned, immutable knowledge-graph store.

Entities and predicates are interned to dense integer ids in first-seen
order.  Every base predicate ``p`` gets the even id ``2k`` and its inverse
``p__inv`` the odd id ``2k + 1``, so ``inv(p) == p ^ 1``.  Triples are kept
as three parallel int64 arrays sorted by ``(s, p, o)``; the adjacency index
is the sorted composite key ``s * n_predicates + p`` plus offsets into the
object array.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

INVERSE_SUFFIX = "__inv"
INTERACTS = "interacts"
USER_PREFIX = "user:"


class GraphFormatError(ValueError):
    """Malformed graph or interaction input."""


def inverse(p: int) -> int:
    return p ^ 1


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class KnowledgeGraph:
    entity_labels: tuple[str, ...]
    predicate_labels: tuple[str, ...]
    subjects: np.ndarray
    predicates: np.ndarray
    objects: np.ndarray
    _entity_index: dict[str, int] = field(repr=False)
    _predicate_index: dict[str, int] = field(repr=False)
    _keys: np.ndarray = field(repr=False)
    _starts: np.ndarray = field(repr=False)

    @property
    def n_entities(self) -> int:
        return len(self.entity_labels)

    @property
    def n_predicates(self) -> int:
        return len(self.predicate_labels)

    @property
    def n_triples(self) -> int:
        return len(self.subjects)

    def entity_id(self, label: str) -> int:
        return self._entity_index[label]

    def predicate_id(self, label: str) -> int:
        return self._predicate_index[label]

    def has_entity(self, label: str) -> bool:
        return label in self._entity_index

    def has_predicate(self, label: str) -> bool:
        return label in self._predicate_index

    def triples(self) -> Iterable[tuple[int, int, int]]:
        return zip(self.subjects.tolist(), self.predicates.tolist(), self.objects.tolist())

    def _span(self, e: int, p: int) -> tuple[int, int]:
        key = e * self.n_predicates + p
        i = int(np.searchsorted(self._keys, key))
        if i < len(self._keys) and self._keys[i] == key:
            return int(self._starts[i]), int(self._starts[i + 1])
        return 0, 0

    def neighbors(self, e: int, p: int) -> np.ndarray:
        """Objects ``o`` with ``(e, p, o)`` in the graph, sorted by id."""
        lo, hi = self._span(e, p)
        return self.objects[lo:hi]

    def degree(self, e: int, p: int) -> int:
        lo, hi = self._span(e, p)
        return hi - lo

    def spans(self, es: np.ndarray, p: int | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised ``(start, degree)`` of the ``(e, p)`` buckets.

        Returns start offsets into :attr:`objects` and bucket sizes; size 0
        where the bucket is empty.
        """
        es = np.asarray(es, dtype=np.int64)
        keys = es * self.n_predicates + np.asarray(p, dtype=np.int64)
        idx = np.searchsorted(self._keys, keys)
        idx_c = np.minimum(idx, len(self._keys) - 1) if len(self._keys) else idx
        if len(self._keys):
            hit = self._keys[idx_c] == keys
            start = np.where(hit, self._starts[idx_c], 0)
            deg = np.where(hit, self._starts[idx_c + 1] - self._starts[idx_c], 0)
        else:
            start = np.zeros_like(keys)
            deg = np.zeros_like(keys)
        return start, deg

    def predicates_of(self, e: int) -> list[int]:
        lo = int(np.searchsorted(self._keys, e * self.n_predicates))
        hi = int(np.searchsorted(self._keys, (e + 1) * self.n_predicates))
        return [int(k % self.n_predicates) for k in self._keys[lo:hi]]

    def out_edges(self, e: int) -> Iterable[tuple[int, int]]:
        """All ``(p, o)`` leaving ``e``, ordered by predicate then object."""
        lo = int(np.searchsorted(self._keys, e * self.n_predicates))
        hi = int(np.searchsorted(self._keys, (e + 1) * self.n_predicates))
        s0, s1 = int(self._starts[lo]), int(self._starts[hi])
        return zip(self.predicates[s0:s1].tolist(), self.objects[s0:s1].tolist())

    def contains(self, s: int, p: int, o: int) -> bool:
        nb = self.neighbors(s, p)
        i = int(np.searchsorted(nb, o))
        return i < len(nb) and nb[i] == o


def _assemble(entity_labels, predicate_labels, s, p, o, cls=KnowledgeGraph, **extra):
    n_p = len(predicate_labels)
    n_e = len(entity_labels)
    # inverse closure, then dedup on the packed (s, p, o) key
    s_all = np.concatenate([s, o]).astype(np.int64)
    p_all = np.concatenate([p, p ^ 1]).astype(np.int64)
    o_all = np.concatenate([o, s]).astype(np.int64)
    packed = (s_all * n_p + p_all) * max(n_e, 1) + o_all
    packed = np.unique(packed)
    o_all = packed % max(n_e, 1)
    sp = packed // max(n_e, 1)
    s_all = sp // n_p if n_p else sp
    p_all = sp % n_p if n_p else sp
    keys, first = np.unique(sp, return_index=True)
    starts = np.append(first, len(sp)).astype(np.int64)
    return cls(
        entity_labels=tuple(entity_labels),
        predicate_labels=tuple(predicate_labels),
        subjects=_readonly(s_all),
        predicates=_readonly(p_all),
        objects=_readonly(o_all),
        _entity_index={lab: i for i, lab in enumerate(entity_labels)},
        _predicate_index={lab: i for i, lab in enumerate(predicate_labels)},
        _keys=_readonly(keys),
        _starts=_readonly(starts),
        **extra,
    )


class _Interner:
    def __init__(self, labels: Sequence[str] = ()):
        self.labels = list(labels)
        self.index = {lab: i for i, lab in enumerate(self.labels)}

    def __call__(self, label: str) -> int:
        i = self.index.get(label)
        if i is None:
            i = self.index[label] = len(self.labels)
            self.labels.append(label)
        return i


class _PredicateInterner(_Interner):
    def __call__(self, label: str) -> int:
        if label.endswith(INVERSE_SUFFIX):
            return super().__call__(label[: -len(INVERSE_SUFFIX)]) ^ 1
        i = self.index.get(label)
        if i is None:
            i = self.index[label] = len(self.labels)
            self.labels.append(label)
            self.index[label + INVERSE_SUFFIX] = i + 1
            self.labels.append(label + INVERSE_SUFFIX)
        return i


def build_graph(triples: Iterable[Sequence[str]]) -> KnowledgeGraph:
    """Build a graph from string-labelled ``(head, relation, tail)`` triples.

    A relation label ending in ``__inv`` is read as the inverse of its base
    predicate.  Duplicates are dropped silently.
    """
    ents, preds = _Interner(), _PredicateInterner()
    s, p, o = [], [], []
    for n, t in enumerate(triples, 1):
        if len(t) != 3:
            raise GraphFormatError(f"triple {n}: expected 3 fields, got {len(t)}")
        h, r, tl = (str(x) for x in t)
        if not h or not r or not tl:
            raise GraphFormatError(f"triple {n}: empty label")
        s.append(ents(h))
        p.append(preds(r))
        o.append(ents(tl))
    return _assemble(
        ents.labels, preds.labels,
        np.asarray(s, dtype=np.int64), np.asarray(p, dtype=np.int64), np.asarray(o, dtype=np.int64),
    )


def read_triples(path: str | Path) -> list[tuple[str, str, str]]:
    """Parse a tab-separated ``head<TAB>relation<TAB>tail`` file."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(parts):
                raise GraphFormatError(f"{path}:{n}: expected head<TAB>relation<TAB>tail")
            out.append((parts[0], parts[1], parts[2]))
    return out


def load_graph(path: str | Path) -> KnowledgeGraph:
    return build_graph(read_triples(path))


@dataclass(frozen=True, eq=False)
class AugmentedGraph(KnowledgeGraph):
    """A knowledge graph with user entities and ``interacts`` edges added.

    Users occupy the entity id range ``[user_start, user_end)``.
    """

    user_start: int = 0
    user_end: int = 0
    interacts: int = 0
    item_entities: Mapping[str, int] = field(default_factory=dict, repr=False)
    user_ids: Mapping[str, int] = field(default_factory=dict, repr=False)

    @property
    def n_users(self) -> int:
        return self.user_end - self.user_start

    def is_user(self, e: int) -> bool:
        return self.user_start <= e < self.user_end

    def user(self, label: str) -> int:
        return self.user_ids[label]

    def item(self, label: str) -> int:
        try:
            return self.item_entities[label]
        except KeyError:
            raise KeyError(f"item {label!r} is not mapped to an entity") from None

    def items_of(self, u: int) -> np.ndarray:
        return self.neighbors(u, self.interacts)


def merge_interactions(
    kg: KnowledgeGraph,
    interactions: Iterable[tuple[str, str]],
    item_map: Mapping[str, str] | None = None,
    users: Iterable[str] = (),
) -> AugmentedGraph:
    """Add users and their ``interacts`` edges to ``kg``.

    ``item_map`` maps item labels to entity labels (identity when omitted);
    item entities not already in the graph become isolated entities.
    ``users`` lists users to add even if they have no interactions here, so
    that user ids stay stable across splits.  User labels are stored with a
    ``user:`` prefix to keep them disjoint from KG entity labels.
    """
    ents = _Interner(kg.entity_labels)
    preds = _PredicateInterner(kg.predicate_labels)
    if kg.has_predicate(INTERACTS):
        raise GraphFormatError(f"KG already uses the reserved predicate {INTERACTS!r}")
    pairs = list(interactions)
    item_entities: dict[str, int] = {}

    def item_entity(m: str) -> int:
        e = item_entities.get(m)
        if e is None:
            if item_map is None:
                lab = m
            else:
                try:
                    lab = item_map[m]
                except KeyError:
                    raise GraphFormatError(f"item {m!r} has no entity mapping") from None
            e = item_entities[m] = ents(lab)
        return e

    if item_map is not None:
        for m in item_map:
            item_entity(m)
    for _, m in pairs:
        item_entity(m)

    user_start = len(ents.labels)
    user_ids: dict[str, int] = {}

    def user_entity(u: str) -> int:
        e = user_ids.get(u)
        if e is None:
            lab = USER_PREFIX + u
            if lab in ents.index:
                raise GraphFormatError(f"user label {lab!r} collides with a KG entity")
            e = user_ids[u] = ents(lab)
        return e

    for u in users:
        user_entity(u)
    for u, _ in pairs:
        user_entity(u)
    user_end = len(ents.labels)
    interacts = preds(INTERACTS)

    s = np.concatenate([kg.subjects, np.asarray([user_ids[u] for u, _ in pairs], dtype=np.int64)])
    p = np.concatenate([kg.predicates, np.full(len(pairs), interacts, dtype=np.int64)])
    o = np.concatenate([kg.objects, np.asarray([item_entities[m] for _, m in pairs], dtype=np.int64)])
    return _assemble(
        ents.labels, preds.labels, s, p, o, cls=AugmentedGraph,
        user_start=user_start, user_end=user_end, interacts=interacts,
        item_entities=item_entities, user_ids=user_ids,
    )
