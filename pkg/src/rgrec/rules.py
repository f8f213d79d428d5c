"""Chain rules for the ``interacts`` head: mining, matching, CWA scoring, ranking.

A rule is the predicate sequence of its body.  A grounding of a body for a
pair ``(u, m)`` is a walk ``u -p1-> e1 -p2-> ... -ph-> m`` that

* never uses the edge ``(u, interacts, m)`` or its inverse, and
* never immediately walks back over the edge it just used
  (``a -p-> b -p^-1-> a``).

Revisiting entities is otherwise allowed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp

from .graph import AugmentedGraph, KnowledgeGraph, inverse

log = logging.getLogger(__name__)

CWA, ROTATE, TRANSE = "cwa", "rotate", "transe"
STRATEGIES = (CWA, ROTATE, TRANSE)
STRATEGY_TAGS = {CWA: "CWA", ROTATE: "RotatE", TRANSE: "TransE"}
_TAG_STRATEGY = {v: k for k, v in STRATEGY_TAGS.items()}


class RuleConfigError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Rule:
    body: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.body)

    def labels(self, g: KnowledgeGraph) -> tuple[str, ...]:
        return tuple(g.predicate_labels[p] for p in self.body)

    def describe(self, g: KnowledgeGraph) -> str:
        return ",".join(self.labels(g))


@dataclass(frozen=True)
class RuleScore:
    rule: Rule
    strategy: str
    value: float
    estimated: bool = False


@dataclass(frozen=True)
class RuleSet:
    """An ordered, duplicate-free sequence of rules, optionally scored."""

    rules: tuple[Rule, ...]
    scores: tuple[RuleScore, ...] | None = None

    def __post_init__(self):
        if len(set(self.rules)) != len(self.rules):
            raise ValueError("duplicate rule bodies")
        if self.scores is not None and [s.rule for s in self.scores] != list(self.rules):
            raise ValueError("scores must align with rules")

    def __len__(self) -> int:
        return len(self.rules)

    def __iter__(self) -> Iterator[Rule]:
        return iter(self.rules)

    def __getitem__(self, i) -> Rule:
        return self.rules[i]

    def length_histogram(self) -> dict[int, int]:
        hist: dict[int, int] = {}
        for r in self.rules:
            hist[len(r)] = hist.get(len(r), 0) + 1
        return dict(sorted(hist.items()))

    def save(self, path: str | Path, g: KnowledgeGraph) -> None:
        """Write ``score<TAB>strategy<TAB>p1,...,ph`` lines.

        Unscored rules are written with score ``nan`` and strategy ``none``.
        """
        with open(path, "w", encoding="utf-8") as fh:
            for i, r in enumerate(self.rules):
                if self.scores is None:
                    fh.write(f"nan\tnone\t{r.describe(g)}\n")
                else:
                    s = self.scores[i]
                    fh.write(f"{s.value!r}\t{STRATEGY_TAGS[s.strategy]}\t{r.describe(g)}\n")

    @classmethod
    def load(cls, path: str | Path, g: KnowledgeGraph) -> "RuleSet":
        rules, scores = [], []
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    score, tag, body = line.split("\t")
                    rule = Rule(tuple(g.predicate_id(p) for p in body.split(",")))
                except (ValueError, KeyError) as exc:
                    raise ValueError(f"{path}:{n}: bad rule line ({exc})") from None
                rules.append(rule)
                if tag != "none":
                    scores.append(RuleScore(rule, _TAG_STRATEGY[tag], float(score)))
        if scores and len(scores) != len(rules):
            raise ValueError(f"{path}: mixed scored and unscored rules")
        return cls(tuple(rules), tuple(scores) if scores else None)


def canonical(rules: Iterable[Rule]) -> list[Rule]:
    return sorted(set(rules), key=lambda r: (len(r), r.body))


# ---------------------------------------------------------------------------
# Mining


def _is_backtrack(p_prev: int, a: int, q: int, c: int) -> bool:
    """Step ``b -q-> c`` after ``a -p_prev-> b`` reverses the same edge."""
    return q == inverse(p_prev) and c == a


def _expand(g: KnowledgeGraph, start: int, depth: int, backward: bool):
    """Layers of walk states from ``start``.

    Forward layer ``d`` maps entity ``x`` to states ``(seq, prev, tag)``:
    ``seq`` is the predicate sequence from ``start`` to ``x``, ``prev`` the
    entity before ``x`` and ``tag`` the first entity after ``start``.
    Backward layers walk edges into ``start``; ``seq`` then runs from ``x``
    to ``start``, ``prev`` is the entity after ``x`` and ``tag`` the entity
    adjacent to ``start``.
    """
    layers = [{start: {((), -1, -1)}}]
    for d in range(1, depth + 1):
        nxt: dict[int, set] = {}
        for x, states in layers[-1].items():
            edges = list(g.out_edges(x))
            for seq, prev, tag in states:
                for p, y in edges:
                    if backward:
                        # edge y -q-> x with q = inv(p)
                        q = inverse(p)
                        if seq and _is_backtrack(q, y, seq[0], prev):
                            continue
                        st = ((q,) + seq, x, y if d == 1 else tag)
                    else:
                        if seq and _is_backtrack(seq[-1], prev, p, y):
                            continue
                        st = (seq + (p,), x, y if d == 1 else tag)
                    nxt.setdefault(y, set()).add(st)
        layers.append(nxt)
    return layers


def _join(fwd, bwd, u: int, m: int, max_len: int, found: set) -> None:
    for h in range(2, max_len + 1):
        f, b = math.ceil(h / 2), h // 2
        F, B = fwd[f], bwd[b]
        small, large = (F, B) if len(F) <= len(B) else (B, F)
        for x in small:
            if x not in large:
                continue
            for fseq, fprev, ffirst in F[x]:
                # the only way a forward walk of depth <= 2 can use the target
                # edge is as its first step
                if ffirst == m:
                    continue
                for bseq, bnext, blast in B[x]:
                    if blast == u:
                        continue
                    seq = fseq + bseq
                    if seq in found:
                        continue
                    if bseq and _is_backtrack(fseq[-1], fprev, bseq[0], bnext):
                        continue
                    found.add(seq)


def _pairs_from_graph(g: AugmentedGraph) -> np.ndarray:
    mask = (g.predicates == g.interacts)
    return np.stack([g.subjects[mask], g.objects[mask]], axis=1)


def mine_rules(
    g: AugmentedGraph,
    max_len: int = 3,
    pair_cap: int | None = None,
    seed: int = 0,
    pairs: np.ndarray | None = None,
    progress: bool = False,
) -> RuleSet:
    """Predicate sequences of all groundings of length ``2..max_len`` between
    the user and item of each ``interacts`` edge.

    Meet-in-the-middle search: forward ``ceil(max_len / 2)`` hops from the
    user, backward ``floor(max_len / 2)`` hops from the item.  With
    ``pair_cap`` set, that many pairs are sampled uniformly (seeded).
    """
    if max_len < 2:
        raise RuleConfigError(f"max rule length must be >= 2, got {max_len}")
    if max_len > 4:
        return _mine_rules_generic(g, max_len, pair_cap, seed, pairs)
    if pairs is None:
        pairs = _pairs_from_graph(g)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pair_cap is not None and len(pairs) > pair_cap:
        pick = np.sort(np.random.default_rng(seed).choice(len(pairs), size=pair_cap, replace=False))
        pairs = pairs[pick]
    a, b = math.ceil(max_len / 2), max_len // 2
    found: set[tuple[int, ...]] = set()
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    fwd_cache: tuple[int, list] | None = None
    bwd_cache: dict[int, list] = {}
    it = order
    if progress:
        from tqdm import tqdm
        it = tqdm(order, desc="mining", unit="pair")
    for i in it:
        u, m = int(pairs[i, 0]), int(pairs[i, 1])
        if fwd_cache is None or fwd_cache[0] != u:
            fwd_cache = (u, _expand(g, u, a, backward=False))
        bw = bwd_cache.get(m)
        if bw is None:
            bw = bwd_cache[m] = _expand(g, m, b, backward=True)
        _join(fwd_cache[1], bw, u, m, max_len, found)
    return RuleSet(tuple(Rule(s) for s in sorted(found, key=lambda s: (len(s), s))))


def _mine_rules_generic(g, max_len, pair_cap, seed, pairs) -> RuleSet:
    # long rules: plain per-pair DFS with explicit edge exclusion
    if pairs is None:
        pairs = _pairs_from_graph(g)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pair_cap is not None and len(pairs) > pair_cap:
        pick = np.sort(np.random.default_rng(seed).choice(len(pairs), size=pair_cap, replace=False))
        pairs = pairs[pick]
    found: set = set()
    for u, m in pairs.tolist():
        found |= enumerate_paths(g, u, m, max_len, exclude=(u, g.interacts, m))
    found = {s for s in found if len(s) >= 2}
    return RuleSet(tuple(Rule(s) for s in sorted(found, key=lambda s: (len(s), s))))


def enumerate_paths(g: KnowledgeGraph, u: int, m: int, max_len: int, exclude=None) -> set[tuple[int, ...]]:
    """Exhaustive DFS: predicate sequences of every grounding ``u -> m``."""
    banned = set()
    if exclude is not None:
        s, p, o = exclude
        banned = {(s, p, o), (o, inverse(p), s)}
    out: set[tuple[int, ...]] = set()

    def walk(x, prev, seq):
        if seq and x == m:
            out.add(tuple(seq))
        if len(seq) == max_len:
            return
        for p, y in g.out_edges(x):
            if (x, p, y) in banned:
                continue
            if seq and _is_backtrack(seq[-1], prev, p, y):
                continue
            seq.append(p)
            walk(y, x, seq)
            seq.pop()

    walk(u, -1, [])
    return out


# ---------------------------------------------------------------------------
# Matching


def match_rule(g: AugmentedGraph, u: int, m: int, rule: Rule | Sequence[int]) -> bool:
    """Whether ``(u, m)`` has a grounding of the rule body in ``g``."""
    body = rule.body if isinstance(rule, Rule) else tuple(rule)
    banned = {(u, g.interacts, m), (m, inverse(g.interacts), u)}
    states = {(u, -1)}
    for k, p in enumerate(body):
        need_prev = k + 1 < len(body) and body[k + 1] == inverse(p)
        nxt = set()
        for x, prev in states:
            for y in g.neighbors(x, p).tolist():
                if (x, p, y) in banned:
                    continue
                if k and prev == y and p == inverse(body[k - 1]):
                    continue
                nxt.add((y, x if need_prev else -1))
        if not nxt:
            return False
        states = nxt
    return any(x == m for x, _ in states)


class WalkCounter:
    """Non-backtracking walk counts along predicate sequences.

    ``counts(body, rows)`` is the sparse ``len(rows) x n_entities`` matrix
    whose ``[i, x]`` entry counts walks from ``rows[i]`` to ``x`` that follow
    ``body`` without immediately reversing an edge.  The recursion is

        M_0 = S,  M_1 = S A_1,
        M_{k+1} = M_k A_{k+1} - [p_{k+1} = inv p_k] M_{k-1} (D_k - [p_k = inv p_{k-1}] I)

    with ``D_k`` the diagonal of ``p_k`` out-degrees.
    """

    def __init__(self, g: KnowledgeGraph):
        self.g = g
        self._adj: dict[int, sp.csr_matrix] = {}
        self._deg: dict[int, np.ndarray] = {}

    def adjacency(self, p: int) -> sp.csr_matrix:
        a = self._adj.get(p)
        if a is None:
            g = self.g
            mask = g.predicates == p
            n = g.n_entities
            a = sp.csr_matrix(
                (np.ones(int(mask.sum()), dtype=np.int64), (g.subjects[mask], g.objects[mask])), shape=(n, n)
            )
            self._adj[p] = a
            self._deg[p] = np.asarray(a.sum(axis=1)).ravel()
        return a

    def degrees(self, p: int) -> np.ndarray:
        self.adjacency(p)
        return self._deg[p]

    def counts(self, body: Sequence[int], rows: np.ndarray, budget: list | None = None) -> sp.csr_matrix:
        n = self.g.n_entities
        rows = np.asarray(rows, dtype=np.int64)
        sel = sp.csr_matrix((np.ones(len(rows), dtype=np.int64), (np.arange(len(rows)), rows)), shape=(len(rows), n))
        prev2, prev1 = None, sel
        for k, p in enumerate(body):
            cur = prev1 @ self.adjacency(p)
            if k > 0 and p == inverse(body[k - 1]):
                d = self.degrees(body[k - 1]).copy()
                if k > 1 and body[k - 1] == inverse(body[k - 2]):
                    d -= 1
                base = prev2 if prev2 is not None else sel
                cur = cur - base @ sp.diags(d)
                cur.eliminate_zeros()
            if budget is not None:
                budget[0] += cur.nnz
            prev2, prev1 = prev1, cur.tocsr()
        return prev1

    def return_counts(self, body: Sequence[int], entities: np.ndarray) -> np.ndarray:
        """Walks along ``body`` from each entity back to itself."""
        entities = np.asarray(entities, dtype=np.int64)
        if len(body) == 0:
            return np.ones(len(entities), dtype=np.int64)
        c = self.counts(body, entities)
        return np.asarray(c[np.arange(len(entities)), entities]).ravel()


def match_pairs(
    g: AugmentedGraph,
    users: np.ndarray,
    items: np.ndarray,
    rule: Rule,
    counter: WalkCounter | None = None,
    chunk: int = 512,
) -> np.ndarray:
    """Vectorised :func:`match_rule` over many ``(user, item-entity)`` pairs."""
    counter = counter or WalkCounter(g)
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    out = np.zeros(len(users), dtype=bool)
    if len(users) == 0:
        return out
    body = rule.body
    uniq, inv_idx = np.unique(users, return_inverse=True)
    has_edge = _has_interacts(g, users, items)
    total = np.zeros(len(users), dtype=np.int64)
    for lo in range(0, len(uniq), chunk):
        rows = uniq[lo:lo + chunk]
        sel = np.flatnonzero((inv_idx >= lo) & (inv_idx < lo + len(rows)))
        c = counter.counts(body, rows)
        total[sel] = np.asarray(c[inv_idx[sel] - lo, items[sel]]).ravel()
    out = total > 0
    fix = np.flatnonzero(out & has_edge)
    if len(fix) and body[0] == g.interacts:
        if len(body) <= 3:
            # only walks that start with the excluded edge need removing; they
            # are closed walks from the item along the rest of the body
            ret = counter.return_counts(body[1:], np.unique(items[fix]))
            lookup = dict(zip(np.unique(items[fix]).tolist(), ret.tolist()))
            used = np.array([lookup[m] for m in items[fix].tolist()], dtype=np.int64)
            out[fix] = total[fix] - used > 0
        else:
            for i in fix.tolist():
                out[i] = match_rule(g, int(users[i]), int(items[i]), rule)
    return out


def _has_interacts(g: AugmentedGraph, users: np.ndarray, items: np.ndarray) -> np.ndarray:
    start, deg = g.spans(users, g.interacts)
    out = np.zeros(len(users), dtype=bool)
    for i in np.flatnonzero(deg > 0):
        nb = g.objects[start[i]:start[i] + deg[i]]
        j = np.searchsorted(nb, items[i])
        out[i] = j < len(nb) and nb[j] == items[i]
    return out


# ---------------------------------------------------------------------------
# Confidence and ranking


def cwa_confidence(
    g: AugmentedGraph,
    rule: Rule,
    grounding_cap: int | None = 100_000,
    seed: int = 0,
    counter: WalkCounter | None = None,
    chunk: int = 32,
) -> RuleScore | None:
    """Standard (closed-world) confidence of ``interacts <= body``.

    Support is the number of distinct ``(user, x)`` pairs with a body
    grounding that are ``interacts`` edges; the denominator counts all
    grounded pairs.  Users are processed in a seeded random order; once the
    explored-grounding budget is spent the ratio over the users seen so far is
    returned, flagged as an estimate.  Returns ``None`` when the body has no
    grounding at all.
    """
    counter = counter or WalkCounter(g)
    users = np.arange(g.user_start, g.user_end, dtype=np.int64)
    users = users[np.random.default_rng(seed).permutation(len(users))]
    body = rule.body
    support = total = 0
    budget = [0]
    estimated = False
    for lo in range(0, len(users), chunk):
        rows = users[lo:lo + chunk]
        c = counter.counts(body, rows, budget).tocoo()
        u = rows[c.row]
        x = c.col.astype(np.int64)
        grounded = c.data > 0
        u, x = u[grounded], x[grounded]
        is_pos = _has_interacts(g, u, x)
        valid = np.ones(len(u), dtype=bool)
        fix = np.flatnonzero(is_pos)
        if len(fix) and body[0] == g.interacts:
            if len(body) <= 3:
                uniq = np.unique(x[fix])
                ret = dict(zip(uniq.tolist(), counter.return_counts(body[1:], uniq).tolist()))
                used = np.array([ret[m] for m in x[fix].tolist()], dtype=np.int64)
                valid[fix] = c.data[grounded][fix] - used > 0
            else:
                for i in fix.tolist():
                    valid[i] = match_rule(g, int(u[i]), int(x[i]), rule)
        total += int(valid.sum())
        support += int((valid & is_pos).sum())
        if grounding_cap is not None and budget[0] >= grounding_cap and lo + chunk < len(users):
            estimated = True
            break
    if total == 0:
        log.warning("rule %s has no groundings; dropped", rule.body)
        return None
    return RuleScore(rule, CWA, support / total, estimated)


def score_rules_cwa(g: AugmentedGraph, rules: RuleSet, grounding_cap: int | None = 100_000, seed: int = 0) -> list[RuleScore]:
    counter = WalkCounter(g)
    out = []
    for r in rules:
        s = cwa_confidence(g, r, grounding_cap, seed, counter)
        if s is not None:
            out.append(s)
    return out


def rank_rules(scores: Sequence[RuleScore], top: int | None, g: KnowledgeGraph | None = None) -> RuleSet:
    """Top-``top`` rules by score; ties go to shorter, then lexicographically
    smaller bodies (by predicate label when ``g`` is given, else by id)."""
    def key(s: RuleScore):
        body = s.rule.labels(g) if g is not None else s.rule.body
        return (-s.value, len(s.rule), body)

    ranked = sorted(scores, key=key)
    if top is not None:
        ranked = ranked[:top]
    return RuleSet(tuple(s.rule for s in ranked), tuple(ranked))
