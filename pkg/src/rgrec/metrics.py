"""CTR metrics (AUC, F1) and top-k metrics (Hits@k, NDCG@k)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import InteractionSet, NegativeSampler


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and of equal length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(bool)


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative,
    ties counting one half."""
    s, y = _check_binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    r = rankdata(s, method="average")
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def f1(scores, labels, threshold: float = 0.5) -> float:
    s, y = _check_binary(scores, labels)
    pred = s >= threshold
    tp = int((pred & y).sum())
    if tp == 0:
        return 0.0
    precision = tp / int(pred.sum())
    recall = tp / int(y.sum())
    return 2 * precision * recall / (precision + recall)


def candidate_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based rank of the last column among each row of candidate scores.

    Strictly greater competitors count fully, ties count one half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    pos = scores[:, -1:]
    others = scores[:, :-1]
    return 1.0 + (others > pos).sum(1) + 0.5 * (others == pos).sum(1)


def rank_metrics(ranks, k: int) -> tuple[float, float]:
    """``(hits@k, ndcg@k)`` for one relevant item per list."""
    if k < 1:
        raise ValueError("k must be at least 1")
    r = np.asarray(ranks, dtype=np.float64)
    if len(r) == 0:
        return float("nan"), float("nan")
    hit = r <= k
    gain = np.where(hit, 1.0 / np.log2(r + 1.0), 0.0)
    return float(hit.mean()), float(gain.mean())


class Scorer(Protocol):
    def score(self, users: np.ndarray, items: np.ndarray, seed) -> np.ndarray: ...

    def score_candidates(self, users: np.ndarray, candidates: np.ndarray, seed) -> np.ndarray: ...


@dataclass
class Report:
    values: dict[str, list[float]]
    config: Mapping[str, object] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def mean(self, metric: str) -> float:
        return float(np.mean(self.values[metric]))

    def std(self, metric: str) -> float:
        v = self.values[metric]
        return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0

    def table(self) -> str:
        width = max((len(k) for k in self.values), default=6)
        lines = [f"{'metric':<{width}}  {'mean':>8}  {'std':>8}  runs"]
        for k, v in self.values.items():
            lines.append(f"{k:<{width}}  {self.mean(k):8.4f}  {self.std(k):8.4f}  {len(v)}")
        return "\n".join(lines)

    def lines(self) -> str:
        return "\n".join(f"{k}\t{self.mean(k)!r}\t{self.std(k)!r}" for k in self.values)

    def render(self) -> str:
        parts = ["# config"]
        parts += [f"# {k} = {v}" for k, v in self.config.items()]
        parts += [f"# {n}" for n in self.notes]
        parts += ["", self.table(), "", self.lines()]
        return "\n".join(parts) + "\n"


def _seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


def evaluate(
    scorers: Scorer | Sequence[Scorer],
    test: InteractionSet,
    sampler: NegativeSampler,
    repeats: int = 5,
    seed: int = 0,
    ks: Sequence[int] = (5, 10),
    n_negatives: int = 100,
    threshold: float = 0.5,
) -> Report:
    """CTR and top-k metrics over ``repeats`` rounds with derived seeds.

    ``scorers`` is either one scorer reused every round or one scorer per
    round (e.g. independently trained models).  Each round samples fresh
    1:1 negatives for the CTR protocol and ``n_negatives`` free items per
    test positive for the top-k protocol.
    """
    if not isinstance(scorers, Sequence):
        scorers = [scorers] * repeats
    if len(scorers) != repeats:
        raise ValueError(f"expected {repeats} scorers, got {len(scorers)}")
    pos = test.positives()
    if len(pos) == 0:
        raise ValueError("test split has no positives")
    values: dict[str, list[float]] = {"auc": [], "f1": []}
    for k in ks:
        values[f"hits@{k}"] = []
        values[f"ndcg@{k}"] = []
    notes = []
    for rep, scorer in enumerate(scorers):
        ctr = sampler.fill_negatives(test, _seed(seed, rep, 0))
        s = scorer.score(ctr.users, ctr.items, _seed(seed, rep, 1))
        values["auc"].append(auc(s, ctr.labels))
        values["f1"].append(f1(s, ctr.labels, threshold))

        rng = np.random.default_rng(_seed(seed, rep, 2))
        cands, keep = [], []
        for i, (u, m) in enumerate(zip(pos.users.tolist(), pos.items.tolist())):
            c, miss = sampler.topk_candidates(u, m, n_negatives, rng)
            if not miss:
                cands.append(c)
                keep.append(i)
        if len(keep) < len(pos) and rep == 0:
            notes.append(f"{len(pos) - len(keep)} test positives skipped: fewer than {n_negatives} free items")
        mat = scorer.score_candidates(
            pos.users[keep], np.array(cands, dtype=np.int64).reshape(-1, n_negatives + 1), _seed(seed, rep, 3)
        )
        ranks = candidate_ranks(mat)
        for k in ks:
            h, n = rank_metrics(ranks, k)
            values[f"hits@{k}"].append(h)
            values[f"ndcg@{k}"].append(n)
    return Report(values, notes=notes)

