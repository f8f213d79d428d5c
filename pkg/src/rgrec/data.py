"""Interaction loading, 6:2:2 splitting and negative sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .graph import GraphFormatError

log = logging.getLogger(__name__)

TRAIN_FRACTION = 0.6
VALID_FRACTION = 0.2


@dataclass(frozen=True, eq=False)
class InteractionSet:
    """Labelled user-item records.

    ``users``/``items`` are integer codes into ``user_labels``/``item_labels``;
    subsets produced by :meth:`take` share the parent's vocabularies.
    """

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    user_labels: tuple[str, ...]
    item_labels: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.users)

    @property
    def n_users(self) -> int:
        return len(self.user_labels)

    @property
    def n_items(self) -> int:
        return len(self.item_labels)

    def take(self, idx) -> "InteractionSet":
        idx = np.asarray(idx, dtype=np.int64)
        return InteractionSet(self.users[idx], self.items[idx], self.labels[idx], self.user_labels, self.item_labels)

    def positives(self) -> "InteractionSet":
        return self.take(np.flatnonzero(self.labels == 1))

    def negatives(self) -> "InteractionSet":
        return self.take(np.flatnonzero(self.labels == 0))

    def pairs(self) -> list[tuple[str, str]]:
        """External ``(user, item)`` label pairs."""
        ul, il = self.user_labels, self.item_labels
        return [(ul[u], il[m]) for u, m in zip(self.users.tolist(), self.items.tolist())]

    def records(self) -> list[tuple[str, str, int]]:
        return [(u, m, int(l)) for (u, m), l in zip(self.pairs(), self.labels.tolist())]

    def concat(self, other: "InteractionSet") -> "InteractionSet":
        assert other.user_labels is self.user_labels or other.user_labels == self.user_labels
        return InteractionSet(
            np.concatenate([self.users, other.users]),
            np.concatenate([self.items, other.items]),
            np.concatenate([self.labels, other.labels]),
            self.user_labels, self.item_labels,
        )


def from_records(records, user_labels=None, item_labels=None) -> InteractionSet:
    """Build an :class:`InteractionSet` from ``(user, item[, label])`` tuples."""
    records = [tuple(str(x) for x in r[:2]) + (int(r[2]) if len(r) > 2 else 1,) for r in records]
    ul = list(user_labels) if user_labels is not None else list(dict.fromkeys(r[0] for r in records))
    il = list(item_labels) if item_labels is not None else list(dict.fromkeys(r[1] for r in records))
    ui = {u: i for i, u in enumerate(ul)}
    ii = {m: i for i, m in enumerate(il)}
    for r in records:
        if r[2] not in (0, 1):
            raise GraphFormatError(f"label must be 0 or 1, got {r[2]}")
    seen = dict.fromkeys((ui[u], ii[m], l) for u, m, l in records)
    arr = np.asarray(list(seen), dtype=np.int64).reshape(-1, 3)
    return InteractionSet(arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].astype(np.int8), tuple(ul), tuple(il))


def _locate_bad_line(path: Path) -> str:
    with open(path, encoding="utf-8") as fh:
        width = None
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3) or not all(parts):
                return f"{path}:{n}: expected user<TAB>item[<TAB>label]"
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                return f"{path}:{n}: inconsistent column count"
            if len(parts) == 3 and parts[2].strip() not in ("0", "1"):
                return f"{path}:{n}: label must be 0 or 1, got {parts[2]!r}"
    return f"{path}: malformed ratings file"


def load_interactions(path: str | Path) -> InteractionSet:
    """Read ``user<TAB>item[<TAB>label]`` lines; missing labels mean 1.

    Exact duplicate records are dropped.
    """
    path = Path(path)
    if path.stat().st_size == 0:
        return from_records([])
    try:
        df = pd.read_csv(
            path, sep="\t", header=None, dtype=str, names=["u", "m", "l"],
            keep_default_na=False, na_filter=False, engine="c",
        )
    except (pd.errors.ParserError, ValueError):
        raise GraphFormatError(_locate_bad_line(path)) from None
    if df.empty:
        return from_records([])
    if (df["u"] == "").any() or (df["m"] == "").any():
        raise GraphFormatError(_locate_bad_line(path))
    lab = df["l"].str.strip()
    if (lab == "").all():
        labels = np.ones(len(df), dtype=np.int8)
    else:
        if not lab.isin(["0", "1"]).all():
            raise GraphFormatError(_locate_bad_line(path))
        labels = lab.to_numpy().astype(np.int8)
    u_codes, u_labels = pd.factorize(df["u"], sort=False)
    m_codes, m_labels = pd.factorize(df["m"], sort=False)
    arr = np.stack([u_codes.astype(np.int64), m_codes.astype(np.int64), labels.astype(np.int64)], axis=1)
    _, first = np.unique(arr, axis=0, return_index=True)
    first.sort()
    arr = arr[first]
    return InteractionSet(
        arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].astype(np.int8),
        tuple(u_labels.tolist()), tuple(m_labels.tolist()),
    )


def save_interactions(data: InteractionSet, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, m, l in data.records():
            fh.write(f"{u}\t{m}\t{l}\n")


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    train: InteractionSet
    valid: InteractionSet
    test: InteractionSet
    seed: int
    train_idx: np.ndarray
    valid_idx: np.ndarray
    test_idx: np.ndarray

    def save_manifest(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name in ("train", "valid", "test"):
            np.savetxt(d / f"{name}.idx", getattr(self, f"{name}_idx"), fmt="%d")


def _split_sizes(n: int, train_fraction: float) -> tuple[int, int, int]:
    n_train_block = math.floor(TRAIN_FRACTION * n)
    n_valid = math.floor(VALID_FRACTION * n)
    n_train = math.floor(train_fraction * n) if train_fraction != TRAIN_FRACTION else n_train_block
    return n_train_block, n_valid, n_train


def split_indices(n: int, seed: int, train_fraction: float = TRAIN_FRACTION):
    """Index triple ``(train, valid, test)`` for ``n`` records.

    Train takes ``floor(0.6 n)``, valid ``floor(0.2 n)``, test the rest.
    A smaller ``train_fraction`` keeps valid/test fixed and trains on the
    first ``floor(train_fraction * n)`` records of the training block.
    """
    if not 0 < train_fraction <= TRAIN_FRACTION:
        raise ValueError(f"train_fraction must lie in (0, {TRAIN_FRACTION}]")
    perm = np.random.default_rng(seed).permutation(n)
    block, n_valid, n_train = _split_sizes(n, train_fraction)
    return perm[:n_train], perm[block:block + n_valid], perm[block + n_valid:]


def split(data: InteractionSet, seed: int, train_fraction: float = TRAIN_FRACTION) -> DatasetSplit:
    """Seeded 6:2:2 split.

    Positives and explicit negatives are split separately with the same
    rule, so a positives-only file splits exactly as floor/floor/remainder.
    """
    if len(data) < 5:
        raise ValueError("need at least 5 records to split")
    parts = [[], [], []]
    for offset, lab in enumerate((1, 0)):
        idx = np.flatnonzero(data.labels == lab)
        if len(idx) == 0:
            continue
        for k, sub in enumerate(split_indices(len(idx), seed + offset, train_fraction)):
            parts[k].append(idx[sub])
    tr, va, te = (np.concatenate(p) if p else np.zeros(0, dtype=np.int64) for p in parts)
    return DatasetSplit(data.take(tr), data.take(va), data.take(te), seed, tr, va, te)


class NegativeSampler:
    """Samples items a user never interacted with, anywhere in the dataset.

    ``universe`` is the full dataset; its positives (all splits) define the
    exclusion sets and its item vocabulary the candidate pool.
    """

    def __init__(self, universe: InteractionSet):
        self.n_items = universe.n_items
        pos = universe.positives()
        keys = np.unique(pos.users * self.n_items + pos.items)
        self._keys = keys
        self._pos_count = np.bincount(keys // self.n_items, minlength=universe.n_users) if len(keys) else np.zeros(universe.n_users, dtype=np.int64)
        self.user_labels = universe.user_labels
        self.item_labels = universe.item_labels

    def is_positive(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        q = np.asarray(users, dtype=np.int64) * self.n_items + np.asarray(items, dtype=np.int64)
        i = np.searchsorted(self._keys, q)
        i = np.minimum(i, len(self._keys) - 1)
        return (self._keys[i] == q) if len(self._keys) else np.zeros(len(q), dtype=bool)

    def free_items(self, u: int) -> np.ndarray:
        lo = np.searchsorted(self._keys, u * self.n_items)
        hi = np.searchsorted(self._keys, (u + 1) * self.n_items)
        taken = self._keys[lo:hi] - u * self.n_items
        return np.setdiff1d(np.arange(self.n_items), taken, assume_unique=True)

    def _sample_one_each(self, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = np.full(len(users), -1, dtype=np.int64)
        if self.n_items == 0:
            return out
        n_free = self.n_items - self._pos_count[users]
        dense = n_free * 2 < self.n_items
        todo = np.flatnonzero(~dense & (n_free > 0))
        while len(todo):
            cand = rng.integers(0, self.n_items, size=len(todo))
            ok = ~self.is_positive(users[todo], cand)
            out[todo[ok]] = cand[ok]
            todo = todo[~ok]
        for i in np.flatnonzero(dense & (n_free > 0)):
            free = self.free_items(int(users[i]))
            out[i] = free[rng.integers(0, len(free))]
        return out

    def ctr_negatives(self, positives: InteractionSet, seed: int) -> InteractionSet:
        """Pair each positive with one sampled negative, interleaved.

        Users who interacted with every item are skipped with a warning.
        """
        rng = np.random.default_rng(seed)
        neg = self._sample_one_each(positives.users, rng)
        keep = neg >= 0
        if not keep.all():
            log.warning("%d positives skipped: user interacted with every item", int((~keep).sum()))
        n = int(keep.sum())
        users = np.empty(2 * n, dtype=np.int64)
        items = np.empty(2 * n, dtype=np.int64)
        labels = np.empty(2 * n, dtype=np.int8)
        users[0::2] = users[1::2] = positives.users[keep]
        items[0::2] = positives.items[keep]
        items[1::2] = neg[keep]
        labels[0::2], labels[1::2] = 1, 0
        return InteractionSet(users, items, labels, positives.user_labels, positives.item_labels)

    def fill_negatives(self, data: InteractionSet, seed: int) -> InteractionSet:
        """Balance ``data`` 1:1, keeping explicit negatives and sampling the gap."""
        pos, neg = data.positives(), data.negatives()
        gap = len(pos) - len(neg)
        if gap <= 0:
            return data
        extra = self.ctr_negatives(pos.take(np.arange(len(pos) - gap, len(pos))), seed).negatives()
        return pos.concat(neg).concat(extra)

    def topk_candidates(self, u: int, m: int, n: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
        """``n`` distinct non-interacted items followed by the positive ``m``.

        Returns the candidate array and the shortfall (0 unless fewer than
        ``n`` free items exist).
        """
        free = self.free_items(u)
        k = min(n, len(free))
        picked = rng.choice(free, size=k, replace=False) if k else np.zeros(0, dtype=np.int64)
        return np.append(picked, m).astype(np.int64), n - k


def sample_ctr_negatives(positives: InteractionSet, universe: InteractionSet, seed: int) -> InteractionSet:
    """One never-interacted item per positive, interleaved with the positives."""
    return NegativeSampler(universe).ctr_negatives(positives, seed)


def sample_topk_candidates(
    u: int, m: int, sampler: NegativeSampler, n: int, seed: int
) -> tuple[np.ndarray, int]:
    return sampler.topk_candidates(u, m, n, np.random.default_rng(seed))
