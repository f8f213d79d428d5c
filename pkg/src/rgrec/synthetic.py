"""Small synthetic datasets with planted rule structure, written in the
integer tab-separated layout of public KG recommendation benchmarks
(``kg_final.txt``: head, relation, tail; ``ratings_final.txt``: user,
item, label).

Items are entities ``0..n_items-1``.  Each user favours a couple of genres
and tends to revisit items similar to ones already liked, so rules through
``genre`` and ``similar`` carry signal while ``label`` is noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class SyntheticConfig:
    n_users: int = 60
    n_items: int = 80
    n_genres: int = 6
    n_labels: int = 10
    interactions_per_user: int = 8
    similar_per_item: int = 2
    favourite_prob: float = 0.8
    seed: int = 0


def generate(cfg: SyntheticConfig) -> tuple[list[tuple[int, int, int]], list[tuple[int, int, int]]]:
    """``(kg_triples, ratings)`` with integer ids; relations are 0 genre,
    1 similar, 2 label."""
    rng = np.random.default_rng(cfg.seed)
    genre_base = cfg.n_items
    label_base = genre_base + cfg.n_genres
    item_genre = rng.integers(0, cfg.n_genres, cfg.n_items)
    triples = set()
    for i in range(cfg.n_items):
        triples.add((i, 0, genre_base + int(item_genre[i])))
        triples.add((i, 2, label_base + int(rng.integers(0, cfg.n_labels))))
        same = np.flatnonzero(item_genre == item_genre[i])
        same = same[same != i]
        if len(same):
            for j in rng.choice(same, size=min(cfg.similar_per_item, len(same)), replace=False):
                triples.add((i, 1, int(j)))
    by_genre = [np.flatnonzero(item_genre == k) for k in range(cfg.n_genres)]
    ratings = []
    for u in range(cfg.n_users):
        fav = rng.choice(cfg.n_genres, size=2, replace=False)
        pool = np.concatenate([by_genre[k] for k in fav])
        liked: set[int] = set()
        tries = 0
        while len(liked) < cfg.interactions_per_user and tries < 50 * cfg.interactions_per_user:
            tries += 1
            if len(pool) and rng.random() < cfg.favourite_prob:
                liked.add(int(rng.choice(pool)))
            else:
                liked.add(int(rng.integers(0, cfg.n_items)))
        ratings += [(u, m, 1) for m in sorted(liked)]
    return sorted(triples), ratings


def write_dataset(directory: str | Path, cfg: SyntheticConfig | None = None) -> dict[str, Path]:
    cfg = cfg or SyntheticConfig()
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    triples, ratings = generate(cfg)
    kg = d / "kg_final.txt"
    rt = d / "ratings_final.txt"
    kg.write_text("".join(f"{h}\t{r}\t{t}\n" for h, r, t in triples))
    rt.write_text("".join(f"{u}\t{m}\t{l}\n" for u, m, l in ratings))
    return {"kg": kg, "interactions": rt}
