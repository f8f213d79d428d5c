"""Time one training epoch and one embedding step on a synthetic graph and
extrapolate to a target dataset size."""

import argparse
import time

import numpy as np
import torch

from rgrec.embed import KgeConfig, train_embeddings
from rgrec.graph import build_graph, merge_interactions
from rgrec.model import TrainingConfig, train
from rgrec.rules import mine_rules
from rgrec.synthetic import SyntheticConfig, generate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--pairs", type=int, default=25_000 * 2, help="training pairs per epoch to extrapolate to")
    ap.add_argument("--kge-steps", type=int, default=100_000)
    ap.add_argument("--kge-dim", type=int, default=1024)
    args = ap.parse_args()
    torch.set_num_threads(1)
    triples, ratings = generate(SyntheticConfig(n_users=600, n_items=800, n_genres=12, n_labels=30,
                                                interactions_per_user=6))
    kg = build_graph([(str(h), f"r{r}", str(t)) for h, r, t in triples])
    pairs = [(f"u{u}", str(m)) for u, m, _ in ratings]
    g = merge_interactions(kg, pairs, {str(m): str(m) for m in range(800)})
    rules = list(mine_rules(g, 3))[:30]
    rng = np.random.default_rng(0)
    users = np.array([g.user(u) for u, _ in pairs] * 2)
    items = np.concatenate([[g.item(m) for _, m in pairs], rng.integers(0, 800, len(pairs))])
    labels = np.concatenate([np.ones(len(pairs)), np.zeros(len(pairs))])
    data = (users, items, labels)
    t0 = time.perf_counter()
    train(g, data, data, rules, None, TrainingConfig(max_epochs=1, patience=1))
    per_pair = (time.perf_counter() - t0) / (2 * len(users))  # train + valid scoring
    print(f"{len(rules)} rules, {len(users)} pairs: {per_pair * 1e6:.1f} us per pair")
    print(f"epoch at {args.pairs} pairs: ~{per_pair * args.pairs:.0f} s")
    t0 = time.perf_counter()
    train_embeddings(g, KgeConfig(dim=args.kge_dim, steps=20))
    step = (time.perf_counter() - t0) / 20
    print(f"embedding step at dim {args.kge_dim}: {step * 1e3:.0f} ms -> {step * args.kge_steps / 3600:.1f} h "
          f"for {args.kge_steps} steps")


if __name__ == "__main__":
    main()
