"""Write the planted-rule synthetic dataset used by configs/synthetic.conf."""

import argparse
from pathlib import Path

from rgrec.synthetic import SyntheticConfig, write_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data" / "synthetic"))
    ap.add_argument("--users", type=int, default=300)
    ap.add_argument("--items", type=int, default=400)
    ap.add_argument("--per-user", type=int, default=12)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = SyntheticConfig(n_users=args.users, n_items=args.items, n_genres=12, n_labels=30,
                          interactions_per_user=args.per_user, seed=args.seed)
    for name, path in write_dataset(args.out, cfg).items():
        print(f"{name}\t{path}")


if __name__ == "__main__":
    main()
