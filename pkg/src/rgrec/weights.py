"""Rule-match features and rule-weight pre-training.

Each user-item pair becomes a 0/1 vector (one column per rule, canonical
rule order).  The weights ``W`` are fitted by minimising

    mean((label - sigmoid(X @ W))**2) + lam * ||W||_2

with mini-batch Adam.  The regulariser is the plain L2 norm (not squared);
its subgradient at ``W = 0`` is taken as 0.
"""

from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, NumericalError
from .graph import AugmentedGraph
from .rules import RuleSet, WalkCounter, match_pairs

log = logging.getLogger(__name__)

_MAGIC = b"RGFM"


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    X: np.ndarray  # N x L uint8
    labels: np.ndarray  # N int8
    rule_checksum: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        return self.X.shape

    def save(self, path: str | Path) -> None:
        """Bit-packed cache: header, checksum, packed rows, labels."""
        n, l = self.X.shape
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sQQ64s", _MAGIC, n, l, self.rule_checksum.encode().ljust(64, b"\0")))
            fh.write(np.packbits(self.X.astype(bool), axis=1).tobytes())
            fh.write(np.packbits(self.labels.astype(bool)).tobytes())

    @classmethod
    def load(cls, path: str | Path, expect_checksum: str | None = None) -> "FeatureMatrix":
        raw = Path(path).read_bytes()
        hsize = struct.calcsize("<4sQQ64s")
        if len(raw) < hsize:
            raise CheckpointError(f"{path}: truncated header")
        magic, n, l, chk = struct.unpack("<4sQQ64s", raw[:hsize])
        if magic != _MAGIC:
            raise CheckpointError(f"{path}: not a feature cache")
        chk = chk.rstrip(b"\0").decode()
        if expect_checksum is not None and chk != expect_checksum:
            raise CheckpointError(f"{path}: rule order changed since the cache was written")
        row_bytes = (l + 7) // 8
        need = hsize + n * row_bytes + (n + 7) // 8
        if len(raw) != need:
            raise CheckpointError(f"{path}: expected {need} bytes, found {len(raw)}")
        body = np.frombuffer(raw, dtype=np.uint8, count=n * row_bytes, offset=hsize).reshape(n, row_bytes)
        X = np.unpackbits(body, axis=1, count=l).astype(np.uint8) if l else np.zeros((n, 0), np.uint8)
        lab = np.unpackbits(np.frombuffer(raw, dtype=np.uint8, offset=hsize + n * row_bytes), count=n).astype(np.int8)
        return cls(X, lab, chk)


def rule_checksum(rules: RuleSet, g) -> str:
    text = "\n".join(r.describe(g) for r in rules)
    return hashlib.sha256(text.encode()).hexdigest()


def extract_features(
    g: AugmentedGraph,
    users: np.ndarray,
    items: np.ndarray,
    labels: np.ndarray,
    rules: RuleSet,
) -> FeatureMatrix:
    """Column ``j`` of row ``i`` is 1 iff ``(users[i], items[i])`` grounds rule ``j``."""
    counter = WalkCounter(g)
    X = np.zeros((len(users), len(rules)), dtype=np.uint8)
    for j, r in enumerate(rules):
        X[:, j] = match_pairs(g, users, items, r, counter)
    return FeatureMatrix(X, np.asarray(labels, dtype=np.int8), rule_checksum(rules, g))


@dataclass
class PretrainConfig:
    lam: float = 1e-4
    lr: float = 1e-4
    batch_size: int = 256
    max_epochs: int = 200
    tol: float = 1e-6
    patience: int = 5
    seed: int = 0


@dataclass
class RuleWeights:
    W: np.ndarray
    lam: float = 0.0
    epochs: int = 0
    final_loss: float = float("nan")
    history: list[float] = field(default_factory=list)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def pretrain_loss(W: np.ndarray, X: np.ndarray, labels: np.ndarray, lam: float) -> float:
    z = _sigmoid(X @ W)
    return float(np.mean((labels - z) ** 2) + lam * np.linalg.norm(W))


def pretrain_grad(W: np.ndarray, X: np.ndarray, labels: np.ndarray, lam: float) -> np.ndarray:
    z = _sigmoid(X @ W)
    g = X.T @ (2.0 * (z - labels) * z * (1.0 - z)) / len(labels)
    nrm = np.linalg.norm(W)
    if nrm > 0:
        g = g + lam * W / nrm
    return g


def pretrain_weights(features: FeatureMatrix, cfg: PretrainConfig | None = None) -> RuleWeights:
    """Fit rule weights from zero by mini-batch Adam.

    Stops after ``max_epochs`` or when the full-data loss changes by less
    than ``tol`` (relative) for ``patience`` consecutive epochs.  Returns the
    weights with the lowest full-data loss seen, including the zero start.
    """
    cfg = cfg or PretrainConfig()
    X = features.X.astype(np.float64)
    y = features.labels.astype(np.float64)
    n, L = X.shape
    if n == 0:
        raise ValueError("no training pairs")
    rng = np.random.default_rng(cfg.seed)
    W = np.zeros(L)
    m1, m2 = np.zeros(L), np.zeros(L)
    b1, b2, adam_eps = 0.9, 0.999, 1e-8
    t = 0
    best_W, best = W.copy(), pretrain_loss(W, X, y, cfg.lam)
    history = [best]
    flat = 0
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            g = pretrain_grad(W, X[idx], y[idx], cfg.lam)
            t += 1
            m1 = b1 * m1 + (1 - b1) * g
            m2 = b2 * m2 + (1 - b2) * g * g
            W = W - cfg.lr * (m1 / (1 - b1 ** t)) / (np.sqrt(m2 / (1 - b2 ** t)) + adam_eps)
        loss = pretrain_loss(W, X, y, cfg.lam)
        if not math.isfinite(loss):
            raise NumericalError(f"pre-training loss became {loss} at epoch {epoch}")
        prev = history[-1]
        history.append(loss)
        if loss < best:
            best, best_W = loss, W.copy()
        flat = flat + 1 if abs(prev - loss) <= cfg.tol * max(abs(prev), 1e-12) else 0
        if flat >= cfg.patience:
            break
    return RuleWeights(best_W, cfg.lam, epoch, best, history)
