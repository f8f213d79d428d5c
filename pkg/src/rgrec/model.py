"""Rule-guided neighbourhood aggregation.

For a user ``u`` and rule body ``p1 .. ph`` an expansion tree is sampled
breadth-first: every node draws ``Y`` children along the next predicate
(without replacement when it has at least ``Y`` such neighbours, with
replacement when it has fewer, and ``Y`` blank children when it has none).
Aggregation then runs ``h`` rounds from the leaves inward; in round ``i``
every node of depth ``<= h - i`` is replaced by

    act_i(W_i @ [self ; mean(children)] + b_i)

with ``act_i = relu`` except ``tanh`` in the rule's last round.  The root
state after ``h`` rounds is the user's vector under that rule; the rule
vectors are combined with the rule weights into the final user vector.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .gradcheck import check_gradients
from .errors import CheckpointError, NumericalError
from .graph import AugmentedGraph
from .rules import Rule, RuleSet

log = logging.getLogger(__name__)

BLANK = -1
MAX_DEPTH = 4


@dataclass
class TrainingConfig:
    lr: float = 0.05
    batch_size: int = 128
    mu: float = 1e-4
    max_epochs: int = 50
    patience: int = 3
    seed: int = 0
    fanout: int = 4
    dim: int = 8
    mask_target_edge: bool = False
    eval_batch: int = 2048

    def __post_init__(self):
        for name in ("lr", "batch_size", "max_epochs", "patience", "fanout", "dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")


# ---------------------------------------------------------------------------
# Expansion


def sample_children(
    g: AugmentedGraph,
    parents: np.ndarray,
    p: int,
    fanout: int,
    rng: np.random.Generator,
    exclude: np.ndarray | None = None,
) -> np.ndarray:
    """``len(parents) x fanout`` children along predicate ``p``.

    ``exclude`` optionally names one object per parent that must not be
    drawn (``-1`` for none).
    """
    parents = np.asarray(parents, dtype=np.int64)
    n = len(parents)
    out = np.full((n, fanout), BLANK, dtype=np.int64)
    start = np.zeros(n, dtype=np.int64)
    deg = np.zeros(n, dtype=np.int64)
    live = parents >= 0
    if live.any():
        start[live], deg[live] = g.spans(parents[live], p)
    skip = np.full(n, -1, dtype=np.int64)
    if exclude is not None:
        for i in np.flatnonzero((np.asarray(exclude) >= 0) & (deg > 0)):
            nb = g.objects[start[i]:start[i] + deg[i]]
            j = int(np.searchsorted(nb, exclude[i]))
            if j < len(nb) and nb[j] == exclude[i]:
                skip[i] = j
        deg = deg - (skip >= 0)
    offs = np.zeros((n, fanout), dtype=np.int64)

    few = np.flatnonzero((deg > 0) & (deg < fanout))
    if len(few):
        offs[few] = rng.integers(0, deg[few][:, None], size=(len(few), fanout))
    width = 4 * fanout
    mid = np.flatnonzero((deg >= fanout) & (deg <= width))
    if len(mid):
        keys = rng.random((len(mid), width))
        keys[np.arange(width)[None, :] >= deg[mid][:, None]] = np.inf
        offs[mid] = np.argsort(keys, axis=1, kind="stable")[:, :fanout]
    big = np.flatnonzero(deg > width)
    todo = big
    while len(todo):
        draw = rng.integers(0, deg[todo][:, None], size=(len(todo), fanout))
        offs[todo] = draw
        srt = np.sort(draw, axis=1)
        dup = (srt[:, 1:] == srt[:, :-1]).any(axis=1)
        todo = todo[dup]

    offs = offs + ((skip[:, None] >= 0) & (offs >= skip[:, None]))
    has = deg > 0
    out[has] = g.objects[(start[has, None] + offs[has])]
    return out


def sample_trees(
    g: AugmentedGraph,
    roots: np.ndarray,
    body: Sequence[int],
    fanout: int,
    rng: np.random.Generator,
    exclude: np.ndarray | None = None,
) -> list[np.ndarray]:
    """Levels ``0..h`` of the expansion trees of ``roots``; level ``k`` has
    shape ``(len(roots), fanout**k)`` with ``-1`` marking blank nodes."""
    roots = np.asarray(roots, dtype=np.int64)
    levels = [roots[:, None]]
    for k, p in enumerate(body):
        prev = levels[-1]
        ex = None
        if k == 0 and exclude is not None:
            ex = np.asarray(exclude, dtype=np.int64)
        kids = sample_children(g, prev.reshape(-1), p, fanout, rng, ex)
        levels.append(kids.reshape(len(roots), -1))
    return levels


@dataclass
class ExpansionTree:
    """One user's expansion along one rule; ``levels[k]`` holds ``Y**k`` ids."""

    rule: Rule
    fanout: int
    levels: list[np.ndarray]

    @property
    def node_count(self) -> int:
        return sum(len(l) for l in self.levels)


def expand(g: AugmentedGraph, u: int, rule: Rule, fanout: int = 4, seed: int = 0) -> ExpansionTree:
    if len(rule) > MAX_DEPTH:
        raise ValueError(f"rules longer than {MAX_DEPTH} are not supported")
    levels = sample_trees(g, np.array([u]), rule.body, fanout, np.random.default_rng(seed))
    return ExpansionTree(rule, fanout, [l[0] for l in levels])


@dataclass
class TreeBatch:
    """Trees of a batch of roots for every rule, grouped by rule length.

    ``groups[h] = (rule_indices, levels)`` where level ``k`` is a
    ``B x R_h x Y**k`` id array.
    """

    size: int
    n_rules: int
    groups: dict[int, tuple[np.ndarray, list[np.ndarray]]] = field(default_factory=dict)


def sample_batch(
    g: AugmentedGraph,
    users: np.ndarray,
    rules: Sequence[Rule],
    fanout: int,
    rng: np.random.Generator,
    exclude: np.ndarray | None = None,
) -> TreeBatch:
    per_len: dict[int, list[tuple[int, list[np.ndarray]]]] = {}
    for j, r in enumerate(rules):
        per_len.setdefault(len(r), []).append((j, sample_trees(g, users, r.body, fanout, rng, exclude)))
    batch = TreeBatch(len(users), len(rules))
    for h, items in sorted(per_len.items()):
        idx = np.array([j for j, _ in items], dtype=np.int64)
        levels = [np.stack([lv[k] for _, lv in items], axis=1) for k in range(h + 1)]
        batch.groups[h] = (idx, levels)
    return batch


# ---------------------------------------------------------------------------
# Network


class RGRecNet(torch.nn.Module):
    """Entity table (plus one shared blank row), per-round aggregators and
    rule weights."""

    def __init__(self, n_entities: int, n_rules: int, dim: int = 8, seed: int = 0, depth: int = MAX_DEPTH):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        bound = 1.0 / math.sqrt(dim)
        dt = torch.float64
        self.n_entities = n_entities
        self.entity = torch.nn.Parameter(torch.empty(n_entities + 1, dim, dtype=dt).uniform_(-bound, bound, generator=gen))
        self.agg_weight = torch.nn.Parameter(torch.empty(depth, dim, 2 * dim, dtype=dt).uniform_(-bound, bound, generator=gen))
        self.agg_bias = torch.nn.Parameter(torch.zeros(depth, dim, dtype=dt))
        self.rule_weight = torch.nn.Parameter(torch.zeros(n_rules, dtype=dt))

    @property
    def dim(self) -> int:
        return self.entity.shape[1]

    @property
    def blank(self) -> int:
        return self.n_entities

    def _rows(self, ids: np.ndarray) -> torch.Tensor:
        ids = np.where(ids < 0, self.blank, ids)
        return self.entity[torch.from_numpy(ids)]

    def aggregate(self, levels: list[np.ndarray]) -> torch.Tensor:
        """Root states after ``h`` rounds for ``B x R`` trees of height ``h``."""
        h = len(levels) - 1
        states = [self._rows(l) for l in levels]
        for i in range(1, h + 1):
            w, b = self.agg_weight[i - 1], self.agg_bias[i - 1]
            act = torch.tanh if i == h else torch.relu
            new = []
            for k in range(h - i + 1):
                kids = states[k + 1]
                mean = kids.reshape(*kids.shape[:-2], states[k].shape[-2], -1, kids.shape[-1]).mean(-2)
                x = torch.cat([states[k], mean], dim=-1)
                new.append(act(x @ w.T + b))
            states = new
        return states[0][..., 0, :]

    def rule_vectors(self, batch: TreeBatch) -> torch.Tensor:
        """``B x L x d`` per-rule user vectors."""
        out = self.entity.new_zeros(batch.size, batch.n_rules, self.dim)
        for h, (idx, levels) in batch.groups.items():
            out = out.index_copy(1, torch.from_numpy(idx), self.aggregate(levels))
        return out

    def user_vectors(self, batch: TreeBatch) -> torch.Tensor:
        return torch.einsum("bld,l->bd", self.rule_vectors(batch), self.rule_weight)

    def score(self, u_vec: torch.Tensor, items: np.ndarray) -> torch.Tensor:
        return torch.sigmoid((u_vec * self.entity[torch.from_numpy(np.asarray(items, dtype=np.int64))]).sum(-1))

    def loss(self, batch: TreeBatch, items: np.ndarray, labels: np.ndarray, mu: float) -> torch.Tensor:
        """Mean squared error of the predictions plus ``mu * ||W||_2``."""
        pred = self.score(self.user_vectors(batch), items)
        y = torch.as_tensor(labels, dtype=pred.dtype)
        return ((y - pred) ** 2).mean() + mu * torch.linalg.vector_norm(self.rule_weight)

    def set_rule_weights(self, W: np.ndarray) -> None:
        with torch.no_grad():
            self.rule_weight.copy_(torch.as_tensor(np.asarray(W, dtype=np.float64)))


def aggregate_rule(tree: ExpansionTree, net: RGRecNet) -> np.ndarray:
    levels = [l[None, None, :] for l in tree.levels]
    with torch.no_grad():
        return net.aggregate(levels)[0, 0].numpy().copy()


def user_representation(
    g: AugmentedGraph, u: int, rules: Sequence[Rule], net: RGRecNet, fanout: int = 4, seed: int = 0
) -> np.ndarray:
    batch = sample_batch(g, np.array([u]), list(rules), fanout, np.random.default_rng(seed))
    with torch.no_grad():
        return net.user_vectors(batch)[0].numpy().copy()


def predict(net: RGRecNet, u_vec: np.ndarray, item: int) -> float:
    if not 0 <= item < net.n_entities:
        raise KeyError(f"item entity {item} has no embedding row")
    with torch.no_grad():
        return float(net.score(torch.as_tensor(u_vec)[None], np.array([item]))[0])


def compute_loss(net: RGRecNet, batch: TreeBatch, items, labels, mu: float) -> float:
    with torch.no_grad():
        return float(net.loss(batch, np.asarray(items), np.asarray(labels), mu))


# ---------------------------------------------------------------------------
# Training and scoring


def score_pairs(
    net: RGRecNet,
    g: AugmentedGraph,
    rules: Sequence[Rule],
    users: np.ndarray,
    items: np.ndarray,
    fanout: int,
    seed,
    batch_size: int = 2048,
) -> np.ndarray:
    """Predicted probabilities for ``(user, item)`` entity pairs."""
    rng = np.random.default_rng(seed)
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    out = np.empty(len(users))
    with torch.no_grad():
        for lo in range(0, len(users), batch_size):
            sl = slice(lo, lo + batch_size)
            tb = sample_batch(g, users[sl], rules, fanout, rng)
            out[sl] = net.score(net.user_vectors(tb), items[sl]).numpy()
    return out


def user_vectors_for(net, g, rules, users, fanout, seed, batch_size: int = 2048) -> np.ndarray:
    rng = np.random.default_rng(seed)
    users = np.asarray(users, dtype=np.int64)
    out = np.empty((len(users), net.dim))
    with torch.no_grad():
        for lo in range(0, len(users), batch_size):
            sl = slice(lo, lo + batch_size)
            out[sl] = net.user_vectors(sample_batch(g, users[sl], rules, fanout, rng)).numpy()
    return out


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_auc: float


def train(
    g: AugmentedGraph,
    train_data: tuple[np.ndarray, np.ndarray, np.ndarray],
    valid_data: tuple[np.ndarray, np.ndarray, np.ndarray],
    rules: RuleSet | Sequence[Rule],
    W_init: np.ndarray | None,
    cfg: TrainingConfig,
    valid_metric: Callable[[np.ndarray, np.ndarray], float] | None = None,
    progress: bool = False,
) -> tuple[RGRecNet, list[EpochRecord]]:
    """Mini-batch Adam on the squared-error loss with early stopping.

    ``train_data``/``valid_data`` are ``(user entity, item entity, label)``
    arrays.  Trees are resampled every epoch.  Training stops when the
    validation AUC has not improved for ``cfg.patience`` epochs; the best
    validation checkpoint is returned.  ``W_init=None`` draws the rule
    weights uniformly from ``[-1/sqrt(L), 1/sqrt(L)]``.
    """
    from .metrics import auc

    valid_metric = valid_metric or auc
    rules = list(rules)
    if any(len(r) > MAX_DEPTH for r in rules):
        raise ValueError(f"rules longer than {MAX_DEPTH} are not supported")
    net = RGRecNet(g.n_entities, len(rules), cfg.dim, cfg.seed)
    if W_init is None:
        gen = np.random.default_rng([cfg.seed, 7])
        bound = 1.0 / math.sqrt(max(len(rules), 1))
        W_init = gen.uniform(-bound, bound, size=len(rules))
    net.set_rule_weights(W_init)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    tu, ti, tl = (np.asarray(a) for a in train_data)
    vu, vi, vl = (np.asarray(a) for a in valid_data)
    n = len(tu)
    best_state, best_auc, stale = copy.deepcopy(net.state_dict()), -math.inf, 0
    history: list[EpochRecord] = []
    epochs = range(1, cfg.max_epochs + 1)
    if progress:
        from tqdm import tqdm
        epochs = tqdm(epochs, desc="training", unit="epoch")
    for epoch in epochs:
        rng = np.random.default_rng([cfg.seed, epoch])
        perm = rng.permutation(n)
        total, count = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            ex = ti[idx] if cfg.mask_target_edge else None
            tb = sample_batch(g, tu[idx], rules, cfg.fanout, rng, ex)
            opt.zero_grad()
            loss = net.loss(tb, ti[idx], tl[idx], cfg.mu)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"loss became {value} at epoch {epoch}, batch starting {lo}")
            loss.backward()
            opt.step()
            total += value * len(idx)
            count += len(idx)
        scores = score_pairs(net, g, rules, vu, vi, cfg.fanout, [cfg.seed, epoch, 1], cfg.eval_batch)
        v = valid_metric(scores, vl) if len(vl) else float("nan")
        history.append(EpochRecord(epoch, total / max(count, 1), v))
        log.info("epoch %d loss %.5f valid auc %.4f", epoch, total / max(count, 1), v)
        if v > best_auc:
            best_auc, stale = v, 0
            best_state = copy.deepcopy(net.state_dict())
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    net.load_state_dict(best_state)
    return net, history


def gradient_check(
    net: RGRecNet,
    g: AugmentedGraph,
    rules: Sequence[Rule],
    users: np.ndarray,
    items: np.ndarray,
    labels: np.ndarray,
    mu: float,
    eps: float = 1e-6,
    fanout: int = 4,
    seed: int = 0,
) -> dict[str, float]:
    """Autograd vs central differences of the training loss on one frozen
    tree sample; relative error per parameter group."""
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-6, 1e-4]")
    tb = sample_batch(g, np.asarray(users), list(rules), fanout, np.random.default_rng(seed))
    params = dict(net.named_parameters())
    return check_gradients(lambda: net.loss(tb, np.asarray(items), np.asarray(labels), mu), params, eps)


# ---------------------------------------------------------------------------
# Checkpoints

_MAGIC = b"RGRM"
_VERSION = 1
_HEADER = "<4sIIIIQQq"


@dataclass(eq=False)
class ModelCheckpoint:
    """Everything needed to rebuild a trained network.

    ``rule_text`` holds the human-readable bodies in canonical order; they
    are checked against the graph's predicate labels on load.
    """

    rules: list[Rule]
    rule_text: list[str]
    entity: np.ndarray
    agg_weight: np.ndarray
    agg_bias: np.ndarray
    rule_weight: np.ndarray
    seed: int
    fanout: int

    @classmethod
    def from_net(cls, net: RGRecNet, rules: Sequence[Rule], g, seed: int, fanout: int) -> "ModelCheckpoint":
        def arr(t):
            return t.detach().numpy().copy()

        return cls(list(rules), [r.describe(g) for r in rules], arr(net.entity), arr(net.agg_weight),
                   arr(net.agg_bias), arr(net.rule_weight), seed, fanout)

    def to_net(self) -> RGRecNet:
        n_e, dim = self.entity.shape
        net = RGRecNet(n_e - 1, len(self.rules), dim, depth=self.agg_weight.shape[0])
        with torch.no_grad():
            for name in ("entity", "agg_weight", "agg_bias", "rule_weight"):
                getattr(net, name).copy_(torch.from_numpy(getattr(self, name)))
        return net

    def to_bytes(self) -> bytes:
        n_e, dim = self.entity.shape
        depth = self.agg_weight.shape[0]
        text = "\n".join(self.rule_text).encode()
        bodies = np.array([p for r in self.rules for p in r.body], dtype="<i8")
        lengths = np.array([len(r) for r in self.rules], dtype="<i8")
        parts = [
            struct.pack(_HEADER, _MAGIC, _VERSION, dim, depth, self.fanout, n_e, len(self.rules), self.seed),
            struct.pack("<QQ", len(bodies), len(text)),
            lengths.tobytes(), bodies.tobytes(), text,
        ]
        for a in (self.entity, self.agg_weight, self.agg_bias, self.rule_weight):
            parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
        blob = b"".join(parts)
        return blob + hashlib.sha256(blob).digest()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ModelCheckpoint":
        hsize = struct.calcsize(_HEADER)
        if len(raw) < hsize + 16 + 32:
            raise CheckpointError("model checkpoint is truncated")
        magic, version, dim, depth, fanout, n_e, n_rules, seed = struct.unpack(_HEADER, raw[:hsize])
        if magic != _MAGIC:
            raise CheckpointError("not a model checkpoint")
        if version != _VERSION:
            raise CheckpointError(f"unsupported model checkpoint version {version}")
        blob, digest = raw[:-32], raw[-32:]
        if hashlib.sha256(blob).digest() != digest:
            raise CheckpointError("model checkpoint is corrupt or truncated")
        n_body, n_text = struct.unpack("<QQ", raw[hsize:hsize + 16])
        off = hsize + 16

        def take(count, shape):
            nonlocal off
            a = np.frombuffer(blob, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
            off += 8 * count
            return a

        lengths = np.frombuffer(blob, dtype="<i8", count=n_rules, offset=off).tolist()
        off += 8 * n_rules
        bodies = np.frombuffer(blob, dtype="<i8", count=n_body, offset=off).tolist()
        off += 8 * n_body
        text = blob[off:off + n_text].decode()
        off += n_text
        rules, pos = [], 0
        for h in lengths:
            rules.append(Rule(tuple(bodies[pos:pos + h])))
            pos += h
        entity = take(n_e * dim, (n_e, dim))
        agg_w = take(depth * dim * 2 * dim, (depth, dim, 2 * dim))
        agg_b = take(depth * dim, (depth, dim))
        w = take(n_rules, (n_rules,))
        if off != len(blob):
            raise CheckpointError("model checkpoint has trailing bytes")
        return cls(rules, text.split("\n") if n_rules else [], entity, agg_w, agg_b, w, seed, fanout)


def save_model(ckpt: ModelCheckpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(ckpt.to_bytes())


def load_model(path, g=None) -> ModelCheckpoint:
    """Read a checkpoint; with ``g`` given, verify the rule bodies still
    name the same predicates."""
    with open(path, "rb") as fh:
        ckpt = ModelCheckpoint.from_bytes(fh.read())
    if g is not None:
        try:
            current = [r.describe(g) for r in ckpt.rules]
        except IndexError:
            current = None
        if current != ckpt.rule_text:
            raise CheckpointError(f"{path}: rules do not match the graph's predicates")
    return ckpt
