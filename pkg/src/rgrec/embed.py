"""RotatE / TransE embeddings of the augmented graph, used to score rules.

Only base predicates own parameters; an inverse predicate is the conjugate
rotation (RotatE, negated phase) or the negated translation (TransE).
RotatE relations are stored as phase angles, so every relation entry has
modulus exactly one.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import CheckpointError, NumericalError
from .graph import KnowledgeGraph
from .rules import ROTATE, TRANSE, Rule, RuleScore

log = logging.getLogger(__name__)

_MAGIC = b"RGKE"
_VERSION = 1
_KINDS = {ROTATE: 0, TRANSE: 1}


@dataclass
class KgeConfig:
    kind: str = ROTATE
    dim: int = 1024
    negatives: int = 25
    margin: float = 6.0
    lr: float = 1e-4
    steps: int = 100_000
    batch_size: int = 512
    adv_temperature: float = 1.0
    seed: int = 0
    init_epsilon: float = 2.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown embedding kind {self.kind!r}")
        for name in ("dim", "negatives", "margin", "lr", "steps", "batch_size", "adv_temperature"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(eq=False)
class EmbeddingModel:
    """Trained embeddings.

    ``entities`` is ``n x dim`` real (TransE) or ``n x dim`` complex128
    (RotatE).  ``relations`` holds one row per *base* predicate: phases for
    RotatE, translation vectors for TransE.
    """

    kind: str
    entities: np.ndarray
    relations: np.ndarray
    losses: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.relations.shape[1]

    def relation(self, p: int) -> np.ndarray:
        """Relation row for predicate id ``p`` (inverse ids resolve to the
        negated base row)."""
        row = self.relations[p >> 1]
        return -row if p & 1 else row.copy()

    def save(self, path: str | Path) -> None:
        ents = self.entities
        if self.kind == ROTATE:
            ents = np.concatenate([ents.real, ents.imag], axis=1)
        header = struct.pack(
            "<4sIIIQQ", _MAGIC, _VERSION, _KINDS[self.kind], self.dim, len(self.entities), len(self.relations)
        )
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(ents, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.relations, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingModel":
        raw = Path(path).read_bytes()
        size = struct.calcsize("<4sIIIQQ")
        if len(raw) < size:
            raise CheckpointError(f"{path}: truncated header")
        magic, version, kind, dim, n_e, n_r = struct.unpack("<4sIIIQQ", raw[:size])
        if magic != _MAGIC:
            raise CheckpointError(f"{path}: not an embedding checkpoint")
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        kind_name = {v: k for k, v in _KINDS.items()}.get(kind)
        if kind_name is None:
            raise CheckpointError(f"{path}: unknown model kind {kind}")
        width = 2 * dim if kind_name == ROTATE else dim
        need = size + 8 * (n_e * width + n_r * dim)
        if len(raw) != need:
            raise CheckpointError(f"{path}: expected {need} bytes, found {len(raw)}")
        ents = np.frombuffer(raw, dtype="<f8", count=n_e * width, offset=size).reshape(n_e, width).astype(np.float64)
        rels = np.frombuffer(raw, dtype="<f8", count=n_r * dim, offset=size + 8 * n_e * width).reshape(n_r, dim).astype(np.float64)
        if kind_name == ROTATE:
            ents = ents[:, :dim] + 1j * ents[:, dim:]
        return cls(kind_name, ents, rels)


class KgeNet(torch.nn.Module):
    def __init__(self, kind: str, n_entities: int, n_relations: int, dim: int, margin: float, eps: float, dtype):
        super().__init__()
        self.kind = kind
        self.margin = margin
        bound = (margin + eps) / dim
        width = 2 * dim if kind == ROTATE else dim
        self.entity = torch.nn.Parameter(torch.empty(n_entities, width, dtype=dtype).uniform_(-bound, bound))
        if kind == ROTATE:
            self.relation = torch.nn.Parameter(torch.empty(n_relations, dim, dtype=dtype).uniform_(-math.pi, math.pi))
        else:
            self.relation = torch.nn.Parameter(torch.empty(n_relations, dim, dtype=dtype).uniform_(-bound, bound))

    def distance(self, h: torch.Tensor, r: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Distance of triples; ``h``, ``r``, ``t`` broadcast against each other."""
        eh, et, rel = self.entity[h], self.entity[t], self.relation[r]
        if self.kind == ROTATE:
            d = rel.shape[-1]
            hr, hi = eh[..., :d], eh[..., d:]
            tr, ti = et[..., :d], et[..., d:]
            c, s = torch.cos(rel), torch.sin(rel)
            re = hr * c - hi * s - tr
            im = hr * s + hi * c - ti
            return torch.sqrt(re * re + im * im + 1e-18).sum(-1)
        return (eh + rel - et).abs().sum(-1)

    def loss(self, pos: torch.Tensor, neg_ent: torch.Tensor, corrupt_head: torch.Tensor, adv_temperature: float) -> torch.Tensor:
        """Self-adversarial negative-sampling loss.

        ``pos`` is ``B x 3`` base-direction triples, ``neg_ent`` ``B x K``
        replacement entities, ``corrupt_head`` a ``B`` bool mask.
        """
        h, r, t = pos[:, 0], pos[:, 1], pos[:, 2]
        pos_score = self.margin - self.distance(h, r, t)
        nh = torch.where(corrupt_head[:, None], neg_ent, h[:, None])
        nt = torch.where(corrupt_head[:, None], t[:, None], neg_ent)
        neg_score = self.margin - self.distance(nh, r[:, None], nt)
        weights = torch.softmax(adv_temperature * neg_score, dim=1).detach()
        pos_loss = -torch.nn.functional.logsigmoid(pos_score).mean()
        neg_loss = -(weights * torch.nn.functional.logsigmoid(-neg_score)).sum(1).mean()
        return (pos_loss + neg_loss) / 2


def base_triples(g: KnowledgeGraph) -> np.ndarray:
    """One row ``(s, base predicate index, o)`` per undirected edge."""
    mask = (g.predicates & 1) == 0
    return np.stack([g.subjects[mask], g.predicates[mask] >> 1, g.objects[mask]], axis=1).astype(np.int64)


def train_embeddings(g: KnowledgeGraph, cfg: KgeConfig, progress: bool = False) -> EmbeddingModel:
    """Train RotatE or TransE on every edge of ``g`` with Adam."""
    triples = base_triples(g)
    if len(triples) == 0:
        raise ValueError("cannot train embeddings on an empty graph")
    dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
    torch.manual_seed(cfg.seed)
    n_rel = (g.n_predicates + 1) // 2
    mod = KgeNet(cfg.kind, g.n_entities, n_rel, cfg.dim, cfg.margin, cfg.init_epsilon, dtype)
    opt = torch.optim.Adam(mod.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    losses = []
    steps = range(cfg.steps)
    if progress:
        from tqdm import tqdm
        steps = tqdm(steps, desc=f"{cfg.kind} embeddings", unit="step")
    for step in steps:
        idx = rng.integers(0, len(triples), size=min(cfg.batch_size, len(triples)))
        pos = torch.from_numpy(triples[idx])
        neg = torch.from_numpy(rng.integers(0, g.n_entities, size=(len(idx), cfg.negatives)))
        head = torch.from_numpy(rng.random(len(idx)) < 0.5)
        opt.zero_grad()
        loss = mod.loss(pos, neg, head, cfg.adv_temperature)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(f"{cfg.kind} embedding loss became {value} at step {step}")
        loss.backward()
        opt.step()
        losses.append(value)
    ent = mod.entity.detach().to(torch.float64).numpy()
    if cfg.kind == ROTATE:
        ent = ent[:, :cfg.dim] + 1j * ent[:, cfg.dim:]
    rel = mod.relation.detach().to(torch.float64).numpy().copy()
    return EmbeddingModel(cfg.kind, ent, rel, losses)


def compose(model: EmbeddingModel, rule: Rule | Sequence[int]) -> np.ndarray:
    """Composed relation of a rule body.

    RotatE: phases added and wrapped to ``[0, 2 pi)``; TransE: vectors added.
    """
    body = rule.body if isinstance(rule, Rule) else tuple(rule)
    acc = np.zeros(model.dim)
    for p in body:
        acc = acc + model.relation(p)
    if model.kind == ROTATE:
        acc = np.mod(acc, 2 * math.pi)
    return acc


def relation_distance(model: EmbeddingModel, a: np.ndarray, b: np.ndarray) -> float:
    """L2 distance between two relations in the model's space."""
    if model.kind == ROTATE:
        # |e^{ia} - e^{ib}| = 2 |sin((a - b) / 2)|
        d = np.remainder(a - b + math.pi, 2 * math.pi) - math.pi
        return float(2.0 * np.sqrt(np.sum(np.sin(d / 2.0) ** 2)))
    return float(np.linalg.norm(a - b))


def composition_confidence(model: EmbeddingModel, rule: Rule, head: int) -> RuleScore:
    """Negative distance between the head relation and the composed body."""
    value = -relation_distance(model, model.relation(head), compose(model, rule))
    return RuleScore(rule, model.kind, value + 0.0)


def score_rules_embedding(model: EmbeddingModel, rules, head: int) -> list[RuleScore]:
    return [composition_confidence(model, r, head) for r in rules]
