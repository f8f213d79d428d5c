"""Cacheable pipeline stages and ablation sweeps.

Every stage writes its artifacts to ``<workspace>/<stage>/<key>/`` where
``key`` hashes the stage's parameters together with the keys of its
upstream stages (and, for ingest, the bytes of the input files).  A
``stamp.json`` written last records the key and the digests of the
outputs, so an interrupted stage never looks complete and a rerun with
unchanged inputs is a no-op.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from scipy.special import expit

from .config import PipelineConfig
from .data import DatasetSplit, InteractionSet, NegativeSampler, load_interactions, split
from .embed import EmbeddingModel, KgeConfig, score_rules_embedding, train_embeddings
from .errors import CheckpointError, MissingArtifactError, StaleArtifactError
from .graph import AugmentedGraph, GraphFormatError, KnowledgeGraph, load_graph, merge_interactions
from .metrics import Report, evaluate
from .model import (
    ModelCheckpoint,
    RGRecNet,
    TrainingConfig,
    load_model,
    save_model,
    score_pairs,
    train,
    user_vectors_for,
)
from .rules import CWA, RuleSet, canonical, mine_rules, rank_rules, score_rules_cwa
from .weights import PretrainConfig, extract_features, pretrain_weights

log = logging.getLogger(__name__)

STAGES = ("ingest", "mine", "embed", "score-rules", "pretrain", "train", "evaluate")
ABLATIONS = ("rule-length", "rule-count", "filter-strategy", "no-pretrain", "cold-start")

_PARAMS = {
    "ingest": ("seed", "train_fraction"),
    "mine": ("seed", "max_rule_length", "mining_pair_cap"),
    "embed": ("seed", "strategy", "embed_dim", "kge_negatives", "kge_margin", "kge_lr", "kge_steps",
              "kge_batch", "kge_adv_temperature"),
    "score-rules": ("seed", "strategy", "n_rules", "cwa_grounding_cap"),
    "pretrain": ("seed", "pretrain_lambda", "pretrain_lr", "pretrain_batch", "pretrain_max_epochs"),
    "train": ("seed", "pretrain", "dim", "fanout", "lr", "batch_size", "mu", "max_epochs", "patience",
              "mask_target_edge"),
    "evaluate": ("seed", "runs", "n_negatives", "ks", "f1_threshold"),
}


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def derive_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0] >> 1)


def read_item_map(path: str | Path) -> dict[str, str]:
    """Two tab-separated columns: item label, entity label."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise GraphFormatError(f"{path}:{n}: expected 2 tab-separated fields, got {len(parts)}")
            out[parts[0]] = parts[1]
    return out


@dataclass
class Context:
    """Everything later stages need, rebuilt from the raw files and the
    ingest split."""

    kg: KnowledgeGraph
    data: InteractionSet
    split: DatasetSplit
    graph: AugmentedGraph
    user_entity: np.ndarray  # user code -> entity id
    item_entity: np.ndarray  # item code -> entity id
    sampler: NegativeSampler

    def entity_pairs(self, s: InteractionSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.user_entity[s.users], self.item_entity[s.items], s.labels.astype(np.float64)


class ModelScorer:
    """Adapts a trained network to the evaluation protocol (codes in,
    probabilities out)."""

    def __init__(self, net: RGRecNet, ctx: Context, rules: RuleSet, fanout: int):
        self.net, self.ctx, self.rules, self.fanout = net, ctx, list(rules), fanout

    def score(self, users, items, seed) -> np.ndarray:
        return score_pairs(self.net, self.ctx.graph, self.rules, self.ctx.user_entity[users],
                           self.ctx.item_entity[items], self.fanout, seed)

    def score_candidates(self, users, candidates, seed) -> np.ndarray:
        u = user_vectors_for(self.net, self.ctx.graph, self.rules, self.ctx.user_entity[users], self.fanout, seed)
        table = self.net.entity.detach().numpy()
        return expit(np.einsum("bd,bkd->bk", u, table[self.ctx.item_entity[candidates]]))


class Pipeline:
    def __init__(self, cfg: PipelineConfig, resolve_deps: bool = True, progress: bool = False):
        self.cfg = cfg
        self.resolve_deps = resolve_deps
        self.progress = progress
        self.workspace = Path(cfg.workspace)
        self._keys: dict[str, str] = {}
        self._ctx: Context | None = None
        self._done: dict[str, Path] = {}
        self._runners: dict[int, Pipeline] = {0: self}
        torch.set_num_threads(cfg.threads)

    # -- keys and directories ------------------------------------------------

    def upstream(self, stage: str) -> tuple[str, ...]:
        cfg = self.cfg
        if stage == "ingest":
            return ()
        if stage in ("mine", "embed"):
            return ("ingest",)
        if stage == "score-rules":
            return ("mine",) if cfg.strategy == CWA else ("mine", "embed")
        if stage == "pretrain":
            return ("score-rules",)
        if stage == "train":
            return ("score-rules", "pretrain") if cfg.pretrain else ("score-rules",)
        if stage == "evaluate":
            return ("train",)
        raise ValueError(f"unknown stage {stage!r}")

    def key(self, stage: str) -> str:
        if stage not in self._keys:
            params = {k: getattr(self.cfg, k) for k in _PARAMS[stage]}
            if stage == "ingest":
                for name in ("kg", "interactions", "item_map"):
                    path = getattr(self.cfg, name)
                    if name != "item_map" and not path:
                        raise GraphFormatError(f"no {name} file configured")
                    if path and not Path(path).is_file():
                        raise GraphFormatError(f"{name} file not found: {path}")
                    params[name] = file_digest(path) if path else ""
            upstream = {u: self.key(u) for u in self.upstream(stage)}
            if stage == "evaluate":
                upstream = {f"train#{k}": self.runner(k).key("train") for k in range(self.cfg.runs)}
            payload = {"stage": stage, "params": params, "upstream": upstream}
            blob = json.dumps(payload, sort_keys=True, default=str).encode()
            self._keys[stage] = hashlib.sha256(blob).hexdigest()
        return self._keys[stage]

    def run_seed(self, k: int) -> int:
        """Master seed of repeated run ``k``; run 0 uses the configured seed."""
        return self.cfg.seed if k == 0 else derive_seed(self.cfg.seed, k, 9)

    def runner(self, k: int) -> "Pipeline":
        """Pipeline of repeated run ``k``: new split, rules and model, same
        workspace."""
        if k not in self._runners:
            self._runners[k] = Pipeline(self.cfg.replace(seed=self.run_seed(k)), self.resolve_deps, self.progress)
        return self._runners[k]

    def stage_dir(self, stage: str) -> Path:
        return self.workspace / stage / self.key(stage)[:16]

    def _status(self, stage: str) -> str:
        """'ok', 'missing', 'stale' or 'outdated' (built from other inputs)."""
        d = self.stage_dir(stage)
        stamp = d / "stamp.json"
        if not stamp.is_file():
            others = [p for p in (self.workspace / stage).glob("*/stamp.json")] if (self.workspace / stage).is_dir() else []
            return "outdated" if others else "missing"
        meta = json.loads(stamp.read_text())
        if meta.get("key") != self.key(stage):
            return "stale"
        for name, digest in meta.get("outputs", {}).items():
            p = d / name
            if not p.is_file() or file_digest(p) != digest:
                return "stale"
        return "ok"

    def _require(self, stage: str) -> None:
        status = self._status(stage)
        if status == "missing":
            raise MissingArtifactError(stage, self.stage_dir(stage))
        if status == "outdated":
            raise StaleArtifactError(f"stage '{stage}' artifacts were built from different inputs; rerun '{stage}'")
        if status == "stale":
            raise StaleArtifactError(f"stage '{stage}' artifacts in {self.stage_dir(stage)} do not match their stamp")

    # -- running ---------------------------------------------------------------

    def run(self, stage: str) -> Path:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        if stage in self._done:
            return self._done[stage]
        deps = [(self, up) for up in self.upstream(stage)]
        if stage == "evaluate":
            deps = [(self.runner(k), "train") for k in range(self.cfg.runs)]
        for pipe, up in deps:
            if self.resolve_deps:
                pipe.run(up)
            else:
                pipe._require(up)
        d = self.stage_dir(stage)
        if self._status(stage) == "ok":
            log.info("%s: up to date (%s)", stage, d)
            self._done[stage] = d
            return d
        d.mkdir(parents=True, exist_ok=True)
        (d / "stamp.json").unlink(missing_ok=True)
        t0 = time.perf_counter()
        outputs = getattr(self, "_stage_" + stage.replace("-", "_"))(d)
        stamp = {"stage": stage, "key": self.key(stage),
                 "outputs": {name: file_digest(d / name) for name in sorted(outputs)}}
        (d / "stamp.json").write_text(json.dumps(stamp, indent=1, sort_keys=True) + "\n")
        log.info("%s: done in %.1fs (%s)", stage, time.perf_counter() - t0, d)
        self._done[stage] = d
        return d

    def context(self) -> Context:
        if self._ctx is None:
            cfg = self.cfg
            kg = load_graph(cfg.kg)
            data = load_interactions(cfg.interactions)
            d = self.stage_dir("ingest")
            idx = [np.loadtxt(d / f"{n}.idx", dtype=np.int64, ndmin=1) for n in ("train", "valid", "test")]
            sp = DatasetSplit(data.take(idx[0]), data.take(idx[1]), data.take(idx[2]), cfg.seed, *idx)
            item_map = read_item_map(cfg.item_map) if cfg.item_map else {m: m for m in data.item_labels}
            missing = [m for m in data.item_labels if m not in item_map]
            if missing:
                raise GraphFormatError(f"item {missing[0]!r} has no entity mapping ({len(missing)} unmapped)")
            g = merge_interactions(kg, sp.train.positives().pairs(), item_map, users=data.user_labels)
            ue = np.array([g.user(u) for u in data.user_labels], dtype=np.int64)
            ie = np.array([g.item(m) for m in data.item_labels], dtype=np.int64)
            self._ctx = Context(kg, data, sp, g, ue, ie, NegativeSampler(data))
        return self._ctx

    def _selected_rules(self) -> RuleSet:
        ranked = RuleSet.load(self.stage_dir("score-rules") / "rules.tsv", self.context().graph)
        return RuleSet(tuple(canonical(ranked.rules)))

    # -- stages ------------------------------------------------------------------

    def _stage_ingest(self, d: Path) -> list[str]:
        cfg = self.cfg
        kg = load_graph(cfg.kg)
        data = load_interactions(cfg.interactions)
        sp = split(data, cfg.seed, cfg.train_fraction)
        sp.save_manifest(d)
        self._ctx = None
        ctx = self.context()
        g = ctx.graph
        summary = {
            "kg_triples": kg.n_triples // 2,
            "kg_directed_triples": kg.n_triples,
            "users": data.n_users,
            "items": data.n_items,
            "positives": int((data.labels == 1).sum()),
            "train": len(sp.train), "valid": len(sp.valid), "test": len(sp.test),
            "interacts_edges": int((g.predicates == g.interacts).sum()),
            "entities": g.n_entities,
        }
        (d / "summary.txt").write_text("".join(f"{k}\t{v}\n" for k, v in summary.items()))
        return ["train.idx", "valid.idx", "test.idx", "summary.txt"]

    def _stage_mine(self, d: Path) -> list[str]:
        ctx = self.context()
        pos = ctx.split.train.positives()
        pairs = np.stack([ctx.user_entity[pos.users], ctx.item_entity[pos.items]], axis=1)
        cap = self.cfg.mining_pair_cap or None
        rules = mine_rules(ctx.graph, self.cfg.max_rule_length, cap, self.cfg.seed, pairs, self.progress)
        rules.save(d / "rules_all.tsv", ctx.graph)
        log.info("mined %d rules %s", len(rules), rules.length_histogram())
        return ["rules_all.tsv"]

    def _stage_embed(self, d: Path) -> list[str]:
        cfg = self.cfg
        kcfg = KgeConfig(kind=cfg.strategy, dim=cfg.embed_dim, negatives=cfg.kge_negatives, margin=cfg.kge_margin,
                         lr=cfg.kge_lr, steps=cfg.kge_steps, batch_size=cfg.kge_batch,
                         adv_temperature=cfg.kge_adv_temperature, seed=cfg.seed)
        model = train_embeddings(self.context().graph, kcfg, self.progress)
        model.save(d / "embeddings.bin")
        (d / "losses.txt").write_text("".join(f"{x!r}\n" for x in model.losses[:: max(1, len(model.losses) // 1000)]))
        return ["embeddings.bin", "losses.txt"]

    def _stage_score_rules(self, d: Path) -> list[str]:
        cfg = self.cfg
        g = self.context().graph
        rules = RuleSet.load(self.stage_dir("mine") / "rules_all.tsv", g)
        if cfg.strategy == CWA:
            scores = score_rules_cwa(g, rules, cfg.cwa_grounding_cap or None, cfg.seed)
        else:
            model = EmbeddingModel.load(self.stage_dir("embed") / "embeddings.bin")
            if model.kind != cfg.strategy:
                raise CheckpointError("embedding kind does not match the configured strategy")
            scores = score_rules_embedding(model, rules, g.interacts)
        ranked = rank_rules(scores, cfg.n_rules or None, g)
        ranked.save(d / "rules.tsv", g)
        return ["rules.tsv"]

    def _training_pairs(self, purpose: int) -> InteractionSet:
        """Balanced pairs with freshly sampled negatives: 0 pre-training,
        1 model training, 2 validation."""
        ctx = self.context()
        s = ctx.split.valid if purpose == 2 else ctx.split.train
        return ctx.sampler.fill_negatives(s, derive_seed(self.cfg.seed, purpose))

    def _stage_pretrain(self, d: Path) -> list[str]:
        cfg = self.cfg
        ctx = self.context()
        rules = self._selected_rules()
        pairs = self._training_pairs(0)
        u, m, y = ctx.entity_pairs(pairs)
        feats = extract_features(ctx.graph, u, m, y, rules)
        feats.save(d / "features.bin")
        pcfg = PretrainConfig(lam=cfg.pretrain_lambda, lr=cfg.pretrain_lr, batch_size=cfg.pretrain_batch,
                              max_epochs=cfg.pretrain_max_epochs, seed=derive_seed(cfg.seed, 3))
        w = pretrain_weights(feats, pcfg)
        with open(d / "weights.tsv", "w", encoding="utf-8") as fh:
            for r, x in zip(rules, w.W):
                fh.write(f"{float(x)!r}\t{r.describe(ctx.graph)}\n")
        (d / "history.txt").write_text(f"epochs\t{w.epochs}\nfinal_loss\t{w.final_loss!r}\n"
                                       + "".join(f"{x!r}\n" for x in w.history))
        return ["features.bin", "weights.tsv", "history.txt"]

    def load_weights(self) -> np.ndarray:
        rules = self._selected_rules()
        g = self.context().graph
        W, names = [], []
        with open(self.stage_dir("pretrain") / "weights.tsv", encoding="utf-8") as fh:
            for line in fh:
                x, body = line.rstrip("\n").split("\t")
                W.append(float(x))
                names.append(body)
        if names != [r.describe(g) for r in rules]:
            raise StaleArtifactError("pre-trained weights do not match the selected rules")
        return np.array(W)

    def _stage_train(self, d: Path) -> list[str]:
        cfg = self.cfg
        ctx = self.context()
        rules = self._selected_rules()
        W0 = self.load_weights() if cfg.pretrain else None
        seed = derive_seed(cfg.seed, 4)
        tcfg = TrainingConfig(lr=cfg.lr, batch_size=cfg.batch_size, mu=cfg.mu, max_epochs=cfg.max_epochs,
                              patience=cfg.patience, seed=seed, fanout=cfg.fanout, dim=cfg.dim,
                              mask_target_edge=cfg.mask_target_edge)
        net, history = train(ctx.graph, ctx.entity_pairs(self._training_pairs(1)),
                             ctx.entity_pairs(self._training_pairs(2)), rules, W0, tcfg, progress=self.progress)
        save_model(ModelCheckpoint.from_net(net, rules, ctx.graph, seed, cfg.fanout), d / "model.ckpt")
        (d / "history.tsv").write_text(
            "epoch\ttrain_loss\tvalid_auc\n"
            + "".join(f"{h.epoch}\t{h.train_loss!r}\t{h.valid_auc!r}\n" for h in history))
        return ["model.ckpt", "history.tsv"]

    def _stage_evaluate(self, d: Path) -> list[str]:
        report = self.evaluate_report()
        (d / "report.txt").write_text(report.render())
        return ["report.txt"]

    def scorer(self) -> ModelScorer:
        ctx = self.context()
        ckpt = load_model(self.stage_dir("train") / "model.ckpt", ctx.graph)
        return ModelScorer(ckpt.to_net(), ctx, self._selected_rules(), self.cfg.fanout)

    def evaluate_report(self) -> Report:
        """Metrics of every repeated run, each on its own test split."""
        cfg = self.cfg
        values: dict[str, list[float]] = {}
        notes = []
        for k in range(cfg.runs):
            pipe = self.runner(k)
            ctx = pipe.context()
            rep = evaluate(pipe.scorer(), ctx.split.test, ctx.sampler, 1, derive_seed(pipe.cfg.seed, 5),
                           cfg.k_values(), cfg.n_negatives, cfg.f1_threshold)
            for m, v in rep.values.items():
                values.setdefault(m, []).extend(v)
            hashes = ", ".join(f"{s}={pipe.key(s)[:16]}" for s in pipe._closure("train"))
            notes.append(f"run {k}: seed {pipe.cfg.seed}, rules {len(pipe._selected_rules())}, {hashes}")
            notes += [f"run {k}: {n}" for n in rep.notes]
        return Report(values, _report_config(cfg), notes)

    def _closure(self, stage: str) -> list[str]:
        seen: list[str] = []

        def visit(s):
            for u in self.upstream(s):
                visit(u)
            if s not in seen:
                seen.append(s)

        visit(stage)
        return seen

    def report(self) -> str:
        self.run("evaluate")
        return (self.stage_dir("evaluate") / "report.txt").read_text()


def _report_config(cfg: PipelineConfig) -> dict[str, object]:
    # the workspace location does not influence any result
    return {k: v for k, v in cfg.items() if k != "workspace"}


def read_report_values(text: str) -> dict[str, tuple[float, float]]:
    """Parse the ``metric<TAB>mean<TAB>std`` lines of a rendered report."""
    out = {}
    for line in text.splitlines():
        parts = line.split("\t")
        if len(parts) == 3 and not line.startswith("#"):
            try:
                out[parts[0]] = (float(parts[1]), float(parts[2]))
            except ValueError:
                continue
    return out


def ablation_settings(mode: str, cfg: PipelineConfig) -> list[tuple[str, PipelineConfig]]:
    if mode == "rule-length":
        return [(f"I={i}", cfg.replace(max_rule_length=i)) for i in (2, 3, 4)]
    if mode == "rule-count":
        return [(f"L={n}" if n else "L=all", cfg.replace(n_rules=n)) for n in (10, 30, 50, 0)]
    if mode == "filter-strategy":
        return [(s, cfg.replace(strategy=s)) for s in ("rotate", "transe", "cwa")]
    if mode == "no-pretrain":
        return [("with-W", cfg.replace(pretrain=True)), ("without-W", cfg.replace(pretrain=False))]
    if mode == "cold-start":
        return [(f"train={f:.0%}", cfg.replace(train_fraction=f)) for f in (0.2, 0.4, 0.6)]
    raise ValueError(f"unknown ablation {mode!r}")


def run_ablation(
    mode: str,
    cfg: PipelineConfig,
    resolve_deps: bool = True,
    progress: bool = False,
    on_setting: Callable[[str], None] | None = None,
) -> str:
    """Run the full pipeline for every setting of ``mode`` and tabulate
    mean (std) per metric."""
    rows = []
    for name, variant in ablation_settings(mode, cfg):
        if on_setting:
            on_setting(name)
        values = read_report_values(Pipeline(variant, resolve_deps, progress).report())
        rows.append((name, values))
    metrics = list(rows[0][1]) if rows else []
    width = max(len(n) for n, _ in rows)
    lines = [f"# ablation = {mode}"] + [f"# {k} = {v}" for k, v in _report_config(cfg).items()] + [""]
    lines.append(f"{'setting':<{width}}  " + "  ".join(f"{m:>17}" for m in metrics))
    for name, values in rows:
        cells = [f"{values[m][0]:.4f} ({values[m][1]:.4f})" for m in metrics]
        lines.append(f"{name:<{width}}  " + "  ".join(f"{c:>17}" for c in cells))
    lines.append("")
    for name, values in rows:
        for m in metrics:
            lines.append(f"{name}\t{m}\t{values[m][0]!r}\t{values[m][1]!r}")
    text = "\n".join(lines) + "\n"
    out = Path(cfg.workspace) / "ablations"
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{mode}.txt").write_text(text)
    return text
