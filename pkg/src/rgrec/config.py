"""Pipeline configuration: a flat dataclass read from ``key = value`` files."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable

from .errors import ConfigError
from .rules import CWA, ROTATE, TRANSE

STRATEGIES = (CWA, ROTATE, TRANSE)
COLD_START_FRACTIONS = (0.2, 0.4, 0.6)


@dataclass(frozen=True)
class PipelineConfig:
    # data
    kg: str = ""
    interactions: str = ""
    item_map: str = ""
    workspace: str = "workspace"
    seed: int = 0
    train_fraction: float = 0.6
    # rules
    max_rule_length: int = 3
    n_rules: int = 30  # 0 keeps every mined rule
    strategy: str = ROTATE
    mining_pair_cap: int = 0  # 0 mines over every training interaction
    cwa_grounding_cap: int = 100_000
    # relation embeddings used for rule scoring
    embed_dim: int = 1024
    kge_negatives: int = 25
    kge_margin: float = 6.0
    kge_lr: float = 1e-4
    kge_steps: int = 100_000
    kge_batch: int = 512
    kge_adv_temperature: float = 1.0
    # rule-weight pre-training
    pretrain: bool = True
    pretrain_lambda: float = 1e-4
    pretrain_lr: float = 1e-4
    pretrain_batch: int = 256
    pretrain_max_epochs: int = 200
    # model
    dim: int = 8
    fanout: int = 4
    lr: float = 0.05
    batch_size: int = 128
    mu: float = 1e-4
    max_epochs: int = 50
    patience: int = 3
    mask_target_edge: bool = False
    # evaluation
    runs: int = 5
    n_negatives: int = 100
    ks: str = "5,10"
    f1_threshold: float = 0.5
    threads: int = 1

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {', '.join(STRATEGIES)}, got {self.strategy!r}")
        if self.train_fraction not in COLD_START_FRACTIONS:
            raise ConfigError(f"train_fraction must be one of {COLD_START_FRACTIONS}")
        if not 2 <= self.max_rule_length <= 4:
            raise ConfigError("max_rule_length must be 2, 3 or 4")
        if self.n_rules < 0:
            raise ConfigError("n_rules must be >= 0")
        for name in ("embed_dim", "kge_steps", "dim", "fanout", "batch_size", "runs", "threads", "n_negatives"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        self.k_values()

    def k_values(self) -> tuple[int, ...]:
        try:
            ks = tuple(int(k) for k in self.ks.split(",") if k.strip())
        except ValueError:
            raise ConfigError(f"ks must be comma-separated integers, got {self.ks!r}") from None
        if not ks or min(ks) < 1:
            raise ConfigError("ks must list positive integers")
        return ks

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def items(self) -> list[tuple[str, object]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def render(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.items())


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, raw: str, kind) -> object:
    raw = raw.strip()
    try:
        if kind in (bool, "bool"):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if kind in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_assignments(lines: Iterable[str], origin: str = "<args>") -> dict[str, object]:
    """``key = value`` lines (``#`` comments, blank lines ignored) to typed values."""
    types = {f.name: f.type for f in fields(PipelineConfig)}
    out: dict[str, object] = {}
    for n, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{origin}:{n}: expected 'key = value'")
        key, value = (t.strip() for t in text.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ConfigError(f"{origin}:{n}: unknown key {key!r}")
        out[key] = _coerce(key, value, types[key])
    return out


def load_config(path: str | Path | None = None, overrides: Iterable[str] = (), **flags) -> PipelineConfig:
    """Defaults, then the file, then ``key=value`` overrides, then ``flags``
    (``None`` flags are ignored).  Relative paths inside the file resolve
    against the file's directory."""
    values: dict[str, object] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_assignments(p.read_text().splitlines(), str(p)))
        for key in ("kg", "interactions", "item_map", "workspace"):
            v = values.get(key)
            if v and not Path(v).is_absolute():
                values[key] = str((p.parent / v).resolve())
    values.update(parse_assignments(overrides))
    values.update({k: v for k, v in flags.items() if v is not None})
    try:
        return PipelineConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
