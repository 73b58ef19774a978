"""INI run configuration; command-line flags override file values."""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import nn
from .evaluation import FoldPlan, ModelConfigs
from .pooling import PoolingConfig

SECTIONS = {
    "pooling": PoolingConfig,
    "mlp": nn.MlpConfig,
    "mlp_train": nn.TrainConfig,
    "gcn": nn.GcnConfig,
    "gcn_train": nn.TrainConfig,
    "lr_train": nn.TrainConfig,
    "folds": FoldPlan,
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    pooling: PoolingConfig = field(default_factory=PoolingConfig)
    models: ModelConfigs = field(default_factory=ModelConfigs)
    folds: FoldPlan = field(default_factory=FoldPlan)

    def to_dict(self) -> dict:
        return {"pooling": asdict(self.pooling), "models": self.models.to_dict(), "folds": asdict(self.folds)}


def _coerce(cls, key, raw: str):
    types = {f.name: f.type for f in fields(cls)}
    if key not in types:
        raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
    t = str(types[key])
    if "tuple" in t:
        return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
    if t.startswith("int"):
        return int(raw)
    if t.startswith("float"):
        return float(raw)
    if t.startswith("bool"):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return raw


def _section(parser, name, base):
    if not parser.has_section(name):
        return base
    values = {k: _coerce(type(base), k, v) for k, v in parser.items(name)}
    return replace(base, **values)


def load_run_config(path=None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.read(path, encoding="utf-8")
    unknown = set(parser.sections()) - set(SECTIONS) - {"population"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    m = cfg.models
    models = ModelConfigs(
        mlp=_section(parser, "mlp", m.mlp),
        mlp_train=_section(parser, "mlp_train", m.mlp_train),
        lr_train=_section(parser, "lr_train", m.lr_train),
        gcn=_section(parser, "gcn", m.gcn),
        gcn_train=_section(parser, "gcn_train", m.gcn_train),
        graph_threshold=parser.getfloat("population", "threshold", fallback=m.graph_threshold),
        gcn_val_fraction=parser.getfloat("population", "gcn_val_fraction", fallback=m.gcn_val_fraction),
    )
    return RunConfig(
        pooling=_section(parser, "pooling", cfg.pooling),
        models=models,
        folds=_section(parser, "folds", cfg.folds),
    )
