"""Key-value run configuration and model construction.

File format: one ``key = value`` per line, ``#`` starts a comment, blank lines are
ignored. Keys are the field names of ``ModelConfig`` and ``TrainConfig``. Values are
parsed according to the field's default type (``true``/``false`` for booleans).
"""
from __future__ import annotations

from dataclasses import dataclass, fields, asdict, replace
from pathlib import Path

from .copula import CopulaModel, JointModel
from .flow import MarginalFlow
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    channels: int = 2
    horizon: float = 1.0
    marg_hidden_dim: int = 32
    flow_layers: int = 2
    flow_hid_dim: int = 10
    flow_mlp_dim: int = 32
    flow_mlp_layers: int = 2
    copula: bool = True
    variant: str = "gmc"
    copula_components: int = 5
    copula_rank: int = 2
    copula_hidden_dim: int = 32
    corr_net_hidden_dim: int = 32


def _parse(value: str, like):
    if isinstance(like, bool):
        low = value.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    try:
        return type(like)(value.strip())
    except ValueError:
        raise ConfigError(f"cannot parse {value!r} as {type(like).__name__}") from None


def apply_settings(model: ModelConfig, train: TrainConfig, settings: dict):
    mkeys = {f.name for f in fields(ModelConfig)}
    tkeys = {f.name for f in fields(TrainConfig)}
    mupd, tupd = {}, {}
    for key, raw in settings.items():
        if key in mkeys:
            mupd[key] = _parse(raw, getattr(model, key))
        elif key in tkeys:
            tupd[key] = _parse(raw, getattr(train, key))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        return replace(model, **mupd), replace(train, **tupd)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_lines(lines, source="<config>") -> dict:
    out = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides=(), model: ModelConfig | None = None, train: TrainConfig | None = None):
    settings = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        settings.update(parse_lines(path.read_text().splitlines(), str(path)))
    settings.update(parse_lines(overrides, "--set"))
    return apply_settings(model or ModelConfig(), train or TrainConfig(), settings)


def dump_config(model: ModelConfig, train: TrainConfig | None = None) -> str:
    items = asdict(model)
    if train is not None:
        items.update(asdict(train))
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in items.items())


def build_marginal(cfg: ModelConfig) -> MarginalFlow:
    return MarginalFlow(cfg.channels, cfg.marg_hidden_dim, cfg.flow_layers, cfg.flow_hid_dim,
                        cfg.flow_mlp_dim, cfg.flow_mlp_layers, cfg.horizon)


def build_copula(cfg: ModelConfig) -> CopulaModel:
    return CopulaModel(cfg.channels, cfg.copula_components, cfg.copula_rank, cfg.copula_hidden_dim,
                       cfg.corr_net_hidden_dim, cfg.variant, cfg.horizon)


def build_model(cfg: ModelConfig) -> JointModel:
    return JointModel(build_marginal(cfg), build_copula(cfg) if cfg.copula else None)
