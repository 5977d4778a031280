"""Strict TOML experiment configuration.

Every section maps onto a dataclass; unknown keys and wrongly typed values
are rejected instead of silently ignored. ``dump_config`` writes a file that
``load_config`` reads back to an equal object.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w


class ConfigError(ValueError):
    pass


@dataclass
class ModelSpec:
    kind: str = "diffusion"  # categorical | ar | diffusion
    K: int = 8
    vocab_size: int = 3
    seq_len: int = 4
    class_count: int = 0
    hidden: int = 64
    depth: int = 3
    sigma_data: float = 0.35


@dataclass
class DatasetSpec:
    kind: str = "gmm2d"  # categorical | markov | gmm2d
    n_samples: int = 50_000
    seed: int = 0
    probs: list[float] = field(default_factory=list)  # categorical; empty = random
    floor: float = 0.01
    transition: list[list[float]] = field(default_factory=list)  # markov; empty = default chain
    initial: list[float] = field(default_factory=list)
    weights: list[float] = field(default_factory=list)  # gmm2d; empty = default mixture
    means: list[list[float]] = field(default_factory=list)
    covs: list[list[list[float]]] = field(default_factory=list)


@dataclass
class PretrainSpec:
    steps: int = 2000
    lr: float = 1e-3
    batch: int = 256
    warmup: float = 0.0
    P_mean: float = -1.2
    P_std: float = 1.2


@dataclass
class GridPoint:
    alpha: float = 1.0
    beta: float = 1.0
    uncond_alpha: float = 0.0
    label_dropout: float = 0.0


@dataclass
class DdoSpec:
    grid: list[GridPoint] = field(default_factory=list)  # empty = per-kind default
    rounds: int = 3
    steps: int = 2000
    lr: float = 1e-4
    batch: int = 256
    warmup: float = 0.1
    ema_half_life: float = 0.0  # examples; 0 = 10% of the round
    cache_size: int = 50_000
    class_balance: bool = True
    online_ref: bool = False
    min_rel_improvement: float = 0.0  # 0 = always run all rounds
    record_wallclock: bool = False


@dataclass
class EvalSpec:
    metric: str = "auto"  # auto | exact_kl | hist_kl
    every: int = 50
    samples: int = 20_000
    seed: int = 12345
    bins: int = 64
    width: float = 4.0
    sampler_steps: int = 18
    final_samples: int = 100_000  # baseline/final comparison, independent of selection
    final_seed: int = 999


@dataclass
class ExperimentConfig:
    seed: int = 0
    model: ModelSpec = field(default_factory=ModelSpec)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)
    ddo: DdoSpec = field(default_factory=DdoSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)

    def validate(self) -> "ExperimentConfig":
        kinds = {"categorical": "categorical", "ar": "markov", "diffusion": "gmm2d"}
        if self.model.kind not in kinds:
            raise ConfigError(f"model.kind must be one of {sorted(kinds)}, got {self.model.kind!r}")
        if self.dataset.kind != kinds[self.model.kind]:
            raise ConfigError(f"model kind {self.model.kind!r} needs dataset kind "
                              f"{kinds[self.model.kind]!r}, got {self.dataset.kind!r}")
        if self.eval.metric not in ("auto", "exact_kl", "hist_kl"):
            raise ConfigError(f"unknown eval.metric {self.eval.metric!r}")
        if self.eval.metric == "hist_kl" and self.model.kind != "diffusion":
            raise ConfigError("hist_kl applies to diffusion models only")
        for name, v in [("pretrain.steps", self.pretrain.steps), ("ddo.steps", self.ddo.steps),
                        ("ddo.rounds", self.ddo.rounds)]:
            if v < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name, v in [("pretrain.batch", self.pretrain.batch), ("ddo.batch", self.ddo.batch),
                        ("eval.every", self.eval.every), ("eval.bins", self.eval.bins)]:
            if v < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.ddo.online_ref and self.model.kind == "diffusion":
            raise ConfigError("online reference sampling is only supported for categorical and ar models")
        if self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        return self


def _check_type(value, tp, where: str):
    origin = getattr(tp, "__origin__", None)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        (item,) = tp.__args__
        return [_check_type(v, item, f"{where}[{i}]") for i, v in enumerate(value)]
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a table")
        return _build(tp, value, where)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if not isinstance(value, tp):
        raise ConfigError(f"{where}: expected {tp.__name__}, got {value!r}")
    return value


def _build(cls, table: dict, where: str):
    hints = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - set(hints))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    types = {f.name: _resolve(f.type) for f in hints.values()}
    kwargs = {k: _check_type(v, types[k], f"{where}.{k}" if where else k) for k, v in table.items()}
    return cls(**kwargs)


_TYPES = {"int": int, "float": float, "str": str, "bool": bool, "list[float]": list[float],
          "list[list[float]]": list[list[float]], "list[list[list[float]]]": list[list[list[float]]],
          "list[GridPoint]": list[GridPoint], "ModelSpec": ModelSpec, "DatasetSpec": DatasetSpec,
          "PretrainSpec": PretrainSpec, "DdoSpec": DdoSpec, "EvalSpec": EvalSpec}


def _resolve(tp):
    return _TYPES[tp] if isinstance(tp, str) else tp


def config_from_dict(table: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, table, "").validate()


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            table = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(table)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def dump_config(cfg: ExperimentConfig, path=None) -> str:
    text = tomli_w.dumps(config_to_dict(cfg))
    if path is not None:
        Path(path).write_text(text)
    return text


def default_config(kind: str = "diffusion") -> ExperimentConfig:
    """Artifact defaults for each model kind."""
    if kind == "diffusion":
        cfg = ExperimentConfig(ddo=DdoSpec(steps=400), eval=EvalSpec(every=100))
    elif kind == "ar":
        cfg = ExperimentConfig(
            model=ModelSpec(kind="ar", hidden=8),
            dataset=DatasetSpec(kind="markov", n_samples=10_000),
            pretrain=PretrainSpec(steps=2000, lr=1e-2, batch=256),
            ddo=DdoSpec(rounds=2, steps=300, lr=1e-3, cache_size=10_000),
            eval=EvalSpec(every=50))
    elif kind == "categorical":
        cfg = ExperimentConfig(
            model=ModelSpec(kind="categorical"),
            dataset=DatasetSpec(kind="categorical"),
            pretrain=PretrainSpec(steps=2000, lr=5e-2),
            ddo=DdoSpec(rounds=1, steps=2000, lr=5e-2, warmup=0.0, cache_size=10_000),
            eval=EvalSpec(every=100))
    else:
        raise ConfigError(f"unknown model kind {kind!r}")
    return cfg.validate()
