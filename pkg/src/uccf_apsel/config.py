"""Run configuration: scenario keys plus pipeline and training keys.

A run file is flat ``key=value`` text.  It may pull a scenario file in with
``scenario=<path>`` (resolved relative to the run file); keys in the run
file win over keys from the scenario file.  Recognized run keys::

    master_seed          int, default 0
    n_instances          int, default 6000
    folds                int, default 5
    bench_trials         int, default 50
    lsf_scale            db | linear
    ue_order             strongest_ap | index
    per_ue_models        bool, one distributed network per UE
    train.<field>        any TrainConfig field, all variants
    train.<Variant>.<f>  override for one variant, e.g. train.CentralizedLsf.epochs
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .mlp import TrainConfig
from .netmodel import SystemParams, _parse_bool, dump_scenario, parse_scenario
from .pipeline import FeatureConfig, Variant

__all__ = ["RunConfig", "parse_run_config", "load_run_config", "DEFAULT_TRAIN"]

# tuned per variant; see README
DEFAULT_TRAIN = {
    Variant.CENTRALIZED_LSF: TrainConfig(epochs=200, early_stop_patience=10, monitor="bacc", input_noise=1.0),
    Variant.CENTRALIZED_BSR: TrainConfig(epochs=200, early_stop_patience=10, monitor="bacc", input_noise=1.0),
    Variant.DISTRIBUTED_LSF: TrainConfig(epochs=100, early_stop_patience=10),
    Variant.DISTRIBUTED_BSR: TrainConfig(epochs=100, early_stop_patience=10),
}

_TRAIN_FIELDS = {f.name: f.type for f in fields(TrainConfig)}


def _coerce_train(name: str, value: str):
    if name not in _TRAIN_FIELDS:
        raise ValueError(f"unknown training key {name!r}")
    kind = _TRAIN_FIELDS[name]
    if kind in ("int", int):
        return int(value)
    if kind in ("float", float):
        return float(value)
    return value


@dataclass
class RunConfig:
    params: SystemParams = field(default_factory=SystemParams)
    master_seed: int = 0
    n_instances: int = 6000
    folds: int = 5
    bench_trials: int = 50
    features: FeatureConfig = field(default_factory=FeatureConfig)
    per_ue_models: bool = False
    train: dict[Variant, TrainConfig] = field(default_factory=lambda: dict(DEFAULT_TRAIN))

    def canonical_text(self) -> str:
        extra = {
            "master_seed": self.master_seed,
            "n_instances": self.n_instances,
            "folds": self.folds,
            "bench_trials": self.bench_trials,
            "lsf_scale": self.features.lsf_scale,
            "ue_order": self.features.ue_order,
            "per_ue_models": str(self.per_ue_models).lower(),
        }
        for v in Variant:
            for f in fields(TrainConfig):
                extra[f"train.{v.value}.{f.name}"] = getattr(self.train[v], f.name)
        return dump_scenario(self.params, extra)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]


def _read_keys(path: Path, seen: set[Path] | None = None) -> list[tuple[str, str]]:
    seen = set() if seen is None else seen
    path = path.resolve()
    if path in seen:
        raise ValueError(f"scenario include cycle at {path}")
    seen.add(path)
    pairs = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "scenario":
            pairs = _read_keys((path.parent / value), seen) + pairs
        else:
            pairs.append((key, value))
    return pairs


def parse_run_config(pairs: list[tuple[str, str]]) -> RunConfig:
    merged: dict[str, str] = {}
    for key, value in pairs:
        merged[key] = value
    params, rest = parse_scenario("\n".join(f"{k}={v}" for k, v in merged.items()))
    cfg = RunConfig(params=params)
    fkw = {}
    shared: dict[str, object] = {}
    per_variant: dict[Variant, dict[str, object]] = {}
    for key, value in rest.items():
        if key in ("master_seed", "n_instances", "folds", "bench_trials"):
            setattr(cfg, key, int(value))
        elif key in ("lsf_scale", "ue_order"):
            fkw[key] = value
        elif key == "per_ue_models":
            cfg.per_ue_models = _parse_bool(value)
        elif key.startswith("train."):
            parts = key.split(".")
            if len(parts) == 2:
                shared[parts[1]] = _coerce_train(parts[1], value)
            elif len(parts) == 3:
                per_variant.setdefault(Variant(parts[1]), {})[parts[2]] = _coerce_train(parts[2], value)
            else:
                raise ValueError(f"malformed training key {key!r}")
        else:
            raise ValueError(f"unknown config key {key!r}")
    cfg.features = FeatureConfig(**fkw)
    cfg.train = {v: replace(DEFAULT_TRAIN[v], **{**shared, **per_variant.get(v, {})}) for v in Variant}
    return cfg


def load_run_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> RunConfig:
    pairs = _read_keys(Path(path)) if path is not None else []
    pairs += list((overrides or {}).items())
    return parse_run_config(pairs)
