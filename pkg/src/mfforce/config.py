"""JSON run configuration for the command-line workflows."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .model import FidelityConfig, ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple[int, ...] = (0, 1, 2)
    test_fraction: float = 0.1
    sweep_n_hf: tuple[int, ...] = (50, 100, 200, 400)
    n_lf: int | None = None
    data: str | None = None
    data_lf: str | None = None
    data_hf: str | None = None
    out: str | None = None

    def to_dict(self) -> dict:
        out = asdict(self.train)
        out["weights"] = list(self.train.weights)
        for f in fields(self):
            if f.name != "train":
                value = getattr(self, f.name)
                out[f.name] = list(value) if isinstance(value, tuple) else value
        return out


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"model", "fidelity"}
_RUN_KEYS = {f.name for f in fields(RunConfig)} - {"train"}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def run_config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(data) - _TRAIN_KEYS - _RUN_KEYS - {"model", "fidelity"})
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    model = _build(ModelConfig, data.get("model", {}), "model")
    fidelity = _build(FidelityConfig, data.get("fidelity", {}), "fidelity")
    train_kwargs = {k: data[k] for k in _TRAIN_KEYS if k in data}
    if "weights" in train_kwargs:
        train_kwargs["weights"] = tuple(train_kwargs["weights"])
    try:
        train = TrainConfig(model=model, fidelity=fidelity, **train_kwargs)
        run_kwargs = {k: data[k] for k in _RUN_KEYS if k in data}
        for key in ("seeds", "sweep_n_hf"):
            if key in run_kwargs:
                run_kwargs[key] = tuple(int(v) for v in run_kwargs[key])
        run = RunConfig(train=train, **run_kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    if not 0 <= run.test_fraction < 1:
        raise ConfigError("test_fraction must be in [0, 1)")
    return run


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return run_config_from_dict(data)


def with_train(run: RunConfig, **changes) -> RunConfig:
    return replace(run, train=replace(run.train, **changes))
