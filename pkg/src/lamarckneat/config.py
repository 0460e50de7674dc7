"""Run configuration: JSON file, environment overrides, CLI flags (in rising precedence)."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .genome import HyperparamRanges

ABLATIONS = ("full", "no_lamarck", "no_weight_evolve", "structural_only")
DATASET_KINDS = ("rectangles", "idx", "amat", "mnist5k")
ENV_PREFIX = "LNEAT_"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "rectangles"
    # idx
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    # amat
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    # synthetic sizes; for mnist5k, n_test samples are held out of the 5,000
    n_train: int = 1200
    n_test: int = 2000
    # optional seeded subsampling of loaded files, e.g. 50,000 MNIST training images
    subsample_train: Optional[int] = None
    subsample_test: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got {self.kind!r}")


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    seed: int = 0
    pop_individual: int = 25
    pop_module: int = 30
    generations: int = 10
    num_network: int = 15
    k_epochs: int = 1
    batch_size: int = 108
    lr: float = 0.001
    validation_fraction: float = 0.2
    final_epochs: int = 100
    ranges: HyperparamRanges = field(default_factory=HyperparamRanges)
    ablation: str = "full"
    target_species: int = 4
    output_dir: str = "runs/default"
    initial_threshold: float = 1.0
    structural_weight: float = 1.0
    hyper_weight: float = 0.5
    symmetric_weight_perturbation: bool = False
    log_wall_time: bool = True

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if not 1 <= self.num_network <= self.pop_individual:
            raise ConfigError(f"num_network must lie in [1, pop_individual={self.pop_individual}]")
        if self.pop_module < 1 or self.pop_individual < 1:
            raise ConfigError("population sizes must be positive")
        if self.k_epochs < 0 or self.final_epochs < 0 or self.generations < 0:
            raise ConfigError("epoch and generation counts must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in (0, 1)")

    @property
    def lamarckian(self) -> bool:
        return self.ablation in ("full", "no_weight_evolve")

    @property
    def weight_evolution(self) -> bool:
        return self.ablation in ("full", "no_lamarck")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ranges"] = self.ranges.to_dict()
        return d

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def hash(self) -> str:
        """Digest of everything that affects per-generation results.

        Output location, wall-time logging and run length are left out, so a
        checkpoint can be resumed elsewhere or extended with more generations.
        """
        d = self.to_dict()
        for key in ("output_dir", "log_wall_time", "generations"):
            d.pop(key)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _check_keys(data: dict, cls, where: str) -> None:
    unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def config_from_dict(data: dict) -> RunConfig:
    _check_keys(data, RunConfig, "config")
    data = dict(data)
    if "dataset" in data:
        _check_keys(data["dataset"], DatasetSpec, "dataset")
        data["dataset"] = DatasetSpec(**data["dataset"])
    if "ranges" in data:
        try:
            data["ranges"] = HyperparamRanges.from_dict(data["ranges"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    try:
        return RunConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _coerce(value: str, current):
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def env_overrides(environ=None) -> dict:
    """Scalar top-level keys from ``LNEAT_<KEY>`` variables, e.g. ``LNEAT_SEED=3``."""
    environ = os.environ if environ is None else environ
    defaults = RunConfig()
    out = {}
    for f in dataclasses.fields(RunConfig):
        if f.name in ("dataset", "ranges"):
            continue
        var = ENV_PREFIX + f.name.upper()
        if var in environ:
            try:
                out[f.name] = _coerce(environ[var], getattr(defaults, f.name))
            except ValueError as exc:
                raise ConfigError(f"{var}: {exc}") from None
    return out


def load_config(path=None, overrides: Optional[dict] = None, environ=None) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    data.update(env_overrides(environ))
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return config_from_dict(data)


def save_config(config: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
