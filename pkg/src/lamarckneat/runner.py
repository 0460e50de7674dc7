"""Experiment driver: datasets from config, the evolution loop with checkpoints,
final training of the best genome, and exports."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import evolution
from .assembly import compile_network, to_dot
from .config import RunConfig, config_from_dict, save_config
from .datasets import (Dataset, DatasetError, SplitSpec, gen_rectangles, load_amat, load_idx, split_train_val,
                       subsample)
from .genome import SCHEMA_VERSION, IndividualGenome, ModuleGenome, genome_from_dict
from .training import accuracy, train_epochs

log = logging.getLogger(__name__)

CSV_NAME = "generations.csv"
BEST_NAME = "best_genome.json"
CONFIG_NAME = "config.json"
FINAL_NAME = "final.json"
EXPORT_FORMATS = ("dot", "json")
_FINAL_STREAM = 101


class CheckpointError(ValueError):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


# -- datasets ---------------------------------------------------------------------

def load_mnist5k() -> Dataset:
    """The 5,000-image MNIST sample (500 per class) bundled with mlxtend."""
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:
        raise DatasetError("dataset kind 'mnist5k' needs the optional mlxtend package") from exc
    x, y = mnist_data()
    images = (np.asarray(x, dtype=np.float32) / 255.0).reshape(-1, 28, 28, 1)
    return Dataset(images, np.asarray(y, dtype=np.int64), 10)


def load_datasets(config: RunConfig) -> tuple[Dataset, Dataset]:
    """(original training set, test set) as described by ``config.dataset``."""
    spec = config.dataset
    if spec.kind == "rectangles":
        train = gen_rectangles(spec.n_train, np.random.default_rng([spec.seed, 0]))
        test = gen_rectangles(spec.n_test, np.random.default_rng([spec.seed, 1]))
    elif spec.kind == "mnist5k":
        full = load_mnist5k()
        order = np.random.default_rng([spec.seed, 2]).permutation(len(full))
        test = full.subset(np.sort(order[:spec.n_test]))
        train = full.subset(np.sort(order[spec.n_test:]))
    elif spec.kind == "idx":
        paths = (spec.train_images, spec.train_labels, spec.test_images, spec.test_labels)
        if None in paths:
            raise DatasetError("idx datasets need train_images, train_labels, test_images and test_labels")
        train = load_idx(spec.train_images, spec.train_labels)
        test = load_idx(spec.test_images, spec.test_labels, train.num_classes)
    else:
        if spec.train_path is None or spec.test_path is None:
            raise DatasetError("amat datasets need train_path and test_path")
        train = load_amat(spec.train_path)
        test = load_amat(spec.test_path, train.num_classes)
    if spec.subsample_train is not None:
        train = subsample(train, spec.subsample_train, spec.seed)
    if spec.subsample_test is not None:
        test = subsample(test, spec.subsample_test, spec.seed)
    return train, test


def split_for_search(config: RunConfig, train: Dataset) -> tuple[Dataset, Dataset]:
    return split_train_val(train, SplitSpec(config.validation_fraction, config.seed))


# -- logs and files -------------------------------------------------------------------

def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, float) else str(value)


def history_csv(history: list[dict], log_wall_time: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(evolution.CSV_COLUMNS)
    for row in history:
        cells = [_fmt(row[c]) for c in evolution.CSV_COLUMNS]
        if not log_wall_time:
            cells[-1] = ""
        writer.writerow(cells)
    return buf.getvalue()


def read_history_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def best_genome_record(state: evolution.RunState, config: RunConfig) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "config_hash": config.hash(),
        "fitness": state.best_fitness,
        "param_count": state.best_param_count,
        "input_shape": list(state.input_shape),
        "num_classes": state.num_classes,
        "generation": state.generation,
        "individual": state.best_genome.to_dict(),
        # blueprint gene id -> the module sampled for it when the genome scored best
        "modules": {str(g): m.to_dict() for g, m in sorted(state.best_modules.items())},
    }


def load_best_genome(path) -> dict:
    try:
        rec = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: cannot read genome file ({exc})") from None
    if rec.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema_version {rec.get('schema_version')!r}")
    rec["individual"] = IndividualGenome.from_dict(rec["individual"])
    rec["modules"] = {int(g): ModuleGenome.from_dict(m) for g, m in rec["modules"].items()}
    return rec


def checkpoint_save(state: evolution.RunState, config: RunConfig, path) -> None:
    blob = {"schema_version": SCHEMA_VERSION, "config_hash": config.hash(), "config": config.to_dict(),
            "state": evolution.state_to_dict(state)}
    Path(path).write_text(_dump(blob))


def checkpoint_resume(path, config: Optional[RunConfig] = None) -> tuple[evolution.RunState, RunConfig]:
    """Load a checkpoint; with ``config`` given, refuse one written under a different configuration."""
    try:
        blob = json.loads(Path(path).read_text())
        if not isinstance(blob, dict):
            raise ValueError("top level is not an object")
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    if blob.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: schema_version {blob.get('schema_version')!r}, expected {SCHEMA_VERSION}")
    try:
        stored = config_from_dict(blob["config"])
        state = evolution.state_from_dict(blob["state"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if stored.hash() != blob.get("config_hash"):
        raise CheckpointError(f"{path}: stored config does not match its hash")
    if config is not None and config.hash() != blob["config_hash"]:
        raise CheckpointError(f"{path}: written under a different configuration "
                              f"(hash {blob['config_hash'][:12]} vs {config.hash()[:12]})")
    return state, config if config is not None else stored


def checkpoint_path(output_dir, generation: int) -> Path:
    return Path(output_dir) / f"ckpt_gen{generation:03d}.json"


# -- evolve / resume -----------------------------------------------------------------------

@dataclass
class EvolveResult:
    state: evolution.RunState
    output_dir: Path
    csv_path: Path
    best_path: Path


def run_evolve(config: RunConfig, workers: int = 1, state: Optional[evolution.RunState] = None,
               data: Optional[tuple[Dataset, Dataset]] = None, figures: bool = True) -> EvolveResult:
    """Run (or continue) the search for ``config.generations`` generations in total."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / CONFIG_NAME)
    train, _ = data if data is not None else load_datasets(config)
    search_train, val = split_for_search(config, train)
    if state is None:
        state = evolution.initialize(config, train.input_shape, train.num_classes)
    elif tuple(state.input_shape) != train.input_shape or state.num_classes != train.num_classes:
        raise CheckpointError("checkpoint does not match the dataset's input shape or class count")
    csv_path, best_path = out / CSV_NAME, out / BEST_NAME
    while state.generation < config.generations:
        state, _ = evolution.next_generation(state, config, search_train, val, workers)
        checkpoint_save(state, config, checkpoint_path(out, state.generation))
        csv_path.write_text(history_csv(state.history, config.log_wall_time))
        if state.best_genome is not None:
            best_path.write_text(_dump(best_genome_record(state, config)))
    if not csv_path.exists():
        csv_path.write_text(history_csv(state.history, config.log_wall_time))
    if figures and state.history:
        from .report import plot_history
        plot_history(state.history, out / "fitness.png")
    return EvolveResult(state, out, csv_path, best_path)


def resume(checkpoint, config: Optional[RunConfig] = None, workers: int = 1, figures: bool = True,
           output_dir=None) -> EvolveResult:
    state, config = checkpoint_resume(checkpoint, config)
    if output_dir is not None:
        config = config.replace(output_dir=str(output_dir))
    return run_evolve(config, workers, state=state, figures=figures)


# -- final training ------------------------------------------------------------------------------

def run_train_best(config: RunConfig, genome_file, data: Optional[tuple[Dataset, Dataset]] = None,
                   epochs: Optional[int] = None) -> dict:
    """Train the recorded genome on the full training set and score it on the test set."""
    rec = load_best_genome(genome_file)
    train, test = data if data is not None else load_datasets(config)
    ind = rec["individual"]
    if tuple(rec["input_shape"]) != train.input_shape or ind.num_classes != train.num_classes:
        raise ValueError(f"genome expects input {tuple(rec['input_shape'])} with {ind.num_classes} classes; "
                         f"dataset has {train.input_shape} with {train.num_classes}")
    net = compile_network(ind, rec["modules"], train.input_shape, init_seed=config.seed)
    epochs = config.final_epochs if epochs is None else epochs
    rng = evolution.stream(config.seed, 0, _FINAL_STREAM)
    losses = train_epochs(net, train, epochs, config.batch_size, config.lr, rng)
    test_acc = accuracy(net, test)
    result = {
        "test_error": 1.0 - test_acc,
        "test_accuracy": test_acc,
        "param_count": net.param_count(),
        "epochs": epochs,
        "final_loss": losses[-1] if losses else math.nan,
        "search_fitness": rec["fitness"],
    }
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / FINAL_NAME).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


# -- export ------------------------------------------------------------------------------------

def export(source, fmt: str, path=None, init_seed: int = 0) -> str:
    """Render a best-genome file (or a genome record/dict) as DOT or canonical JSON."""
    if fmt not in EXPORT_FORMATS:
        raise ValueError(f"unknown export format {fmt!r}; choose from {EXPORT_FORMATS}")
    if isinstance(source, (str, Path)):
        raw = json.loads(Path(source).read_text())
    else:
        raw = source
    if fmt == "json":
        if "individual" in raw:
            text = json.dumps(raw, indent=2, sort_keys=True) + "\n"
        else:
            text = json.dumps(genome_from_dict(raw).to_dict(), indent=2, sort_keys=True) + "\n"
    else:
        if "individual" not in raw:
            raise ValueError("DOT export needs a best-genome record (individual plus chosen modules)")
        rec = raw if isinstance(raw.get("individual"), IndividualGenome) else {
            **raw,
            "individual": IndividualGenome.from_dict(raw["individual"]),
            "modules": {int(g): ModuleGenome.from_dict(m) for g, m in raw["modules"].items()},
        }
        net = compile_network(rec["individual"], rec["modules"], tuple(rec["input_shape"]), init_seed=init_seed)
        text = to_dot(net, include_io=True)
    if path is not None:
        Path(path).write_text(text)
    return text


# -- repeats ----------------------------------------------------------------------------------

def run_repeats(config: RunConfig, repeat: int, workers: int = 1, figures: bool = True) -> list[dict]:
    """Independent runs with seeds seed, seed+1, ...; writes a summary CSV with mean and best."""
    base = Path(config.output_dir)
    rows = []
    for i in range(repeat):
        seed = config.seed + i
        cfg = config.replace(seed=seed, output_dir=str(base / f"seed_{seed}"))
        res = run_evolve(cfg, workers, figures=figures)
        rows.append({"seed": seed, "best_fitness": res.state.best_fitness,
                     "final_mean_fitness": res.state.history[-1]["mean_fitness"] if res.state.history else ""})
    base.mkdir(parents=True, exist_ok=True)
    best = [r["best_fitness"] for r in rows]
    with open(base / "repeats.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, ["seed", "best_fitness", "final_mean_fitness"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        fh.write(f"mean,{_fmt(float(np.mean(best)))},\nbest,{_fmt(float(np.max(best)))},\n")
    return rows
