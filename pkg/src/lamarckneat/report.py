"""PNG figures next to the CSV logs."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _column(history: Sequence[Mapping], key: str) -> list[float]:
    return [float(row[key]) for row in history]


def plot_history(history: Sequence[Mapping], path) -> Path:
    """Best-so-far and mean candidate accuracy per generation, plus species counts."""
    gens = _column(history, "generation")
    fig, (ax, ax2) = plt.subplots(2, 1, figsize=(6, 6), sharex=True)
    ax.plot(gens, _column(history, "best_fitness"), marker="o", label="best so far")
    ax.plot(gens, _column(history, "mean_fitness"), marker="s", label="mean of evaluated")
    ax.set_ylabel("validation accuracy")
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    ax2.step(gens, _column(history, "num_species_ind"), where="mid", label="individual species")
    ax2.step(gens, _column(history, "num_species_mod"), where="mid", label="module species")
    ax2.set_xlabel("generation")
    ax2.set_ylabel("species")
    ax2.legend(loc="upper left")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_ablation(results: Mapping[str, Sequence[float]], path, title: str = "final-generation accuracy") -> Path:
    """One box per ablation mode with the paired per-seed values drawn on top."""
    names = list(results)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.boxplot([results[n] for n in names])
    ax.set_xticks(range(1, len(names) + 1), names)
    for i, n in enumerate(names, start=1):
        ax.scatter([i] * len(results[n]), results[n], s=12, alpha=0.7)
    ax.set_ylabel("mean candidate accuracy")
    ax.set_title(title)
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
