"""Compatibility distance, species assignment and fitness sharing."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from .genome import Genome, HyperparamRanges, IndividualGenome, LayerGene

THRESHOLD_BOUNDS = (0.05, 10.0)


@dataclass
class Species:
    id: int
    representative: Genome
    members: list = field(default_factory=list)  # genome uids
    mean_adjusted_fitness: float = 0.0


@dataclass
class SpeciesSet:
    species: list = field(default_factory=list)
    threshold: float = 1.0
    target_count: int = 4
    next_id: int = 0

    def ids(self) -> list[int]:
        return [s.id for s in self.species]

    def by_id(self, sid: int) -> Species:
        for s in self.species:
            if s.id == sid:
                return s
        raise KeyError(sid)


def _gene_difference(a, b, ranges: HyperparamRanges) -> float:
    if isinstance(a, LayerGene):
        ha, hb = a.hyperparams, b.hyperparams
        if a.kind == "conv2d":
            dk = abs(ha["kernel_size"] - hb["kernel_size"]) / max(1, ranges.kernel[1] - ranges.kernel[0])
            df = abs(ha["out_channels"] - hb["out_channels"]) / max(
                1, ranges.conv_filters[1] - ranges.conv_filters[0])
            return (dk + df) / 2
        if a.kind == "dropout":
            return abs(ha["rate"] - hb["rate"]) / max(1e-12, ranges.dropout[1] - ranges.dropout[0])
        return 0.0
    return 0.0 if a.module_species_pointer == b.module_species_pointer else 1.0


def compatibility_distance(a: Genome, b: Genome, ranges: Optional[HyperparamRanges] = None,
                           structural_weight: float = 1.0, hyper_weight: float = 0.5) -> float:
    """NEAT-style distance: mismatched gene fraction plus mean hyperparameter gap.

    Excess and disjoint genes count alike. For individuals the classifier's
    fc1 width is treated as one more always-matching gene.
    """
    ranges = ranges or HyperparamRanges()
    ids_a, ids_b = set(a.nodes), set(b.nodes)
    n = max(len(ids_a), len(ids_b), 1)
    structural = len(ids_a ^ ids_b) / n
    diffs = [_gene_difference(a.nodes[i], b.nodes[i], ranges) for i in sorted(ids_a & ids_b)]
    if isinstance(a, IndividualGenome):
        width = max(1, ranges.fc_units[1] - ranges.fc_units[0])
        diffs.append(abs(a.fc1_units - b.fc1_units) / width)
    hyper = sum(diffs) / len(diffs) if diffs else 0.0
    return structural_weight * structural + hyper_weight * hyper


def speciate(population: Sequence[Genome], previous: SpeciesSet,
             ranges: Optional[HyperparamRanges] = None, structural_weight: float = 1.0,
             hyper_weight: float = 0.5) -> SpeciesSet:
    """Assign each genome to the first species whose representative is close enough.

    Surviving species keep their ids; their next representative is the new
    member closest to the old one. Empty species are dropped. Each genome's
    ``species_id`` is set in place.
    """
    if not population:
        raise ValueError("cannot speciate an empty population")

    def dist(x, y):
        return compatibility_distance(x, y, ranges, structural_weight, hyper_weight)

    result = SpeciesSet(threshold=previous.threshold, target_count=previous.target_count,
                        next_id=previous.next_id)
    pool = [Species(s.id, s.representative, []) for s in previous.species]
    members: dict[int, list] = {s.id: [] for s in pool}
    for g in population:
        for s in pool:
            if dist(g, s.representative) <= result.threshold:
                break
        else:
            s = Species(result.next_id, g.clone(), [])
            result.next_id += 1
            pool.append(s)
            members[s.id] = []
        members[s.id].append(g)
        g.species_id = s.id

    for s in pool:
        group = members[s.id]
        if not group:
            continue
        rep = min(group, key=lambda g: dist(g, s.representative))
        result.species.append(Species(s.id, rep.clone(), [g.uid for g in group]))
    share_fitness(result, population)
    return result


def share_fitness(species_set: SpeciesSet, population: Sequence[Genome]) -> dict[int, float]:
    """Set each species' mean adjusted fitness; returns adjusted fitness by genome uid."""
    by_uid = {g.uid: g for g in population}
    adjusted = {}
    for s in species_set.species:
        size = len(s.members)
        vals = [by_uid[u].fitness / size for u in s.members]
        for u, v in zip(s.members, vals):
            adjusted[u] = v
        s.mean_adjusted_fitness = sum(vals) / size if size else 0.0
    return adjusted


def adjust_threshold(species_set: SpeciesSet) -> float:
    n = len(species_set.species)
    t = species_set.threshold
    if n > species_set.target_count:
        t *= 1.1
    elif n < species_set.target_count:
        t *= 0.9
    lo, hi = THRESHOLD_BOUNDS
    return min(hi, max(lo, t))
