"""Co-evolution of blueprints and modules with Lamarckian last-layer inheritance.

One generation: evaluate a random subset of individuals (each assembled,
trained briefly, scored on validation data, and its trained output layer
written back into the genome), credit module fitness from the networks they
took part in, breed both populations species by species, then re-speciate.

Randomness is split into named streams derived from
``(seed, generation, purpose, id)`` so results do not depend on evaluation
order or worker count, and ablations share as many draws as possible.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .assembly import AssemblyError, assemble, extract_last_layer
from .config import RunConfig
from .datasets import Dataset
from .genome import (ADD_NODE_KIND_PROBS, INPUT_ID, SCHEMA_VERSION, BlueprintGene, Genome, IndividualGenome,
                     InnovationCounter, LastLayerParams, LayerGene, ModuleGenome, genome_from_dict,
                     new_individual_genome, new_module_genome, sample_hyperparams)
from .speciation import Species, SpeciesSet, adjust_threshold, share_fitness, speciate
from .training import TrainingDiverged, accuracy, train_epochs

log = logging.getLogger(__name__)

ELITE_FRACTION = 0.2
CROSSOVER_PROB = 0.75
STRUCTURAL_ADD_PROB = 0.5
WEIGHT_MUTATION_PROB = 0.5
WEIGHT_MUTATION_FRACTION = 0.15
WEIGHT_MUTATION_SCALE = 0.01
K_MIX_RANGE = (2.0 / 3.0, 1.0)
UNUSED_BONUS = 0.01
_PARENT_REDRAWS = 16

# rng stream purposes
_INIT, _SELECT, _CANDIDATE, _MODULE_BREED, _IND_BREED, _WEIGHTS, _REPAIR = range(7)

CSV_COLUMNS = ("generation", "best_fitness", "mean_fitness", "num_species_ind", "num_species_mod",
               "best_param_count", "wall_time_s")


def stream(seed: int, generation: int, purpose: int, *ids: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, generation, purpose, *ids]))


@dataclass
class EvalRecord:
    individual_id: int
    fitness: float
    chosen_module_ids: list
    wall_time: float
    param_count: int = 0
    flag: Optional[str] = None


@dataclass
class RunState:
    generation: int
    individuals: list
    modules: list
    ind_species: SpeciesSet
    mod_species: SpeciesSet
    counter: InnovationCounter
    seed: int
    next_uid: int = 0
    input_shape: tuple = (28, 28, 1)
    num_classes: int = 10
    best_fitness: float = -1.0
    best_genome: Optional[IndividualGenome] = None
    best_modules: dict = field(default_factory=dict)   # blueprint gene id -> ModuleGenome
    best_param_count: int = 0
    history: list = field(default_factory=list)         # CSV rows as dicts

    def take_uid(self) -> int:
        self.next_uid += 1
        return self.next_uid - 1

    def modules_by_species(self) -> dict[int, list]:
        groups: dict[int, list] = {}
        for m in self.modules:
            groups.setdefault(m.species_id, []).append(m)
        return groups


# -- initialisation -------------------------------------------------------------

def initialize(config: RunConfig, input_shape: tuple, num_classes: int) -> RunState:
    rng = stream(config.seed, 0, _INIT)
    counter = InnovationCounter()
    state = RunState(0, [], [], SpeciesSet(threshold=config.initial_threshold, target_count=config.target_species),
                     SpeciesSet(threshold=config.initial_threshold, target_count=config.target_species),
                     counter, config.seed, input_shape=tuple(input_shape), num_classes=num_classes)
    shared: dict = {}
    state.modules = [new_module_genome(rng, config.ranges, counter, uid=state.take_uid(), shared=shared)
                     for _ in range(config.pop_module)]
    state.mod_species = _speciate(state.modules, state.mod_species, config)
    ids = state.mod_species.ids()
    shared = {}
    state.individuals = [new_individual_genome(rng, config.ranges, counter, ids, num_classes,
                                               uid=state.take_uid(), shared=shared)
                         for _ in range(config.pop_individual)]
    state.ind_species = _speciate(state.individuals, state.ind_species, config)
    return state


def _speciate(population, previous: SpeciesSet, config: RunConfig) -> SpeciesSet:
    result = speciate(population, previous, config.ranges, config.structural_weight, config.hyper_weight)
    result.threshold = adjust_threshold(result)
    return result


# -- fitness evaluation -----------------------------------------------------------

@dataclass
class _CandidateResult:
    uid: int
    fitness: float
    chosen: list
    modules: dict            # blueprint gene id -> module uid
    trained: Optional[LastLayerParams]
    param_count: int
    wall_time: float
    flag: Optional[str] = None


def evaluate_candidate(ind: IndividualGenome, modules_by_species: dict, config: RunConfig, generation: int,
                       train: Dataset, val: Dataset, input_shape: tuple) -> _CandidateResult:
    """Assemble, train ``k_epochs`` and score one individual. Pure given its inputs."""
    start = time.perf_counter()
    rng = stream(config.seed, generation, _CANDIDATE, ind.uid)
    try:
        net, chosen = assemble(ind, modules_by_species, rng, input_shape, config.ranges, init_seed=config.seed)
    except AssemblyError as exc:
        log.warning("individual %d failed to assemble: %s", ind.uid, exc)
        return _CandidateResult(ind.uid, 0.0, [], {}, None, 0, time.perf_counter() - start, "assembly")
    try:
        train_epochs(net, train, config.k_epochs, config.batch_size, config.lr, rng)
    except TrainingDiverged:
        log.warning("individual %d diverged", ind.uid)
        return _CandidateResult(ind.uid, 0.0, chosen, dict(net.module_choice), None, net.param_count(),
                                time.perf_counter() - start, "diverged")
    fit = accuracy(net, val)
    return _CandidateResult(ind.uid, fit, chosen, dict(net.module_choice), extract_last_layer(net),
                            net.param_count(), time.perf_counter() - start)


_WORKER_DATA: dict = {}


def _worker_init(train, val):
    _WORKER_DATA["train"], _WORKER_DATA["val"] = train, val


def _worker_eval(args):
    ind, modules, config, generation, input_shape = args
    return evaluate_candidate(ind, modules, config, generation, _WORKER_DATA["train"], _WORKER_DATA["val"],
                              input_shape)


def evaluate_fitness(state: RunState, config: RunConfig, train: Dataset, val: Dataset,
                     workers: int = 1) -> tuple[list[EvalRecord], Optional[EvalRecord]]:
    """Score ``num_network`` distinct individuals and propagate fitness to modules.

    Returns the records (in selection order) and the best one.
    """
    n = config.num_network
    if not 1 <= n <= len(state.individuals):
        raise ValueError(f"num_network={n} must lie in [1, {len(state.individuals)}]")
    rng = stream(state.seed, state.generation, _SELECT)
    picks = [state.individuals[i] for i in rng.choice(len(state.individuals), size=n, replace=False)]
    groups = state.modules_by_species()
    for ind in picks:
        ind.age += 1

    if workers > 1:
        tasks = []
        for ind in picks:
            pointed = {g.module_species_pointer for g in ind.nodes.values()}
            tasks.append((ind, {s: groups[s] for s in pointed if s in groups}, config, state.generation,
                          state.input_shape))
        with ProcessPoolExecutor(workers, initializer=_worker_init, initargs=(train, val)) as pool:
            results = list(pool.map(_worker_eval, tasks))
    else:
        results = [evaluate_candidate(ind, groups, config, state.generation, train, val, state.input_shape)
                   for ind in picks]

    module_by_uid = {m.uid: m for m in state.modules}
    credit: dict[int, list[float]] = {}
    records = []
    for ind, res in zip(picks, results):
        ind.fitness = res.fitness
        if config.lamarckian and res.trained is not None:
            ind.last_layer = res.trained
        for uid in sorted(set(res.chosen)):
            credit.setdefault(uid, []).append(res.fitness)
        records.append(EvalRecord(ind.uid, res.fitness, list(res.chosen), res.wall_time,
                                  res.param_count, res.flag))
        if res.flag is None and res.fitness > state.best_fitness:
            state.best_fitness = res.fitness
            state.best_genome = ind.clone()
            state.best_modules = {g: module_by_uid[u].clone() for g, u in res.modules.items()}
            state.best_param_count = res.param_count
    for uid, fits in credit.items():
        m = module_by_uid[uid]
        m.fitness = sum(fits) / len(fits)
        m.age += len(fits)

    avg = sum(r.fitness for r in records) / len(records)
    for g in (*state.individuals, *state.modules):
        if g.age == 0:
            g.fitness = avg + UNUSED_BONUS
    best = max(records, key=lambda r: r.fitness) if records else None
    return records, best


# -- selection and operators ------------------------------------------------------

def tournament_select(members: Sequence[Genome], rng: np.random.Generator) -> Genome:
    """Binary tournament over two distinct members; ties are broken by a coin flip."""
    if len(members) == 1:
        return members[0]
    i, j = rng.choice(len(members), size=2, replace=False)
    a, b = members[i], members[j]
    if a.fitness == b.fitness:
        return a if rng.random() < 0.5 else b
    return a if a.fitness > b.fitness else b


def select_parents(members: Sequence[Genome], rng: np.random.Generator) -> tuple[Genome, Genome]:
    """Two distinct tournament winners.

    When the second tournament keeps returning the first parent (a two-member
    species with unequal fitness always does), fall back to a uniform draw
    among the other members.
    """
    p1 = tournament_select(members, rng)
    for _ in range(_PARENT_REDRAWS):
        p2 = tournament_select(members, rng)
        if p2 is not p1:
            return p1, p2
    others = [m for m in members if m is not p1]
    return p1, others[int(rng.integers(len(others)))]


def structural_crossover(p1: Genome, p2: Genome, rng: np.random.Generator) -> Genome:
    """NEAT alignment by innovation id; structure and unmatched genes come from the fitter parent."""
    fitter, other = (p1, p2) if p1.fitness >= p2.fitness else (p2, p1)
    child = fitter.clone()
    for gid in sorted(child.nodes):
        if gid in other.nodes and rng.random() < 0.5:
            child.nodes[gid] = type(other.nodes[gid])(**_gene_fields(other.nodes[gid]))
    child.fitness, child.age, child.species_id = 0.0, 0, None
    return child


def _gene_fields(gene) -> dict:
    if isinstance(gene, LayerGene):
        return {"innovation_id": gene.innovation_id, "kind": gene.kind, "hyperparams": dict(gene.hyperparams)}
    return {"innovation_id": gene.innovation_id, "module_species_pointer": gene.module_species_pointer}


def structural_mutate_module(m: ModuleGenome, rng: np.random.Generator, ranges,
                             counter: InnovationCounter) -> ModuleGenome:
    """Either splice a new layer onto a random edge or re-sample one hyperparameter (p=0.5 each)."""
    m = m.clone()
    mutable = [gid for gid in sorted(m.nodes) if m.nodes[gid].hyperparams]
    if rng.random() < STRUCTURAL_ADD_PROB or not mutable:
        edges = sorted(m.edges)
        a, b = edges[int(rng.integers(len(edges)))]
        kinds = list(ADD_NODE_KIND_PROBS)
        kind = kinds[int(rng.choice(len(kinds), p=list(ADD_NODE_KIND_PROBS.values())))]
        gid = counter.take()
        m.nodes[gid] = LayerGene(gid, kind, sample_hyperparams(kind, rng, ranges))
        del m.edges[(a, b)]
        m.edges[(a, gid)] = counter.take()
        m.edges[(gid, b)] = counter.take()
    else:
        gene = m.nodes[mutable[int(rng.integers(len(mutable)))]]
        keys = sorted(gene.hyperparams)
        key = keys[int(rng.integers(len(keys)))]
        gene.hyperparams[key] = sample_hyperparams(gene.kind, rng, ranges)[key]
    return m


def structural_mutate_individual(ind: IndividualGenome, rng: np.random.Generator, species_ids,
                                 counter: InnovationCounter) -> IndividualGenome:
    """Either add a parallel gene between an upstream and a downstream node, or re-point a gene."""
    species = sorted(species_ids)
    if not species:
        raise ValueError("need at least one module species")
    ind = ind.clone()
    if rng.random() < STRUCTURAL_ADD_PROB:
        sources = [INPUT_ID, *sorted(ind.nodes)]
        u = sources[int(rng.integers(len(sources)))]
        targets = sorted(ind.descendants(u))
        v = targets[int(rng.integers(len(targets)))]
        gid = counter.take()
        ind.nodes[gid] = BlueprintGene(gid, species[int(rng.integers(len(species)))])
        ind.edges[(u, gid)] = counter.take()
        ind.edges[(gid, v)] = counter.take()
    else:
        genes = sorted(ind.nodes)
        gene = ind.nodes[genes[int(rng.integers(len(genes)))]]
        gene.module_species_pointer = species[int(rng.integers(len(species)))]
    return ind


def weighted_crossover_last_layer(better: LastLayerParams, other: LastLayerParams, k_mix: float,
                                  rng: Optional[np.random.Generator] = None) -> LastLayerParams:
    """Convex blend leaning on the fitter parent: k*better + (1-k)*other.

    ``rng`` is accepted for interface symmetry with the other operators; the
    blend itself is deterministic. Raises ValueError on a shape mismatch so the
    caller can fall back to copying ``better``.
    """
    lo, hi = K_MIX_RANGE
    if not lo < k_mix <= hi:
        raise ValueError(f"k_mix={k_mix} outside ({lo:.4f}, {hi}]")
    if better.weights.shape != other.weights.shape or better.biases.shape != other.biases.shape:
        raise ValueError("last-layer shapes differ")
    w = k_mix * better.weights.astype(np.float64) + (1.0 - k_mix) * other.weights.astype(np.float64)
    b = k_mix * better.biases.astype(np.float64) + (1.0 - k_mix) * other.biases.astype(np.float64)
    return LastLayerParams(w.astype(better.weights.dtype), b.astype(better.biases.dtype))


def _open_unit(rng: np.random.Generator, n: int) -> np.ndarray:
    u = rng.random(n)
    while np.any(u == 0.0):
        zero = u == 0.0
        u[zero] = rng.random(int(zero.sum()))
    return u


def sample_k_mix(rng: np.random.Generator) -> float:
    lo, hi = K_MIX_RANGE
    while True:
        k = float(rng.uniform(lo, hi))
        if lo < k < hi:
            return k


def weight_mutate(params: LastLayerParams, rng: np.random.Generator, symmetric: bool = False) -> LastLayerParams:
    """With probability 0.5, nudge floor(15%) of the weights (not biases) by 0.01*u, u in (0, 1)."""
    out = params.copy()
    if rng.random() >= WEIGHT_MUTATION_PROB:
        return out
    flat = out.weights.reshape(-1)
    count = int(math.floor(WEIGHT_MUTATION_FRACTION * flat.size))
    idx = rng.choice(flat.size, size=count, replace=False)
    delta = WEIGHT_MUTATION_SCALE * _open_unit(rng, count)
    if symmetric:
        delta *= np.where(rng.random(count) < 0.5, -1.0, 1.0)
    old = flat[idx]
    new = (old.astype(np.float64) + delta).astype(flat.dtype)
    # a delta below half an ulp would round away; move one representable step instead
    lost = new == old
    new[lost] = np.nextafter(old[lost], np.copysign(np.inf, delta[lost]).astype(flat.dtype))
    flat[idx] = new
    return out


def _allocate(total: int, weights: Sequence[float]) -> list[int]:
    """Largest-remainder split of ``total`` proportional to ``weights``."""
    if total <= 0 or not weights:
        return [0] * len(weights)
    s = sum(weights)
    if s <= 0:
        weights = [1.0] * len(weights)
        s = float(len(weights))
    raw = [total * w / s for w in weights]
    base = [int(math.floor(r)) for r in raw]
    rest = total - sum(base)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:rest]:
        base[i] += 1
    return base


def elite_count(species_size: int) -> int:
    return max(1, int(math.floor(ELITE_FRACTION * species_size)))


@dataclass
class Breeding:
    """Context for one round of offspring generation; ``stats`` counts the branches taken."""
    config: RunConfig
    counter: InnovationCounter
    state: RunState
    species_ids: list
    rng: np.random.Generator
    weight_rng: np.random.Generator
    stats: dict = field(default_factory=lambda: {"crossover": 0, "mutation_only": 0, "weighted": 0})


def _make_child(members: list, b: Breeding) -> Genome:
    rng = b.rng
    is_ind = isinstance(members[0], IndividualGenome)

    def mutate(g):
        if is_ind:
            return structural_mutate_individual(g, rng, b.species_ids, b.counter)
        return structural_mutate_module(g, rng, b.config.ranges, b.counter)

    pair = None
    if len(members) >= 2:
        p1, p2 = select_parents(members, rng)
        if rng.random() < CROSSOVER_PROB:
            child = mutate(structural_crossover(p1, p2, rng))
            pair = (p1, p2) if p1.fitness >= p2.fitness else (p2, p1)
            b.stats["crossover"] += 1
        else:
            child = mutate((p1, p2)[int(rng.integers(2))])
            b.stats["mutation_only"] += 1
    else:
        child = mutate(members[0])
        b.stats["mutation_only"] += 1
    child.uid = b.state.take_uid()
    child.fitness, child.age, child.species_id = 0.0, 0, None

    if is_ind:
        wrng = b.weight_rng
        if b.config.weight_evolution:
            if pair is not None:
                better, other = pair
                child.fc1_units = better.fc1_units
                if better.fc1_units == other.fc1_units:
                    child.last_layer = weighted_crossover_last_layer(better.last_layer, other.last_layer,
                                                                     sample_k_mix(wrng))
                    b.stats["weighted"] += 1
                else:
                    child.last_layer = better.last_layer.copy()
            child.last_layer = weight_mutate(child.last_layer, wrng, b.config.symmetric_weight_perturbation)
        else:
            child.last_layer = LastLayerParams.glorot(child.fc1_units, child.num_classes, wrng)
    return child


def generate_offspring(population: list, species_set: SpeciesSet, b: Breeding) -> list:
    """Next population: each species' top 20% (at least one) plus children.

    Children are shared out across species in proportion to the species'
    summed shared fitness (its mean raw fitness).
    """
    by_uid = {g.uid: g for g in population}
    share_fitness(species_set, population)
    groups = []
    for s in species_set.species:
        members = [by_uid[u] for u in s.members]
        ranked = sorted(members, key=lambda g: -g.fitness)
        groups.append((members, ranked[:elite_count(len(members))]))
    n_elite = sum(len(e) for _, e in groups)
    weights = [s.mean_adjusted_fitness * len(s.members) for s in species_set.species]
    quotas = _allocate(len(population) - n_elite, weights)
    out = []
    for (members, elites), n_children in zip(groups, quotas):
        out.extend(elites)
        for _ in range(n_children):
            out.append(_make_child(members, b))
    return out


def survival_selection(population: list, offspring: list, size: int) -> list:
    """Offspring truncated to ``size``, guaranteeing the current best genome survives."""
    survivors = list(offspring[:size])
    if population:
        best = max(population, key=lambda g: g.fitness)
        if all(g.uid != best.uid for g in survivors):
            survivors[-1] = best
    return survivors


def repair_pointers(individuals: list, species_ids, rng: np.random.Generator) -> int:
    """Re-point genes whose module species went extinct; returns how many changed."""
    valid = sorted(species_ids)
    fixed = 0
    for ind in individuals:
        for gid in sorted(ind.nodes):
            gene = ind.nodes[gid]
            if gene.module_species_pointer not in species_ids:
                gene.module_species_pointer = valid[int(rng.integers(len(valid)))]
                fixed += 1
    return fixed


# -- generation loop -----------------------------------------------------------------

def next_generation(state: RunState, config: RunConfig, train: Dataset, val: Dataset,
                    workers: int = 1) -> tuple[RunState, list[EvalRecord]]:
    if not 1 <= config.num_network <= len(state.individuals):
        raise ValueError(f"num_network={config.num_network} must lie in [1, {len(state.individuals)}]")
    start = time.perf_counter()
    gen = state.generation
    records, _ = evaluate_fitness(state, config, train, val, workers)

    wrng = stream(state.seed, gen, _WEIGHTS)
    mod_breed = Breeding(config, state.counter, state, state.mod_species.ids(),
                          stream(state.seed, gen, _MODULE_BREED), wrng)
    offspring = generate_offspring(state.modules, state.mod_species, mod_breed)
    state.modules = survival_selection(state.modules, offspring, config.pop_module)
    state.mod_species = _speciate(state.modules, state.mod_species, config)
    species_ids = set(state.mod_species.ids())
    repair_pointers(state.individuals, species_ids, stream(state.seed, gen, _REPAIR))

    ind_breed = Breeding(config, state.counter, state, sorted(species_ids),
                          stream(state.seed, gen, _IND_BREED), wrng)
    offspring = generate_offspring(state.individuals, state.ind_species, ind_breed)
    state.individuals = survival_selection(state.individuals, offspring, config.pop_individual)
    state.ind_species = _speciate(state.individuals, state.ind_species, config)

    state.generation += 1
    fits = [r.fitness for r in records]
    state.history.append({
        "generation": gen,
        "best_fitness": state.best_fitness,
        "mean_fitness": sum(fits) / len(fits),
        "num_species_ind": len(state.ind_species.species),
        "num_species_mod": len(state.mod_species.species),
        "best_param_count": state.best_param_count,
        "wall_time_s": time.perf_counter() - start if config.log_wall_time else 0.0,
    })
    log.info("generation %d: best %.4f mean %.4f species %d/%d", gen, state.best_fitness,
             state.history[-1]["mean_fitness"], len(state.ind_species.species), len(state.mod_species.species))
    return state, records


# -- serialisation ---------------------------------------------------------------------

def _species_set_to_dict(ss: SpeciesSet) -> dict:
    return {
        "threshold": ss.threshold,
        "target_count": ss.target_count,
        "next_id": ss.next_id,
        "species": [{"id": s.id, "representative": s.representative.to_dict(), "members": list(s.members),
                     "mean_adjusted_fitness": s.mean_adjusted_fitness} for s in ss.species],
    }


def _species_set_from_dict(d: dict) -> SpeciesSet:
    species = [Species(int(s["id"]), genome_from_dict(s["representative"]), [int(u) for u in s["members"]],
                       float(s["mean_adjusted_fitness"])) for s in d["species"]]
    return SpeciesSet(species, float(d["threshold"]), int(d["target_count"]), int(d["next_id"]))


def state_to_dict(state: RunState) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "generation": state.generation,
        "seed": state.seed,
        "next_uid": state.next_uid,
        "next_innovation": state.counter.next_id,
        "input_shape": list(state.input_shape),
        "num_classes": state.num_classes,
        "individuals": [g.to_dict() for g in state.individuals],
        "modules": [g.to_dict() for g in state.modules],
        "ind_species": _species_set_to_dict(state.ind_species),
        "mod_species": _species_set_to_dict(state.mod_species),
        "best_fitness": state.best_fitness,
        "best_genome": state.best_genome.to_dict() if state.best_genome is not None else None,
        "best_modules": {str(k): m.to_dict() for k, m in sorted(state.best_modules.items())},
        "best_param_count": state.best_param_count,
        "history": [dict(row) for row in state.history],
    }


def state_from_dict(d: dict) -> RunState:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported state schema_version {d.get('schema_version')!r}")
    best = d["best_genome"]
    return RunState(
        generation=int(d["generation"]),
        individuals=[IndividualGenome.from_dict(g) for g in d["individuals"]],
        modules=[ModuleGenome.from_dict(g) for g in d["modules"]],
        ind_species=_species_set_from_dict(d["ind_species"]),
        mod_species=_species_set_from_dict(d["mod_species"]),
        counter=InnovationCounter(int(d["next_innovation"])),
        seed=int(d["seed"]),
        next_uid=int(d["next_uid"]),
        input_shape=tuple(d["input_shape"]),
        num_classes=int(d["num_classes"]),
        best_fitness=float(d["best_fitness"]),
        best_genome=IndividualGenome.from_dict(best) if best is not None else None,
        best_modules={int(k): ModuleGenome.from_dict(m) for k, m in d["best_modules"].items()},
        best_param_count=int(d["best_param_count"]),
        history=[dict(row) for row in d["history"]],
    )
