"""Genotypes for the two co-evolving populations.

A :class:`ModuleGenome` is a small DAG of layer genes (conv, pool, dropout).
An :class:`IndividualGenome` (a blueprint) is a DAG whose genes point at
module species, plus a fixed two-layer dense classifier and the stored
parameters of its output layer. Node and edge genes of both populations draw
ids from one shared :class:`InnovationCounter`.
"""
from __future__ import annotations

import copy
import itertools
import threading
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .tensor_engine import glorot_init

SCHEMA_VERSION = 1

# virtual endpoints shared by every genome, so they always align
INPUT_ID = -1
OUTPUT_ID = -2

MODULE_KINDS = ("conv2d", "maxpool2d", "dropout")
ADD_NODE_KIND_PROBS = {"conv2d": 0.6, "maxpool2d": 0.2, "dropout": 0.2}


class InnovationCounter:
    """Global source of innovation ids; safe to share between threads."""

    def __init__(self, next_id: int = 0):
        self.next_id = next_id
        self._lock = threading.Lock()

    def take(self) -> int:
        with self._lock:
            value = self.next_id
            self.next_id += 1
            return value

    def __getstate__(self):
        return {"next_id": self.next_id}

    def __setstate__(self, state):
        self.__init__(state["next_id"])


@dataclass(frozen=True)
class HyperparamRanges:
    conv_filters: tuple[int, int] = (32, 80)
    fc_units: tuple[int, int] = (128, 800)
    kernel: tuple[int, int] = (2, 7)
    total_layers: tuple[int, int] = (4, 20)
    dropout: tuple[float, float] = (0.1, 0.9)

    @classmethod
    def from_dict(cls, data: dict) -> "HyperparamRanges":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown range keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) for k, v in data.items()})

    def to_dict(self) -> dict:
        return {k: list(getattr(self, k)) for k in self.__dataclass_fields__}


# -- genes ------------------------------------------------------------------

@dataclass
class LayerGene:
    innovation_id: int
    kind: str
    hyperparams: dict

    def to_dict(self) -> dict:
        return {"innovation_id": self.innovation_id, "kind": self.kind,
                "hyperparams": dict(sorted(self.hyperparams.items()))}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerGene":
        return cls(int(d["innovation_id"]), d["kind"], dict(d["hyperparams"]))


@dataclass
class BlueprintGene:
    innovation_id: int
    module_species_pointer: int

    def to_dict(self) -> dict:
        return {"innovation_id": self.innovation_id,
                "module_species_pointer": self.module_species_pointer}

    @classmethod
    def from_dict(cls, d: dict) -> "BlueprintGene":
        return cls(int(d["innovation_id"]), int(d["module_species_pointer"]))


@dataclass
class LastLayerParams:
    weights: np.ndarray  # fc1_units x num_classes
    biases: np.ndarray   # num_classes

    def copy(self) -> "LastLayerParams":
        return LastLayerParams(self.weights.copy(), self.biases.copy())

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "biases": self.biases.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LastLayerParams":
        return cls(np.asarray(d["weights"], dtype=np.float32).reshape(len(d["weights"]), -1),
                   np.asarray(d["biases"], dtype=np.float32))

    @classmethod
    def glorot(cls, fc1_units: int, num_classes: int, rng: np.random.Generator) -> "LastLayerParams":
        return cls(glorot_init(fc1_units, num_classes, (fc1_units, num_classes), rng),
                   np.zeros(num_classes, dtype=np.float32))


# -- genomes ----------------------------------------------------------------

@dataclass
class _GraphGenome:
    """Node/edge bookkeeping shared by both genome kinds.

    ``edges`` maps (from_id, to_id) to the edge's innovation id. Endpoints are
    :data:`INPUT_ID` and :data:`OUTPUT_ID` and are not stored in ``nodes``.
    """
    nodes: dict
    edges: dict
    uid: int = -1
    fitness: float = 0.0
    age: int = 0
    species_id: Optional[int] = None

    def all_vertices(self) -> list[int]:
        return [INPUT_ID, *sorted(self.nodes), OUTPUT_ID]

    def predecessors(self, node: int) -> list[int]:
        return sorted(a for (a, b) in self.edges if b == node)

    def successors(self, node: int) -> list[int]:
        return sorted(b for (a, b) in self.edges if a == node)

    def topological_order(self) -> Optional[list[int]]:
        """Kahn's algorithm with smallest-id tie-breaking; None if there is a cycle."""
        verts = set(self.all_vertices())
        for a, b in self.edges:
            verts.add(a)
            verts.add(b)
        indeg = {v: 0 for v in verts}
        for _, b in self.edges:
            indeg[b] += 1
        ready = sorted(v for v, d in indeg.items() if d == 0)
        order = []
        while ready:
            v = ready.pop(0)
            order.append(v)
            for s in self.successors(v):
                indeg[s] -= 1
                if indeg[s] == 0:
                    ready.append(s)
                    ready.sort()
        return order if len(order) == len(verts) else None

    def descendants(self, node: int) -> set[int]:
        seen: set[int] = set()
        stack = [node]
        while stack:
            for s in self.successors(stack.pop()):
                if s not in seen:
                    seen.add(s)
                    stack.append(s)
        return seen

    def ancestors(self, node: int) -> set[int]:
        seen: set[int] = set()
        stack = [node]
        while stack:
            for p in self.predecessors(stack.pop()):
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        return seen

    def innovation_ids(self) -> list[int]:
        return list(self.nodes) + list(self.edges.values())

    def _graph_violations(self) -> list[str]:
        out = []
        for (a, b) in self.edges:
            for end in (a, b):
                if end not in self.nodes and end not in (INPUT_ID, OUTPUT_ID):
                    out.append(f"dangling edge {a}->{b}")
                    break
        if self.topological_order() is None:
            out.append("cycle")
        else:
            from_input = self.descendants(INPUT_ID)
            to_output = self.ancestors(OUTPUT_ID)
            for n in sorted(self.nodes):
                if n not in from_input:
                    out.append(f"node {n} unreachable from input")
                if n not in to_output:
                    out.append(f"node {n} does not reach output")
            if OUTPUT_ID not in from_input:
                out.append("output unreachable from input")
        ids = self.innovation_ids()
        if len(ids) != len(set(ids)):
            out.append("duplicate innovation ids")
        if not self.nodes:
            out.append("no genes")
        return out

    def _edges_to_list(self) -> list:
        return [[a, b, i] for (a, b), i in sorted(self.edges.items())]


@dataclass
class ModuleGenome(_GraphGenome):
    kind_name = "module"

    def clone(self) -> "ModuleGenome":
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "type": "module",
            "uid": self.uid,
            "nodes": [self.nodes[k].to_dict() for k in sorted(self.nodes)],
            "edges": self._edges_to_list(),
            "fitness": self.fitness,
            "age": self.age,
            "species_id": self.species_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModuleGenome":
        _check_schema(d, "module")
        nodes = {g.innovation_id: g for g in map(LayerGene.from_dict, d["nodes"])}
        edges = {(int(a), int(b)): int(i) for a, b, i in d["edges"]}
        return cls(nodes, edges, int(d["uid"]), float(d["fitness"]), int(d["age"]), d["species_id"])


@dataclass
class IndividualGenome(_GraphGenome):
    fc1_units: int = 128
    num_classes: int = 2
    last_layer: Optional[LastLayerParams] = None
    kind_name = "individual"

    def clone(self) -> "IndividualGenome":
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "type": "individual",
            "uid": self.uid,
            "nodes": [self.nodes[k].to_dict() for k in sorted(self.nodes)],
            "edges": self._edges_to_list(),
            "classifier": {"fc1_units": self.fc1_units, "num_classes": self.num_classes},
            "last_layer": self.last_layer.to_dict(),
            "fitness": self.fitness,
            "age": self.age,
            "species_id": self.species_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IndividualGenome":
        _check_schema(d, "individual")
        nodes = {g.innovation_id: g for g in map(BlueprintGene.from_dict, d["nodes"])}
        edges = {(int(a), int(b)): int(i) for a, b, i in d["edges"]}
        clf = d["classifier"]
        return cls(nodes, edges, int(d["uid"]), float(d["fitness"]), int(d["age"]), d["species_id"],
                   fc1_units=int(clf["fc1_units"]), num_classes=int(clf["num_classes"]),
                   last_layer=LastLayerParams.from_dict(d["last_layer"]))


Genome = Union[ModuleGenome, IndividualGenome]


def _check_schema(d: dict, expected_type: str) -> None:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported genome schema_version {d.get('schema_version')!r}")
    if d.get("type") != expected_type:
        raise ValueError(f"expected a {expected_type} genome, got {d.get('type')!r}")


def genome_from_dict(d: dict) -> Genome:
    return ModuleGenome.from_dict(d) if d.get("type") == "module" else IndividualGenome.from_dict(d)


# -- construction -------------------------------------------------------------

def sample_hyperparams(kind: str, rng: np.random.Generator, ranges: HyperparamRanges) -> dict:
    if kind == "conv2d":
        return {"kernel_size": int(rng.integers(ranges.kernel[0], ranges.kernel[1] + 1)),
                "out_channels": int(rng.integers(ranges.conv_filters[0], ranges.conv_filters[1] + 1))}
    if kind == "dropout":
        return {"rate": float(rng.uniform(*ranges.dropout))}
    if kind == "maxpool2d":
        return {}
    raise ValueError(f"not a module layer kind: {kind!r}")


def _take(counter: InnovationCounter, shared: Optional[dict], key) -> int:
    if shared is None:
        return counter.take()
    if key not in shared:
        shared[key] = counter.take()
    return shared[key]


def new_module_genome(rng: np.random.Generator, ranges: HyperparamRanges,
                      counter: InnovationCounter, uid: int = -1, shared: Optional[dict] = None) -> ModuleGenome:
    """A single conv gene between the input and output endpoints.

    Genomes built with the same ``shared`` dict reuse innovation ids for the
    same structural position, so a founding population is aligned gene-by-gene.
    """
    gid = _take(counter, shared, ("gene", 0))
    gene = LayerGene(gid, "conv2d", sample_hyperparams("conv2d", rng, ranges))
    edges = {(INPUT_ID, gid): _take(counter, shared, ("edge", INPUT_ID, gid)),
             (gid, OUTPUT_ID): _take(counter, shared, ("edge", gid, OUTPUT_ID))}
    return ModuleGenome({gid: gene}, edges, uid=uid)


def new_individual_genome(rng: np.random.Generator, ranges: HyperparamRanges, counter: InnovationCounter,
                          module_species_ids, num_classes: int, uid: int = -1,
                          shared: Optional[dict] = None) -> IndividualGenome:
    """A chain of 2-4 blueprint genes, each pointing at a random module species.

    ``shared`` aligns innovation ids across a founding population (see new_module_genome).
    """
    species = sorted(module_species_ids)
    if not species:
        raise ValueError("need at least one module species")
    n_genes = int(rng.integers(2, 5))
    ids = []
    nodes = {}
    for pos in range(n_genes):
        gid = _take(counter, shared, ("gene", pos))
        nodes[gid] = BlueprintGene(gid, int(species[rng.integers(len(species))]))
        ids.append(gid)
    edges = {}
    for a, b in itertools.pairwise([INPUT_ID, *ids, OUTPUT_ID]):
        edges[(a, b)] = _take(counter, shared, ("edge", a, b))
    fc1 = int(rng.integers(ranges.fc_units[0], ranges.fc_units[1] + 1))
    return IndividualGenome(nodes, edges, uid=uid, fc1_units=fc1, num_classes=num_classes,
                            last_layer=LastLayerParams.glorot(fc1, num_classes, rng))


def validate_genome(genome: Genome, ranges: Optional[HyperparamRanges] = None,
                    module_species_ids=None) -> list[str]:
    """Every invariant violation found; an empty list means the genome is valid."""
    ranges = ranges or HyperparamRanges()
    out = genome._graph_violations()
    if isinstance(genome, ModuleGenome):
        for gid, gene in sorted(genome.nodes.items()):
            if gene.innovation_id != gid:
                out.append(f"gene {gid} keyed under wrong id")
            out.extend(_hyperparam_violations(gene, ranges))
    else:
        lo, hi = ranges.fc_units
        if not lo <= genome.fc1_units <= hi:
            out.append(f"fc1_units {genome.fc1_units} outside [{lo}, {hi}]")
        ll = genome.last_layer
        if ll is None:
            out.append("missing last_layer")
        else:
            if ll.weights.shape != (genome.fc1_units, genome.num_classes) or \
                    ll.biases.shape != (genome.num_classes,):
                out.append("classifier/weights mismatch")
            if not (np.all(np.isfinite(ll.weights)) and np.all(np.isfinite(ll.biases))):
                out.append("non-finite last_layer values")
        for gid, gene in sorted(genome.nodes.items()):
            if gene.innovation_id != gid:
                out.append(f"gene {gid} keyed under wrong id")
            if module_species_ids is not None and gene.module_species_pointer not in module_species_ids:
                out.append(f"gene {gid} points at missing species {gene.module_species_pointer}")
    return out


def _hyperparam_violations(gene: LayerGene, ranges: HyperparamRanges) -> list[str]:
    hp = gene.hyperparams
    if gene.kind == "conv2d":
        k, f = hp.get("kernel_size"), hp.get("out_channels")
        bad = (k is None or not ranges.kernel[0] <= k <= ranges.kernel[1]
               or f is None or not ranges.conv_filters[0] <= f <= ranges.conv_filters[1])
    elif gene.kind == "dropout":
        r = hp.get("rate")
        bad = r is None or not ranges.dropout[0] <= r <= ranges.dropout[1]
    elif gene.kind == "maxpool2d":
        bad = bool(hp)
    else:
        return [f"gene {gene.innovation_id} has unknown kind {gene.kind!r}"]
    return [f"gene {gene.innovation_id} hyperparams {hp} out of range"] if bad else []
