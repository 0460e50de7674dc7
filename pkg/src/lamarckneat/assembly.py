"""Genotype to phenotype: splice modules into a blueprint and compile a network.

Each blueprint gene is replaced by one module sampled from the species it
points at. Where several paths meet, a concat is inserted; inputs with larger
spatial size are first max-pooled (2x2) down to the smallest one and the
concat crops any leftover off-by-one. A flatten and the two dense classifier
layers close the network. Only the output layer's parameters travel back to
the genome.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .genome import (INPUT_ID, OUTPUT_ID, HyperparamRanges, IndividualGenome, LastLayerParams,
                     LayerGene, ModuleGenome)
from .tensor_engine import (AdamState, LayerSpec, ShapeError, adam_step, backward_layer,
                            forward_layer, init_params, output_shape, pooled_size)

NETWORK_INPUT = -1
_COUNTED_KINDS = ("conv2d", "maxpool2d", "dropout", "dense")


class AssemblyError(RuntimeError):
    """A blueprint could not be turned into a network."""


class DepthError(AssemblyError):
    """Assembled layer count falls outside the configured range."""


@dataclass
class LayerNode:
    spec: LayerSpec
    inputs: list            # producer layer indices; NETWORK_INPUT for the image batch
    role: str = "gene"      # gene | align | concat | flatten | fc1 | output
    provenance: dict = field(default_factory=dict)
    params: list = field(default_factory=list)
    adam: list = field(default_factory=list)


@dataclass
class ShapeInfo:
    input_shapes: list      # per layer: list of per-sample input shapes (after alignment)
    output_shapes: list     # per layer: per-sample output shape
    align_pools: dict       # concat index -> number of 2x2 pools applied to each input


def _alignment_plan(shapes: Sequence[tuple]) -> list[int]:
    th = min(s[0] for s in shapes)
    tw = min(s[1] for s in shapes)
    plan = []
    for h, w, _ in shapes:
        n = 0
        while (h > th or w > tw) and pooled_size(h) >= th and pooled_size(w) >= tw:
            h, w = pooled_size(h), pooled_size(w)
            n += 1
        plan.append(n)
    return plan


def infer_shapes(wiring: Sequence[tuple[LayerSpec, Sequence[int]]], input_shape: tuple) -> ShapeInfo:
    """Propagate per-sample shapes through ``(spec, input_indices)`` pairs in order.

    Concat inputs are aligned by repeated 2x2 pooling (recorded in
    ``align_pools``) and then cropped to the smallest height and width.
    """
    outs: list[tuple] = []
    ins: list[list[tuple]] = []
    align: dict[int, list[int]] = {}
    for i, (spec, inputs) in enumerate(wiring):
        shapes = []
        for j in inputs:
            if j != NETWORK_INPUT and not 0 <= j < i:
                raise ShapeError(spec.kind, f"layer {i} reads from layer {j}, which is not upstream")
            shapes.append(tuple(input_shape) if j == NETWORK_INPUT else outs[j])
        if spec.kind == "concat" and len(shapes) > 1:
            if any(len(s) != 3 for s in shapes):
                raise ShapeError("concat", f"layer {i} cannot merge non-spatial inputs {shapes}")
            plan = _alignment_plan(shapes)
            if any(plan):
                align[i] = plan
            aligned = []
            for (h, w, c), n in zip(shapes, plan):
                for _ in range(n):
                    h, w = pooled_size(h), pooled_size(w)
                aligned.append((h, w, c))
            shapes = aligned
        try:
            out = output_shape(spec, shapes)
        except ShapeError as exc:
            raise ShapeError(spec.kind, f"layer {i}: {exc}") from None
        ins.append(shapes)
        outs.append(out)
    return ShapeInfo(ins, outs, align)


class CompiledNetwork:
    """Executable layer DAG in topological order; the last layer is the output dense."""

    def __init__(self, layers: list[LayerNode], input_shape: tuple, shapes: ShapeInfo):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.shapes = shapes
        self.last_layer_index = len(layers) - 1
        self.module_choice: dict[int, int] = {}

    @property
    def wiring(self) -> list[list[int]]:
        return [list(n.inputs) for n in self.layers]

    @property
    def provenance(self) -> dict[int, dict]:
        return {i: dict(n.provenance) for i, n in enumerate(self.layers)}

    @property
    def fc1_units(self) -> int:
        return self.layers[self.last_layer_index].params[0].shape[0]

    @property
    def num_classes(self) -> int:
        return self.layers[self.last_layer_index].spec.units

    def param_count(self) -> int:
        return int(sum(p.size for n in self.layers for p in n.params))

    def depth(self) -> int:
        return sum(1 for n in self.layers if n.spec.kind in _COUNTED_KINDS and n.role != "align")

    def dense_indices(self) -> list[int]:
        return [i for i, n in enumerate(self.layers) if n.spec.kind == "dense"]

    # -- execution ----------------------------------------------------------

    def _last_use(self) -> list[int]:
        last = [len(self.layers) - 1] * len(self.layers)
        for i, n in enumerate(self.layers):
            for j in n.inputs:
                if j != NETWORK_INPUT:
                    last[j] = i
        return last

    def forward(self, x: np.ndarray, mode: str = "infer", rng: Optional[np.random.Generator] = None):
        """Logits for a batch, plus per-layer caches (``None`` in infer mode)."""
        keep = mode == "train"
        outs: list = [None] * len(self.layers)
        caches: list = [None] * len(self.layers)
        last_use = None if keep else self._last_use()
        for i, node in enumerate(self.layers):
            xs = [x if j == NETWORK_INPUT else outs[j] for j in node.inputs]
            outs[i], cache = forward_layer(node.spec, xs, node.params, mode, rng)
            if keep:
                caches[i] = cache
            else:
                for j in node.inputs:
                    if j != NETWORK_INPUT and last_use[j] == i:
                        outs[j] = None
        return outs[-1], caches

    def backward(self, caches: list, grad_logits: np.ndarray) -> list[list[np.ndarray]]:
        """Parameter gradients per layer from a train-mode forward's caches."""
        grads: list = [None] * len(self.layers)
        pgrads: list = [[] for _ in self.layers]
        grads[-1] = grad_logits
        for i in range(len(self.layers) - 1, -1, -1):
            node = self.layers[i]
            g = grads[i]
            grads[i] = None
            if g is None:
                continue
            need = any(j != NETWORK_INPUT for j in node.inputs)
            gin, pgrads[i] = backward_layer(node.spec, caches[i], g, input_grad=need)
            caches[i] = None
            for j, gj in zip(node.inputs, gin):
                if j == NETWORK_INPUT:
                    continue
                grads[j] = gj if grads[j] is None else grads[j] + gj
        return pgrads

    def apply_gradients(self, pgrads: list, lr: float, only: Optional[Sequence[int]] = None) -> None:
        for i, node in enumerate(self.layers):
            if only is not None and i not in only:
                continue
            for k, g in enumerate(pgrads[i]):
                node.params[k], node.adam[k] = adam_step(node.params[k], g, node.adam[k], lr)


# -- assembly ---------------------------------------------------------------

def gene_spec(gene: LayerGene) -> LayerSpec:
    hp = gene.hyperparams
    if gene.kind == "conv2d":
        return LayerSpec("conv2d", kernel_size=hp["kernel_size"], out_channels=hp["out_channels"])
    if gene.kind == "maxpool2d":
        return LayerSpec("maxpool2d")
    if gene.kind == "dropout":
        return LayerSpec("dropout", rate=hp["rate"])
    raise AssemblyError(f"gene {gene.innovation_id} has unknown kind {gene.kind!r}")


def _logical_graph(ind: IndividualGenome, chosen: dict[int, ModuleGenome]) -> list[LayerNode]:
    nodes: list[LayerNode] = []

    def add(spec, inputs, role, prov):
        nodes.append(LayerNode(spec, list(inputs), role, prov))
        return len(nodes) - 1

    def merge(refs, prov):
        if len(refs) == 1:
            return refs[0]
        return add(LayerSpec("concat"), refs, "concat", prov)

    order = ind.topological_order()
    if order is None:
        raise AssemblyError(f"individual {ind.uid} has a cycle")
    value: dict[int, int] = {}
    head = None
    for v in order:
        if v == INPUT_ID:
            value[v] = NETWORK_INPUT
            continue
        entry = merge([value[p] for p in ind.predecessors(v)],
                      {"ind_gene": None if v == OUTPUT_ID else v, "module": None, "module_gene": None})
        if v == OUTPUT_ID:
            head = entry
            continue
        module = chosen[v]
        morder = module.topological_order()
        if morder is None:
            raise AssemblyError(f"module {module.uid} has a cycle")
        mval: dict[int, int] = {}
        for u in morder:
            if u == INPUT_ID:
                mval[u] = entry
                continue
            prov = {"ind_gene": v, "module": module.uid, "module_gene": None if u == OUTPUT_ID else u}
            x = merge([mval[p] for p in module.predecessors(u)], prov)
            if u == OUTPUT_ID:
                value[v] = x
            else:
                mval[u] = add(gene_spec(module.nodes[u]), [x], "gene", prov)
    classifier = {"ind_gene": None, "module": None, "module_gene": None}
    flat = add(LayerSpec("flatten"), [head], "flatten", dict(classifier))
    fc1 = add(LayerSpec("dense", units=ind.fc1_units), [flat], "fc1", dict(classifier))
    add(LayerSpec("dense", units=ind.num_classes, activation="linear"), [fc1], "output", dict(classifier))
    return nodes


def _materialize(logical: list[LayerNode], input_shape: tuple) -> list[LayerNode]:
    """Insert explicit alignment pools in front of concat inputs that need them."""
    info = infer_shapes([(n.spec, n.inputs) for n in logical], input_shape)
    out: list[LayerNode] = []
    remap: dict[int, int] = {NETWORK_INPUT: NETWORK_INPUT}
    for i, node in enumerate(logical):
        inputs = [remap[j] for j in node.inputs]
        for pos, n_pools in enumerate(info.align_pools.get(i, [])):
            for _ in range(n_pools):
                out.append(LayerNode(LayerSpec("maxpool2d"), [inputs[pos]], "align", dict(node.provenance)))
                inputs[pos] = len(out) - 1
        out.append(LayerNode(node.spec, inputs, node.role, node.provenance))
        remap[i] = len(out) - 1
    return out


def _keyed_rng(init_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([init_seed, *[k & 0xFFFFFFFF for k in key]]))


def _init_layers(layers: list[LayerNode], shapes: ShapeInfo, rng, init_seed) -> None:
    for i, node in enumerate(layers):
        if node.spec.kind not in ("conv2d", "dense") or node.role == "output":
            continue
        in_shape = shapes.input_shapes[i][0]
        if init_seed is None:
            layer_rng = rng
        elif node.role == "fc1":
            layer_rng = _keyed_rng(init_seed, 2, node.spec.units, in_shape[0])
        else:
            p = node.provenance
            layer_rng = _keyed_rng(init_seed, 1, p["ind_gene"], p["module_gene"], in_shape[-1])
        node.params = init_params(node.spec, in_shape, layer_rng)
        node.adam = [AdamState.zeros_like(p) for p in node.params]


def compile_network(ind: IndividualGenome, chosen: dict[int, ModuleGenome], input_shape: tuple,
                    rng: Optional[np.random.Generator] = None, init_seed: Optional[int] = None,
                    ranges: Optional[HyperparamRanges] = None) -> CompiledNetwork:
    """Build a network from an individual and an explicit module per blueprint gene."""
    missing = sorted(set(ind.nodes) - set(chosen))
    if missing:
        raise AssemblyError(f"no module chosen for blueprint genes {missing}")
    if init_seed is None and rng is None:
        raise ValueError("need an rng or an init_seed to initialise parameters")
    layers = _materialize(_logical_graph(ind, chosen), input_shape)
    shapes = infer_shapes([(n.spec, n.inputs) for n in layers], input_shape)
    net = CompiledNetwork(layers, input_shape, shapes)
    net.module_choice = {g: chosen[g].uid for g in sorted(ind.nodes)}
    if ranges is not None:
        lo, hi = ranges.total_layers
        if not lo <= net.depth() <= hi:
            raise DepthError(f"assembled depth {net.depth()} outside [{lo}, {hi}]")
    _init_layers(layers, shapes, rng, init_seed)
    out = layers[-1]
    out.params = [np.zeros((ind.fc1_units, ind.num_classes), np.float32),
                  np.zeros(ind.num_classes, np.float32)]
    out.adam = [AdamState.zeros_like(p) for p in out.params]
    inject_last_layer(net, ind.last_layer)
    return net


def assemble(ind: IndividualGenome, modules: dict[int, Sequence[ModuleGenome]], rng: np.random.Generator,
             input_shape: tuple, ranges: Optional[HyperparamRanges] = None,
             init_seed: Optional[int] = None, retries: int = 3) -> tuple[CompiledNetwork, list[int]]:
    """Sample one module per blueprint gene from its species and compile.

    ``modules`` maps module species id to that species' members. Returns the
    network and the chosen module uids, one per blueprint gene in gene-id
    order. A depth violation triggers up to ``retries`` fresh samplings.
    """
    ranges = ranges or HyperparamRanges()
    for gid in sorted(ind.nodes):
        sid = ind.nodes[gid].module_species_pointer
        if not modules.get(sid):
            raise AssemblyError(f"blueprint gene {gid} points at empty or missing species {sid}")
    for attempt in range(retries + 1):
        chosen = {}
        for gid in sorted(ind.nodes):
            members = modules[ind.nodes[gid].module_species_pointer]
            chosen[gid] = members[int(rng.integers(len(members)))]
        try:
            net = compile_network(ind, chosen, input_shape, rng=rng, init_seed=init_seed, ranges=ranges)
        except DepthError:
            if attempt == retries:
                raise
            continue
        return net, [chosen[g].uid for g in sorted(ind.nodes)]
    raise AssertionError("unreachable")


def inject_last_layer(network: CompiledNetwork, params: LastLayerParams) -> CompiledNetwork:
    node = network.layers[network.last_layer_index]
    w, b = node.params
    if params.weights.shape != w.shape or params.biases.shape != b.shape:
        raise ShapeError("output", f"stored last layer {params.weights.shape}/{params.biases.shape} "
                                   f"does not fit network {w.shape}/{b.shape}")
    node.params = [params.weights.astype(w.dtype, copy=True), params.biases.astype(b.dtype, copy=True)]
    node.adam = [AdamState.zeros_like(p) for p in node.params]
    return network


def extract_last_layer(network: CompiledNetwork) -> LastLayerParams:
    w, b = network.layers[network.last_layer_index].params
    return LastLayerParams(w.copy(), b.copy())


def to_dot(network: CompiledNetwork, include_io: bool = False, name: str = "network") -> str:
    lines = [f"digraph {name} {{", "  rankdir=TB;", "  node [shape=box];"]
    shapes = network.shapes.output_shapes
    for i, node in enumerate(network.layers):
        label = f"{node.spec.describe()}\\n{'x'.join(map(str, shapes[i]))}"
        lines.append(f'  L{i} [label="{label}"];')
    if include_io:
        lines.append(f'  input [shape=ellipse, label="input {"x".join(map(str, network.input_shape))}"];')
        lines.append('  output [shape=ellipse, label="output"];')
    for i, node in enumerate(network.layers):
        for j in node.inputs:
            if j == NETWORK_INPUT:
                if include_io:
                    lines.append(f"  input -> L{i};")
            else:
                lines.append(f"  L{j} -> L{i};")
    if include_io:
        lines.append(f"  L{network.last_layer_index} -> output;")
    lines.append("}")
    return "\n".join(lines) + "\n"


def sequential(specs: Sequence[LayerSpec], input_shape: tuple, rng: np.random.Generator) -> CompiledNetwork:
    """A hand-written chain; the final spec must be the dense output layer."""
    if not specs or specs[-1].kind != "dense":
        raise AssemblyError("a sequential network must end in a dense layer")
    layers = []
    for i, spec in enumerate(specs):
        role = "output" if i == len(specs) - 1 else "gene"
        layers.append(LayerNode(spec, [i - 1 if i else NETWORK_INPUT], role))
    shapes = infer_shapes([(n.spec, n.inputs) for n in layers], input_shape)
    for i, node in enumerate(layers):
        node.params = init_params(node.spec, shapes.input_shapes[i][0], rng)
        node.adam = [AdamState.zeros_like(p) for p in node.params]
    return CompiledNetwork(layers, input_shape, shapes)
