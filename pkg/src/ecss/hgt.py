"""Heterogeneous graph transformer over the conversational graph.

Three stages per layer: mutual attention scores each in-edge with a
relation-specific bilinear form, message passing projects source features
through relation-specific maps, and aggregation softmax-averages messages
into each target, followed by a per-kind output projection, GELU, and a
residual. Node features are first projected per kind into the shared
hidden width, so text nodes (wider on input) and the rest coexist.

The fused path runs every edge of a graph in a handful of array ops:
nodes are laid out kind-major, edges relation-major for the bilinear
weight gradients, and a precomputed permutation regroups edge rows by
target for the softmax segments. All of that is captured in a
GraphStructure, cached per (history length, schema, ablation) since every
window with the same shape shares it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import NodeFeatures, uniform_init
from .errors import ConfigurationError, ValidationError
from .graph import EcgGraph, EdgeKind, NodeKind, NodeRef

_KIND_SEQ = (NodeKind.TEXT, NodeKind.AUDIO, NodeKind.SPEAKER,
             NodeKind.EMOTION, NodeKind.INTENSITY)


@dataclass
class HgtConfig:
    hidden_dim: int = 384
    heads: int = 2
    layers: int = 1

    def validate(self) -> None:
        if self.hidden_dim < 1 or self.heads < 1 or self.layers < 1:
            raise ConfigurationError("hidden_dim, heads, layers must be >= 1")
        if self.hidden_dim % self.heads:
            raise ConfigurationError(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads


@dataclass
class GraphStructure:
    """Index plans for the fused forward pass of one graph shape."""
    j: int
    n_nodes: int
    n_edges: int
    kind_slices: dict[NodeKind, tuple[int, int]]   # node rows per kind
    schema_names: tuple[str, ...]
    kind_ids: np.ndarray        # [E] schema index per edge, relation-major order
    kind_starts: np.ndarray     # block starts into the relation-major order
    kind_rows: np.ndarray       # schema index per block
    src_idx: np.ndarray         # [E] source node row, relation-major order
    dst_idx: np.ndarray
    src_plan: ad.ScatterPlan
    dst_plan: ad.ScatterPlan
    perm: np.ndarray            # relation-major -> target-major reorder
    perm_plan: ad.ScatterPlan
    seg_spec: ad.SegmentSpec    # target segments in target-major order

    def node_index(self, node: NodeRef) -> int:
        start, stop = self.kind_slices[node.kind]
        idx = start + node.turn
        if not start <= idx < stop:
            raise ValidationError(f"node {node.key} outside structure")
        return idx


_STRUCTURE_CACHE: dict[tuple, GraphStructure] = {}


def graph_structure(graph: EcgGraph) -> GraphStructure:
    key = (graph.j, tuple(k.name for k in graph.schema),
           tuple(sorted(k.value for k in graph.drop_kinds)))
    cached = _STRUCTURE_CACHE.get(key)
    if cached is not None:
        return cached

    kind_slices: dict[NodeKind, tuple[int, int]] = {}
    offset = 0
    for kind in _KIND_SEQ:
        rows = [n for n in graph.nodes if n.kind is kind]
        if not rows:
            continue
        count = max(n.turn for n in rows) + 1
        if count != len(rows):
            raise ValidationError(f"non-contiguous turns for {kind.value}")
        kind_slices[kind] = (offset, offset + count)
        offset += count
    if offset != len(graph.nodes):
        raise ValidationError("node enumeration mismatch")

    def index(node: NodeRef) -> int:
        return kind_slices[node.kind][0] + node.turn

    schema_names = tuple(k.name for k in graph.schema)
    name_to_id = {n: i for i, n in enumerate(schema_names)}
    raw = np.array([(name_to_id[e.kind.name], index(e.source), index(e.target))
                    for e in graph.edges], dtype=np.intp).reshape(-1, 3)
    order = np.argsort(raw[:, 0], kind="stable")
    kind_ids, src_idx, dst_idx = raw[order, 0], raw[order, 1], raw[order, 2]

    present, starts = np.unique(kind_ids, return_index=True)
    perm = np.argsort(dst_idx, kind="stable")
    structure = GraphStructure(
        j=graph.j, n_nodes=offset, n_edges=len(graph.edges),
        kind_slices=kind_slices, schema_names=schema_names,
        kind_ids=kind_ids, kind_starts=starts, kind_rows=present,
        src_idx=src_idx, dst_idx=dst_idx,
        src_plan=ad.make_scatter_plan(src_idx, offset),
        dst_plan=ad.make_scatter_plan(dst_idx, offset),
        perm=perm, perm_plan=ad.make_scatter_plan(perm, len(perm)),
        seg_spec=ad.make_segment_spec(dst_idx[perm], offset))
    _STRUCTURE_CACHE[key] = structure
    return structure


@dataclass
class HgtLayerParams:
    in_w: dict[NodeKind, Tensor]      # input width -> hidden, with bias
    in_b: dict[NodeKind, Tensor]
    q_w: dict[NodeKind, Tensor]       # hidden -> hidden, bias-free
    k_w: dict[NodeKind, Tensor]
    v_w: dict[NodeKind, Tensor]
    out_w: dict[NodeKind, Tensor]
    w_att: Tensor                     # [relations, heads, d, d]
    w_msg: Tensor
    mu: Tensor                        # [relations, 1] scalar prior per relation


@dataclass
class HgtParams:
    config: HgtConfig
    schema_names: tuple[str, ...]
    in_dims: dict[NodeKind, int]
    layers: list[HgtLayerParams]

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            for group in ("in_w", "in_b", "q_w", "k_w", "v_w", "out_w"):
                for kind, t in getattr(layer, group).items():
                    out[f"hgt.l{i}.{group}.{kind.value}"] = t
            out[f"hgt.l{i}.w_att"] = layer.w_att
            out[f"hgt.l{i}.w_msg"] = layer.w_msg
            out[f"hgt.l{i}.mu"] = layer.mu
        return out


def make_hgt_params(config: HgtConfig, in_dims: dict[NodeKind, int],
                    schema: tuple[EdgeKind, ...],
                    rng: np.random.Generator) -> HgtParams:
    config.validate()
    h, d, r = config.hidden_dim, config.head_dim, len(schema)
    layers = []
    for i in range(config.layers):
        layer = HgtLayerParams(
            in_w={k: ad.param(uniform_init(rng, (dim, h), dim), f"hgt.l{i}.in_w.{k.value}")
                  for k, dim in in_dims.items()},
            in_b={k: ad.param(np.zeros(h), f"hgt.l{i}.in_b.{k.value}")
                  for k in in_dims},
            q_w={k: ad.param(uniform_init(rng, (h, h), h), f"hgt.l{i}.q_w.{k.value}")
                 for k in in_dims},
            k_w={k: ad.param(uniform_init(rng, (h, h), h), f"hgt.l{i}.k_w.{k.value}")
                 for k in in_dims},
            v_w={k: ad.param(uniform_init(rng, (h, h), h), f"hgt.l{i}.v_w.{k.value}")
                 for k in in_dims},
            out_w={k: ad.param(uniform_init(rng, (h, h), h), f"hgt.l{i}.out_w.{k.value}")
                   for k in in_dims},
            w_att=ad.param(uniform_init(rng, (r, config.heads, d, d), d),
                           f"hgt.l{i}.w_att"),
            w_msg=ad.param(uniform_init(rng, (r, config.heads, d, d), d),
                           f"hgt.l{i}.w_msg"),
            mu=ad.param(np.ones((r, 1)), f"hgt.l{i}.mu"))
        layers.append(layer)
    return HgtParams(config=config, schema_names=tuple(k.name for k in schema),
                     in_dims=dict(in_dims), layers=layers)


@dataclass
class EncodedGraph:
    """Hidden-width output vectors for every node, addressable by NodeRef."""
    structure: GraphStructure
    matrix: Tensor                    # [n_nodes, hidden]

    def vector(self, node: NodeRef) -> np.ndarray:
        return self.matrix.data[self.structure.node_index(node)]

    def __getitem__(self, node: NodeRef) -> np.ndarray:
        return self.vector(node)

    def rows_of(self, kind: NodeKind) -> Tensor:
        if kind not in self.structure.kind_slices:
            raise ValidationError(f"no {kind.value} nodes in this graph")
        start, stop = self.structure.kind_slices[kind]
        return ad.rows(self.matrix, start, stop)


def _per_kind_linear(mat_by_kind, weights, biases, structure):
    blocks = []
    for kind in _KIND_SEQ:
        if kind not in structure.kind_slices:
            continue
        x = mat_by_kind(kind)
        blocks.append(ad.linear(x, weights[kind],
                                None if biases is None else biases[kind]))
    return ad.concat(blocks, axis=0) if len(blocks) > 1 else blocks[0]


def hgt_forward(params: HgtParams, structure: GraphStructure,
                feats: NodeFeatures) -> EncodedGraph:
    """Fused forward pass for one window."""
    cfg = params.config
    for kind, (start, stop) in structure.kind_slices.items():
        block = feats.of_kind(kind)
        if block is None or block.data.shape != (stop - start, params.in_dims[kind]):
            got = None if block is None else block.data.shape
            raise ConfigurationError(
                f"{kind.value} features {got} do not match structure/params "
                f"({stop - start} x {params.in_dims[kind]})")
    if structure.schema_names != params.schema_names:
        raise ConfigurationError("parameter schema does not match the graph schema")

    layer0 = params.layers[0]
    h = _per_kind_linear(lambda k: feats.of_kind(k), layer0.in_w, layer0.in_b,
                         structure)
    inv_sqrt_d = 1.0 / np.sqrt(cfg.head_dim)

    def kind_block(mat, kind):
        start, stop = structure.kind_slices[kind]
        return ad.rows(mat, start, stop)

    for layer in params.layers:
        q = _per_kind_linear(lambda k: kind_block(h, k), layer.q_w, None, structure)
        k = _per_kind_linear(lambda k_: kind_block(h, k_), layer.k_w, None, structure)
        v = _per_kind_linear(lambda k_: kind_block(h, k_), layer.v_w, None, structure)

        k_e = ad.gather_rows(k, structure.src_idx, structure.src_plan)
        v_e = ad.gather_rows(v, structure.src_idx, structure.src_plan)
        q_e = ad.gather_rows(q, structure.dst_idx, structure.dst_plan)

        scores = ad.edge_scores(k_e, q_e, layer.w_att, structure.kind_ids,
                                structure.kind_starts, structure.kind_rows)
        mu_e = ad.gather_rows(layer.mu, structure.kind_ids)
        scores = ad.scale(ad.mul(scores, mu_e), inv_sqrt_d)
        msgs = ad.edge_messages(v_e, layer.w_msg, structure.kind_ids,
                                structure.kind_starts, structure.kind_rows)

        scores_t = ad.gather_rows(scores, structure.perm, structure.perm_plan)
        msgs_t = ad.gather_rows(msgs, structure.perm, structure.perm_plan)
        weights = ad.segment_softmax(scores_t, structure.seg_spec)
        agg = ad.segment_sum(ad.head_scale(msgs_t, weights, cfg.heads),
                             structure.seg_spec)

        out = _per_kind_linear(lambda k_: kind_block(agg, k_), layer.out_w, None,
                               structure)
        h = ad.add(ad.gelu(out), h)

    return EncodedGraph(structure=structure, matrix=h)


def encode_window(params: HgtParams, graph: EcgGraph,
                  feats: NodeFeatures) -> EncodedGraph:
    return hgt_forward(params, graph_structure(graph), feats)


# ---------------------------------------------------------------------------
# introspection: per-target attention and messages, computed naively


def _features_from_graph(graph: EcgGraph) -> NodeFeatures:
    if not graph.features:
        raise ValidationError("graph features not initialized")

    def block(kind: NodeKind):
        refs = sorted((n for n in graph.nodes if n.kind is kind),
                      key=lambda n: n.turn)
        if not refs:
            return None
        return ad.tensor(np.stack([graph.features[n] for n in refs]))

    return NodeFeatures(text=block(NodeKind.TEXT), speaker=block(NodeKind.SPEAKER),
                        audio=block(NodeKind.AUDIO), emotion=block(NodeKind.EMOTION),
                        intensity=block(NodeKind.INTENSITY))


def _projected_inputs(params: HgtParams, graph: EcgGraph) -> dict[NodeRef, np.ndarray]:
    layer = params.layers[0]
    feats = _features_from_graph(graph)
    with ad.no_grad():
        out = {}
        for node in graph.nodes:
            x = feats.of_kind(node.kind).data[node.turn]
            out[node] = x @ layer.in_w[node.kind].data + layer.in_b[node.kind].data
    return out


def hma_attention(params: HgtParams, graph: EcgGraph,
                  target: NodeRef) -> dict[NodeRef, np.ndarray]:
    """First-layer attention weights over the target's in-neighbors.

    Returns source -> [heads] weights; empty for isolated targets.
    """
    layer = params.layers[0]
    cfg = params.config
    hidden = _projected_inputs(params, graph)
    name_to_id = {n: i for i, n in enumerate(params.schema_names)}
    incoming = [(e.source, e.kind) for e in graph.edges if e.target == target]
    if not incoming:
        return {}
    d = cfg.head_dim
    q = (hidden[target] @ layer.q_w[target.kind].data).reshape(cfg.heads, d)
    logits = []
    for source, kind in incoming:
        ks = (hidden[source] @ layer.k_w[source.kind].data).reshape(cfg.heads, d)
        att = layer.w_att.data[name_to_id[kind.name]]
        mu = layer.mu.data[name_to_id[kind.name], 0]
        logits.append([ks[hd] @ att[hd] @ q[hd] * mu / np.sqrt(d)
                       for hd in range(cfg.heads)])
    logits = np.asarray(logits)
    w = np.exp(logits - logits.max(axis=0, keepdims=True))
    w /= w.sum(axis=0, keepdims=True)
    return {source: w[i] for i, (source, _) in enumerate(incoming)}


def hmp_messages(params: HgtParams, graph: EcgGraph,
                 target: NodeRef) -> dict[NodeRef, np.ndarray]:
    """First-layer message vectors from each in-neighbor (heads concatenated)."""
    layer = params.layers[0]
    cfg = params.config
    hidden = _projected_inputs(params, graph)
    name_to_id = {n: i for i, n in enumerate(params.schema_names)}
    out = {}
    for e in graph.edges:
        if e.target != target:
            continue
        vs = (hidden[e.source] @ layer.v_w[e.source.kind].data).reshape(
            cfg.heads, cfg.head_dim)
        msg = layer.w_msg.data[name_to_id[e.kind.name]]
        out[e.source] = np.concatenate([vs[hd] @ msg[hd]
                                        for hd in range(cfg.heads)])
    return out


def eka_aggregate(params: HgtParams, graph: EcgGraph) -> EncodedGraph:
    """Full encoder over a graph whose features are already initialized."""
    feats = _features_from_graph(graph)
    with ad.no_grad():
        return hgt_forward(params, graph_structure(graph), feats)
