"""Heterogeneous conversational graph over a context window.

Five node kinds (text, audio, speaker, emotion, intensity) and fourteen
relation classes: ten cross-kind relations inside each history turn, plus
four same-kind chains linking adjacent turns. Every relation instance is
materialized as directed edges in both directions under the same relation,
so parameters tied to a relation serve both orientations. The current turn
carries only its text and speaker nodes.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable

import numpy as np

from .corpus import ContextWindow
from .errors import ValidationError


class NodeKind(Enum):
    TEXT = "text"
    AUDIO = "audio"
    SPEAKER = "speaker"
    EMOTION = "emotion"
    INTENSITY = "intensity"


class Temporal(Enum):
    INTRA = "intra"                      # both endpoints in the same turn
    PAST_TO_FUTURE = "past_to_future"    # source turn precedes target turn
    FUTURE_TO_PAST = "future_to_past"


@dataclass(frozen=True)
class EdgeKind:
    """One relation class; `chain` relations connect adjacent turns."""

    name: str
    source: NodeKind
    target: NodeKind
    chain: bool = False


def default_edge_schema() -> tuple[EdgeKind, ...]:
    """The 14 relation classes, in stable order."""
    cross = [
        ("text_speaker", NodeKind.TEXT, NodeKind.SPEAKER),
        ("text_audio", NodeKind.TEXT, NodeKind.AUDIO),
        ("text_emotion", NodeKind.TEXT, NodeKind.EMOTION),
        ("text_intensity", NodeKind.TEXT, NodeKind.INTENSITY),
        ("audio_speaker", NodeKind.AUDIO, NodeKind.SPEAKER),
        ("emotion_speaker", NodeKind.EMOTION, NodeKind.SPEAKER),
        ("emotion_intensity", NodeKind.EMOTION, NodeKind.INTENSITY),
        ("emotion_audio", NodeKind.EMOTION, NodeKind.AUDIO),
        ("intensity_speaker", NodeKind.INTENSITY, NodeKind.SPEAKER),
        ("intensity_audio", NodeKind.INTENSITY, NodeKind.AUDIO),
    ]
    chains = [
        ("text_chain", NodeKind.TEXT),
        ("audio_chain", NodeKind.AUDIO),
        ("emotion_chain", NodeKind.EMOTION),
        ("intensity_chain", NodeKind.INTENSITY),
    ]
    kinds = [EdgeKind(n, a, b) for n, a, b in cross]
    kinds += [EdgeKind(n, k, k, chain=True) for n, k in chains]
    return tuple(kinds)


def filter_schema(schema: Iterable[EdgeKind], drop_kinds: frozenset[NodeKind]) -> tuple[EdgeKind, ...]:
    return tuple(k for k in schema
                 if k.source not in drop_kinds and k.target not in drop_kinds)


@dataclass(frozen=True, order=True)
class NodeRef:
    kind: NodeKind = field(compare=False)
    turn: int
    kind_order: int = field(default=0, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "kind_order", _KIND_ORDER[self.kind])

    @property
    def key(self) -> str:
        return f"{self.kind.value}_{self.turn}"


_KIND_ORDER = {k: i for i, k in enumerate(NodeKind)}


@dataclass(frozen=True)
class Edge:
    source: NodeRef
    kind: EdgeKind
    target: NodeRef


def edge_temporal(edge: Edge) -> Temporal:
    if edge.source.turn == edge.target.turn:
        return Temporal.INTRA
    return Temporal.PAST_TO_FUTURE if edge.source.turn < edge.target.turn else Temporal.FUTURE_TO_PAST


@dataclass(eq=False)
class EcgGraph:
    j: int                                 # history turns; current turn index is j
    nodes: tuple[NodeRef, ...]
    edges: tuple[Edge, ...]
    schema: tuple[EdgeKind, ...]
    drop_kinds: frozenset[NodeKind]
    features: dict[NodeRef, np.ndarray] = field(default_factory=dict)

    @property
    def counts(self) -> tuple[int, int]:
        return len(self.nodes), len(self.edges)

    def neighbors(self, node: NodeRef, edge_kind: EdgeKind | None = None) -> list[tuple[NodeRef, EdgeKind]]:
        return neighbors(self, node, edge_kind)

    def to_dot(self) -> str:
        return to_dot(self)


def build_ecg(window: ContextWindow, drop_kinds: frozenset[NodeKind] = frozenset(),
              schema: tuple[EdgeKind, ...] | None = None) -> EcgGraph:
    """Construct the typed graph for one context window."""
    if window.j < 1:
        raise ValidationError("context window needs at least one history turn")
    if NodeKind.TEXT in drop_kinds:
        raise ValidationError("text nodes cannot be dropped")
    base = default_edge_schema() if schema is None else schema
    return _build(window.j, drop_kinds, filter_schema(base, drop_kinds))


def _build(j: int, drop_kinds: frozenset[NodeKind], schema: tuple[EdgeKind, ...]) -> EcgGraph:
    history_kinds = [k for k in NodeKind if k not in drop_kinds]
    nodes: list[NodeRef] = []
    for t in range(j):
        nodes += [NodeRef(k, t) for k in history_kinds]
    nodes.append(NodeRef(NodeKind.TEXT, j))
    if NodeKind.SPEAKER not in drop_kinds:
        nodes.append(NodeRef(NodeKind.SPEAKER, j))

    by_name = {k.name: k for k in schema}
    edges: list[Edge] = []

    def both(a: NodeRef, kind: EdgeKind, b: NodeRef) -> None:
        edges.append(Edge(a, kind, b))
        edges.append(Edge(b, kind, a))

    for t in range(j):
        for kind in schema:
            if not kind.chain:
                both(NodeRef(kind.source, t), kind, NodeRef(kind.target, t))
    if "text_speaker" in by_name:
        kind = by_name["text_speaker"]
        both(NodeRef(NodeKind.TEXT, j), kind, NodeRef(NodeKind.SPEAKER, j))
    for kind in schema:
        if not kind.chain:
            continue
        last = j if kind.source is NodeKind.TEXT else j - 1   # text chain reaches the current turn
        for t in range(last):
            both(NodeRef(kind.source, t), kind, NodeRef(kind.source, t + 1))
    return EcgGraph(j=j, nodes=tuple(nodes), edges=tuple(edges),
                    schema=schema, drop_kinds=drop_kinds)


def neighbors(graph: EcgGraph, node: NodeRef, edge_kind: EdgeKind | None = None) -> list[tuple[NodeRef, EdgeKind]]:
    """Sources of the node's in-edges, ordered by (turn, kind)."""
    if node not in graph.features and node not in set(graph.nodes):
        raise ValidationError(f"node {node.key} not in graph")
    found = [(e.source, e.kind) for e in graph.edges
             if e.target == node and (edge_kind is None or e.kind == edge_kind)]
    found.sort(key=lambda pair: (pair[0].turn, _KIND_ORDER[pair[0].kind], pair[1].name))
    return found


def expected_counts(j: int, drop_kinds: frozenset[NodeKind] = frozenset()) -> tuple[int, int]:
    """Closed-form node and edge counts implied by the schema.

    With nothing dropped this is (5J + 2, 28J - 4).
    """
    if j < 1:
        raise ValidationError("J must be >= 1")
    if NodeKind.TEXT in drop_kinds:
        raise ValidationError("text nodes cannot be dropped")
    schema = filter_schema(default_edge_schema(), drop_kinds)
    history_kinds = 5 - len(drop_kinds)
    nodes = history_kinds * j + 1 + (0 if NodeKind.SPEAKER in drop_kinds else 1)
    edges = 0
    for kind in schema:
        if kind.chain:
            edges += 2 * j if kind.source is NodeKind.TEXT else 2 * (j - 1)
        else:
            edges += 2 * j
            if kind.name == "text_speaker":
                edges += 2   # the current turn's only relation instance
    return nodes, edges


_DOT_SHAPES = {
    NodeKind.TEXT: "box",
    NodeKind.AUDIO: "ellipse",
    NodeKind.SPEAKER: "diamond",
    NodeKind.EMOTION: "hexagon",
    NodeKind.INTENSITY: "trapezium",
}


def to_dot(graph: EcgGraph) -> str:
    """Graphviz rendering of the structure; stable line order."""
    lines = ["digraph ecg {"]
    for n in graph.nodes:
        lines.append(f'  "{n.key}" [shape={_DOT_SHAPES[n.kind]}, label="{n.kind.value}@{n.turn}"];')
    for e in graph.edges:
        lines.append(f'  "{e.source.key}" -> "{e.target.key}" [label="{e.kind.name}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
