"""Graph construction checked against a brute-force enumeration oracle."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecss.corpus import ContextWindow, EmotionLabel, IntensityLabel, Utterance
from ecss.errors import ValidationError
from ecss.graph import (
    EcgGraph,
    NodeKind,
    NodeRef,
    Temporal,
    build_ecg,
    default_edge_schema,
    edge_temporal,
    expected_counts,
    filter_schema,
    neighbors,
    to_dot,
)

from helpers import drop_names, enumerate_expected_graph


def make_window(j: int) -> ContextWindow:
    def utt(t):
        return Utterance(
            text_tokens=[1 + t, 2], speaker=t % 2,
            audio_feat=np.zeros(256), emotion=EmotionLabel.neutral,
            intensity=IntensityLabel.weak, targets=None)
    return ContextWindow(history=[utt(t) for t in range(j)], current=utt(j))


def graph_as_sets(g: EcgGraph):
    nodes = {n.key for n in g.nodes}
    edges = {(e.source.key, e.kind.name, e.target.key) for e in g.edges}
    return nodes, edges


def test_schema_has_fourteen_relations():
    schema = default_edge_schema()
    assert len(schema) == 14
    assert len({k.name for k in schema}) == 14
    assert sum(k.chain for k in schema) == 4


@pytest.mark.parametrize("j", range(1, 15))
def test_structure_matches_brute_force(j):
    g = build_ecg(make_window(j))
    got_nodes, got_edges = graph_as_sets(g)
    want_nodes, want_edges = enumerate_expected_graph(j)
    assert got_nodes == want_nodes
    assert got_edges == want_edges
    assert len(g.edges) == len(got_edges), "duplicate edges"
    assert g.counts == expected_counts(j)
    assert g.counts == (5 * j + 2, 28 * j - 4)


@pytest.mark.parametrize("j", [1, 2, 5, 9, 14])
@pytest.mark.parametrize("drop", [
    frozenset({NodeKind.AUDIO}),
    frozenset({NodeKind.EMOTION}),
    frozenset({NodeKind.INTENSITY}),
    frozenset({NodeKind.SPEAKER}),
    frozenset({NodeKind.AUDIO, NodeKind.EMOTION}),
])
def test_structure_with_dropped_kinds(j, drop):
    g = build_ecg(make_window(j), drop_kinds=drop)
    got_nodes, got_edges = graph_as_sets(g)
    want_nodes, want_edges = enumerate_expected_graph(j, drop_names(drop))
    assert got_nodes == want_nodes
    assert got_edges == want_edges
    assert g.counts == expected_counts(j, drop)


@pytest.mark.parametrize("j,drop,want", [
    (1, frozenset(), (7, 24)),
    (4, frozenset(), (22, 108)),
    (10, frozenset(), (52, 276)),
    (10, frozenset({NodeKind.AUDIO}), (42, 178)),
    (10, frozenset({NodeKind.EMOTION}), (42, 178)),
    (10, frozenset({NodeKind.INTENSITY}), (42, 178)),
    (10, frozenset({NodeKind.SPEAKER}), (41, 194)),
])
def test_expected_count_table(j, drop, want):
    assert expected_counts(j, drop) == want


def test_single_turn_window_edge_count_formula():
    # 20 intra + 2 current-pair + 2 text chain = 24; chains for audio,
    # emotion, intensity are empty at J=1.
    g = build_ecg(make_window(1))
    chain_edges = [e for e in g.edges if e.kind.chain]
    assert len(chain_edges) == 2
    assert all(e.kind.name == "text_chain" for e in chain_edges)


def test_every_edge_has_reverse_twin():
    g = build_ecg(make_window(6))
    edges = {(e.source, e.kind.name, e.target) for e in g.edges}
    for s, name, t in edges:
        assert (t, name, s) in edges


def test_no_self_loops_or_dangling_endpoints():
    g = build_ecg(make_window(7))
    node_set = set(g.nodes)
    for e in g.edges:
        assert e.source != e.target
        assert e.source in node_set
        assert e.target in node_set


def test_edge_kind_endpoint_types_are_respected():
    g = build_ecg(make_window(5))
    for e in g.edges:
        assert {e.source.kind, e.target.kind} <= {e.kind.source, e.kind.target}


def test_temporal_classification():
    g = build_ecg(make_window(3))
    for e in g.edges:
        temporal = edge_temporal(e)
        if e.kind.chain:
            assert temporal in (Temporal.PAST_TO_FUTURE, Temporal.FUTURE_TO_PAST)
            assert abs(e.source.turn - e.target.turn) == 1
        else:
            assert temporal is Temporal.INTRA
    fwd = sum(edge_temporal(e) is Temporal.PAST_TO_FUTURE for e in g.edges)
    bwd = sum(edge_temporal(e) is Temporal.FUTURE_TO_PAST for e in g.edges)
    assert fwd == bwd


def test_current_turn_has_only_text_and_speaker():
    j = 4
    g = build_ecg(make_window(j))
    current = [n for n in g.nodes if n.turn == j]
    assert {n.kind for n in current} == {NodeKind.TEXT, NodeKind.SPEAKER}
    touching = [e for e in g.edges if e.source.turn == j and e.target.turn == j]
    assert {e.kind.name for e in touching} == {"text_speaker"}


def test_neighbors_of_history_text_node():
    g = build_ecg(make_window(3))
    result = neighbors(g, NodeRef(NodeKind.TEXT, 1))
    keys = [(n.key, k.name) for n, k in result]
    assert keys == [
        ("text_0", "text_chain"),
        ("audio_1", "text_audio"),
        ("speaker_1", "text_speaker"),
        ("emotion_1", "text_emotion"),
        ("intensity_1", "text_intensity"),
        ("text_2", "text_chain"),
    ]


def test_neighbors_filtered_by_relation():
    g = build_ecg(make_window(3))
    schema = {k.name: k for k in g.schema}
    result = neighbors(g, NodeRef(NodeKind.TEXT, 3), schema["text_chain"])
    assert [n.key for n, _ in result] == ["text_2"]
    result = neighbors(g, NodeRef(NodeKind.SPEAKER, 3))
    assert [n.key for n, _ in result] == ["text_3"]


def test_neighbors_rejects_unknown_node():
    g = build_ecg(make_window(2))
    with pytest.raises(ValidationError):
        neighbors(g, NodeRef(NodeKind.AUDIO, 2))   # current turn has no audio


def test_build_rejects_empty_history_and_text_drop():
    with pytest.raises(ValidationError):
        expected_counts(0)
    with pytest.raises(ValidationError):
        build_ecg(make_window(2), drop_kinds=frozenset({NodeKind.TEXT}))
    with pytest.raises(ValidationError):
        expected_counts(3, frozenset({NodeKind.TEXT}))


def test_filter_schema_removes_touching_relations():
    kept = filter_schema(default_edge_schema(), frozenset({NodeKind.AUDIO}))
    assert len(kept) == 9
    assert all("audio" not in k.name for k in kept)


def test_dot_export_golden_j1():
    g = build_ecg(make_window(1))
    dot = to_dot(g)
    lines = dot.strip().splitlines()
    assert lines[0] == "digraph ecg {"
    assert lines[-1] == "}"
    assert '  "text_0" [shape=box, label="text@0"];' in lines
    assert '  "audio_0" [shape=ellipse, label="audio@0"];' in lines
    assert '  "speaker_0" [shape=diamond, label="speaker@0"];' in lines
    assert '  "emotion_0" [shape=hexagon, label="emotion@0"];' in lines
    assert '  "intensity_0" [shape=trapezium, label="intensity@0"];' in lines
    assert '  "text_0" -> "text_1" [label="text_chain"];' in lines
    assert len([ln for ln in lines if "->" in ln]) == 24
    assert to_dot(build_ecg(make_window(1))) == dot


@settings(max_examples=25, deadline=None)
@given(j=st.integers(min_value=1, max_value=20),
       drop=st.sets(st.sampled_from([NodeKind.AUDIO, NodeKind.EMOTION,
                                     NodeKind.INTENSITY, NodeKind.SPEAKER]),
                    max_size=3))
def test_counts_match_enumeration_property(j, drop):
    drop = frozenset(drop)
    want_nodes, want_edges = enumerate_expected_graph(j, drop_names(drop))
    assert expected_counts(j, drop) == (len(want_nodes), len(want_edges))
    g = build_ecg(make_window(j), drop_kinds=drop)
    assert g.counts == (len(want_nodes), len(want_edges))
