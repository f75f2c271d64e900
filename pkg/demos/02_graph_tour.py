#!/usr/bin/env python3
"""Tour of the typed conversation graph built over a context window.

Shows how node and edge counts grow with history length, what kinds of
nodes a window contains, and which neighbors feed the current utterance.
Writes a Graphviz rendering of a two-turn window next to this script.
"""
from pathlib import Path

from ecss.corpus import GeneratorConfig, generate_corpus, slice_context
from ecss.graph import NodeKind, build_ecg, neighbors, to_dot

corpus = generate_corpus(GeneratorConfig(n_conversations=4, seed=3))
conv = corpus[0]

print("history length J -> (nodes, edges); closed forms 5J+2 and 28J-4")
for j in (1, 2, 4, 8):
    window = slice_context(conv, j, j)
    g = build_ecg(window)
    print(f"  J={j}: {g.counts}")

window = slice_context(conv, 4, 4)
g = build_ecg(window)
per_kind = {}
for node in g.nodes:
    per_kind[node.kind.name] = per_kind.get(node.kind.name, 0) + 1
print("\nnode kinds in a J=4 window:", per_kind)

kinds = {}
for e in g.edges:
    kinds[e.kind.name] = kinds.get(e.kind.name, 0) + 1
print(f"{len(kinds)} edge kinds; a few with counts:")
for name in sorted(kinds)[:6]:
    print(f"  {name:<28} {kinds[name]}")

current_text = next(n for n in g.nodes
                    if n.kind is NodeKind.TEXT and n.turn == window.j)
print(f"\nneighbors of the current text node ({current_text.key}):")
for src, kind in neighbors(g, current_text):
    print(f"  {kind.name:<28} from {src.kind.name.lower()} turn {src.turn}")

# Dropping a node kind removes that kind and every touching edge.
dropped = build_ecg(window, drop_kinds=frozenset({NodeKind.EMOTION}))
print(f"\nwithout emotion nodes: {dropped.counts} "
      f"(was {g.counts})")

out = Path.cwd() / "graph_j2.dot"
out.write_text(to_dot(build_ecg(slice_context(conv, 2, 2))))
print(f"wrote {out}; render with: dot -Tsvg graph_j2.dot -o graph.svg")
