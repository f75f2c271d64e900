"""Shared reference implementations for tests.

Everything here is written from the definitions, independently of the
library code paths it checks, and favors clarity over speed.
"""
from __future__ import annotations

import numpy as np

from ecss.graph import NodeKind

KINDS = ["text", "audio", "speaker", "emotion", "intensity"]

CROSS_RELATIONS = [
    ("text_speaker", "text", "speaker"),
    ("text_audio", "text", "audio"),
    ("text_emotion", "text", "emotion"),
    ("text_intensity", "text", "intensity"),
    ("audio_speaker", "audio", "speaker"),
    ("emotion_speaker", "emotion", "speaker"),
    ("emotion_intensity", "emotion", "intensity"),
    ("emotion_audio", "emotion", "audio"),
    ("intensity_speaker", "intensity", "speaker"),
    ("intensity_audio", "intensity", "audio"),
]

CHAIN_RELATIONS = [
    ("text_chain", "text"),
    ("audio_chain", "audio"),
    ("emotion_chain", "emotion"),
    ("intensity_chain", "intensity"),
]


def enumerate_expected_graph(j: int, dropped: set[str] = frozenset()):
    """Brute-force node keys and directed edge triples for a J-turn window.

    Returns (set of node keys, set of (src_key, relation, dst_key)).
    """
    nodes = set()
    for t in range(j):
        for k in KINDS:
            if k not in dropped:
                nodes.add(f"{k}_{t}")
    nodes.add(f"text_{j}")
    if "speaker" not in dropped:
        nodes.add(f"speaker_{j}")

    pairs = []  # (key_a, relation, key_b) as unordered instances
    for t in range(j):
        for name, a, b in CROSS_RELATIONS:
            if a in dropped or b in dropped:
                continue
            pairs.append((f"{a}_{t}", name, f"{b}_{t}"))
    if "speaker" not in dropped:
        pairs.append((f"text_{j}", "text_speaker", f"speaker_{j}"))
    for name, k in CHAIN_RELATIONS:
        if k in dropped:
            continue
        top = j if k == "text" else j - 1
        for t in range(top):
            pairs.append((f"{k}_{t}", name, f"{k}_{t + 1}"))

    edges = set()
    for a, name, b in pairs:
        edges.add((a, name, b))
        edges.add((b, name, a))
    return nodes, edges


def drop_names(drop_kinds) -> set[str]:
    return {k.value for k in drop_kinds}


def naive_hgt_layer(node_feats, edges, params, heads: int):
    """Per-edge loop reference for one graph-attention layer.

    node_feats: dict key -> input vector (already projected to the layer's
    hidden width). edges: list of (src_key, relation, dst_key). params holds,
    per node kind, q/k/v/out weight matrices, and per relation att/msg
    matrices plus a scalar prior. Mirrors the fused implementation:
    score = (k_src @ att @ q_dst) * prior / sqrt(d_head) per head, softmax
    over each target's in-edges, messages v_src @ msg, head-concat, then
    out-projection through gelu plus the input as residual.
    """
    hidden = next(iter(node_feats.values())).shape[0]
    d_head = hidden // heads

    def kind_of(key):
        return key.rsplit("_", 1)[0]

    def split_heads(v):
        return v.reshape(heads, d_head)

    def gelu(x):
        c = np.sqrt(2.0 / np.pi)
        return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))

    incoming = {}
    for s, rel, t in edges:
        incoming.setdefault(t, []).append((s, rel))

    out = {}
    for key, x in node_feats.items():
        kd = kind_of(key)
        if key not in incoming:
            out[key] = x.copy()
            continue
        q = split_heads(node_feats[key] @ params["q"][kd])
        scores, messages = [], []
        for s, rel in incoming[key]:
            ks = split_heads(node_feats[s] @ params["k"][kind_of(s)])
            vs = split_heads(node_feats[s] @ params["v"][kind_of(s)])
            att = params["att"][rel]          # [heads, d_head, d_head]
            msg = params["msg"][rel]
            prior = params["prior"][rel]
            sc = np.array([ks[h] @ att[h] @ q[h] for h in range(heads)])
            scores.append(sc * prior / np.sqrt(d_head))
            messages.append(np.stack([vs[h] @ msg[h] for h in range(heads)]))
        scores = np.stack(scores)             # [n_in, heads]
        w = np.exp(scores - scores.max(axis=0, keepdims=True))
        w = w / w.sum(axis=0, keepdims=True)
        agg = np.zeros((heads, d_head))
        for i in range(len(messages)):
            agg += w[i][:, None] * messages[i]
        out[key] = gelu(agg.reshape(-1) @ params["out"][kd]) + x
    return out


def naive_fft_block(x, p, heads: int):
    """Reference transformer block: per-head loops, post-residual norms.

    p maps parameter names (q_w, k_w, v_w, o_w, ffn_w1, ffn_b1, ffn_w2,
    ffn_b2, ln1_g, ln1_b, ln2_g, ln2_b) to plain arrays.
    """
    n, d = x.shape
    dh = d // heads
    q, k, v = x @ p["q_w"], x @ p["k_w"], x @ p["v_w"]
    ctx = np.zeros((n, d))
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        qh, kh, vh = q[:, cols], k[:, cols], v[:, cols]
        for i in range(n):
            s = np.array([qh[i] @ kh[j] for j in range(n)]) / np.sqrt(dh)
            w = np.exp(s - s.max())
            w = w / w.sum()
            ctx[i, cols] = sum(w[j] * vh[j] for j in range(n))

    def norm(y, gain, bias, eps=1e-6):
        mu = y.mean(axis=-1, keepdims=True)
        var = y.var(axis=-1, keepdims=True)
        return gain * (y - mu) / np.sqrt(var + eps) + bias

    x1 = norm(x + ctx @ p["o_w"], p["ln1_g"], p["ln1_b"])
    ffn = np.maximum(0.0, x1 @ p["ffn_w1"] + p["ffn_b1"]) @ p["ffn_w2"] + p["ffn_b2"]
    return norm(x1 + ffn, p["ln2_g"], p["ln2_b"])
