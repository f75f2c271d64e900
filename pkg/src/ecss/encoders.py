"""Initial feature vectors for every graph node.

Speaker, emotion, and intensity nodes read rows of trainable embedding
tables. Text nodes come from a pluggable featurizer: either hashed n-gram
counts through a trainable affine map, or precomputed per-utterance vectors
ingested from a JSON-Lines file. Audio nodes pass the stored utterance
feature through a trainable affine adapter.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import AUDIO_DIM, ContextWindow
from .errors import ConfigurationError, IngestionError, ValidationError
from .graph import EcgGraph, NodeKind, NodeRef

TEXT_FEAT_DIM = 512
NGRAM_BINS = 1024


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


@dataclass
class EmbeddingTable:
    name: str
    table: Tensor          # [n_labels, dim]

    @property
    def n_labels(self) -> int:
        return self.table.data.shape[0]

    @property
    def dim(self) -> int:
        return self.table.data.shape[1]


def make_embedding_table(name: str, n_labels: int, dim: int,
                         rng: np.random.Generator) -> EmbeddingTable:
    data = uniform_init(rng, (n_labels, dim), fan_in=dim)
    return EmbeddingTable(name=name, table=ad.param(data, f"{name}_table"))


def lookup_embedding(table: EmbeddingTable, label: int) -> Tensor:
    """One table row; gradients reach only that row."""
    if not 0 <= label < table.n_labels:
        raise ValidationError(f"label {label} out of range for {table.name} "
                              f"table of {table.n_labels} rows")
    return ad.reshape(ad.rows(table.table, label, label + 1), (table.dim,))


def lookup_rows(table: EmbeddingTable, labels: np.ndarray) -> Tensor:
    for lab in labels:
        if not 0 <= lab < table.n_labels:
            raise ValidationError(f"label {lab} out of range for {table.name} "
                                  f"table of {table.n_labels} rows")
    return ad.gather_rows(table.table, np.asarray(labels, dtype=np.intp))


class HashedNgramFeaturizer:
    """Token unigrams and bigrams hashed into count bins, then projected.

    The hash is crc32 over a tagged byte string, so features are stable
    across runs and platforms.
    """

    def __init__(self, out_dim: int, rng: np.random.Generator, bins: int = NGRAM_BINS):
        self.bins = bins
        self.out_dim = out_dim
        self.w = ad.param(uniform_init(rng, (bins, out_dim), fan_in=bins), "text_proj_w")
        self.b = ad.param(np.zeros(out_dim), "text_proj_b")

    def counts(self, tokens: list[int]) -> np.ndarray:
        if not tokens:
            raise ValidationError("cannot featurize an empty token list")
        vec = np.zeros(self.bins)
        for t in tokens:
            vec[zlib.crc32(b"u:%d" % t) % self.bins] += 1.0
        for a, b in zip(tokens, tokens[1:]):
            vec[zlib.crc32(b"b:%d:%d" % (a, b)) % self.bins] += 1.0
        return vec

    def window_features(self, window: ContextWindow) -> Tensor:
        """[j+1, out_dim]; the current turn's text is the last row."""
        mat = np.stack([self.counts(u.text_tokens)
                        for u in [*window.history, window.current]])
        return ad.linear(ad.tensor(mat), self.w, self.b)

    def parameters(self) -> dict[str, Tensor]:
        return {"text_proj_w": self.w, "text_proj_b": self.b}


class ExternalFeaturizer:
    """Per-utterance vectors ingested from a JSON-Lines file.

    Keys are "<conversation_id>:<absolute_turn_index>". Vectors are fixed
    inputs, not parameters.
    """

    def __init__(self, path, expected_dim: int = TEXT_FEAT_DIM):
        self.out_dim = expected_dim
        self.vectors: dict[str, np.ndarray] = {}
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    raw = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise IngestionError(f"line {line_no}: invalid JSON: {exc}") from exc
                if "utterance_key" not in raw or "vec" not in raw:
                    raise IngestionError(f"line {line_no}: needs utterance_key and vec")
                vec = np.asarray(raw["vec"], dtype=np.float64)
                if vec.shape != (expected_dim,):
                    raise IngestionError(f"line {line_no}: vec must have "
                                         f"{expected_dim} entries, got {vec.shape}")
                self.vectors[str(raw["utterance_key"])] = vec

    def window_features(self, window: ContextWindow) -> Tensor:
        if not window.conversation_id or window.current_index < 0:
            raise IngestionError("window lacks conversation id / turn index "
                                 "needed to key external embeddings")
        j = window.j
        rows = []
        for t in range(j + 1):
            key = f"{window.conversation_id}:{window.current_index - j + t}"
            if key not in self.vectors:
                raise IngestionError(f"no external embedding for '{key}'")
            rows.append(self.vectors[key])
        return ad.tensor(np.stack(rows))

    def parameters(self) -> dict[str, Tensor]:
        return {}


class AudioFeaturizer:
    """Trainable affine adapter over stored utterance audio features."""

    def __init__(self, out_dim: int, rng: np.random.Generator, in_dim: int = AUDIO_DIM):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.w = ad.param(uniform_init(rng, (in_dim, out_dim), fan_in=in_dim), "audio_w")
        self.b = ad.param(np.zeros(out_dim), "audio_b")

    def window_features(self, window: ContextWindow) -> Tensor:
        """[j, out_dim]; history turns only."""
        mat = np.stack([u.audio_feat for u in window.history])
        if mat.shape[1] != self.in_dim:
            raise ValidationError(f"audio features have {mat.shape[1]} dims, "
                                  f"adapter expects {self.in_dim}")
        return ad.linear(ad.tensor(mat), self.w, self.b)

    def parameters(self) -> dict[str, Tensor]:
        return {"audio_w": self.w, "audio_b": self.b}


@dataclass
class NodeFeatures:
    """Per-kind feature matrices for one window, in turn order.

    text covers turns 0..j (current last); speaker covers 0..j as well;
    audio, emotion, and intensity cover history turns 0..j-1 and are None
    when that node kind is ablated away.
    """
    text: Tensor
    speaker: Tensor | None
    audio: Tensor | None
    emotion: Tensor | None
    intensity: Tensor | None

    def of_kind(self, kind: NodeKind) -> Tensor | None:
        return getattr(self, kind.value)


def init_node_features(graph: EcgGraph, window: ContextWindow, tables: dict[str, EmbeddingTable],
                       text_feat, audio_feat: AudioFeaturizer) -> NodeFeatures:
    """Compute initial features for every node of the graph.

    Also mirrors them into graph.features keyed by node, for inspection.
    """
    if graph.j != window.j:
        raise ValidationError("graph and window disagree on history length")
    drop = graph.drop_kinds
    j = window.j
    history = window.history

    text = text_feat.window_features(window)
    speaker = audio = emotion = intensity = None
    if NodeKind.SPEAKER not in drop:
        labels = np.array([u.speaker for u in history] + [window.current.speaker])
        speaker = lookup_rows(tables["speaker"], labels)
    if NodeKind.AUDIO not in drop:
        audio = audio_feat.window_features(window)
    if NodeKind.EMOTION not in drop:
        emotion = lookup_rows(tables["emotion"],
                              np.array([int(u.emotion) for u in history]))
    if NodeKind.INTENSITY not in drop:
        intensity = lookup_rows(tables["intensity"],
                                np.array([int(u.intensity) for u in history]))

    feats = NodeFeatures(text=text, speaker=speaker, audio=audio,
                         emotion=emotion, intensity=intensity)
    for kind, rows in (("text", text), ("speaker", speaker), ("audio", audio),
                       ("emotion", emotion), ("intensity", intensity)):
        if rows is None:
            continue
        for t in range(rows.data.shape[0]):
            graph.features[NodeRef(NodeKind(kind), t)] = rows.data[t]
    for node in graph.nodes:
        if not np.isfinite(graph.features[node]).all():
            raise ValidationError(f"non-finite feature at {node.key}")
    return feats


def make_tables(node_dim: int, rng: np.random.Generator) -> dict[str, EmbeddingTable]:
    """Speaker (2), emotion (7), intensity (3) tables at the shared node width."""
    return {
        "speaker": make_embedding_table("speaker", 2, node_dim, rng),
        "emotion": make_embedding_table("emotion", 7, node_dim, rng),
        "intensity": make_embedding_table("intensity", 3, node_dim, rng),
    }
