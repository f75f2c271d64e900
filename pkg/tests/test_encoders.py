"""Node feature initialization: tables, featurizers, gradient locality."""
from __future__ import annotations

import json

import numpy as np
import pytest

from ecss import autodiff as ad
from ecss.autodiff import backward
from ecss.corpus import GeneratorConfig, generate_corpus, slice_context
from ecss.encoders import (
    AudioFeaturizer,
    ExternalFeaturizer,
    HashedNgramFeaturizer,
    NGRAM_BINS,
    TEXT_FEAT_DIM,
    init_node_features,
    lookup_embedding,
    lookup_rows,
    make_embedding_table,
    make_tables,
)
from ecss.errors import IngestionError, ValidationError
from ecss.graph import NodeKind, NodeRef, build_ecg


def rng(seed=0):
    return np.random.default_rng(seed)


@pytest.fixture()
def window():
    conv = generate_corpus(GeneratorConfig(n_conversations=1, seed=3,
                                           mean_turns=8.0))[0]
    return slice_context(conv, 4, 3)


def test_table_shapes_and_default_dims():
    tables = make_tables(256, rng())
    assert tables["speaker"].table.data.shape == (2, 256)
    assert tables["emotion"].table.data.shape == (7, 256)
    assert tables["intensity"].table.data.shape == (3, 256)
    bound = 1.0 / np.sqrt(256)
    for t in tables.values():
        assert np.abs(t.table.data).max() <= bound


def test_lookup_embedding_row_and_bounds():
    table = make_embedding_table("emotion", 7, 16, rng(1))
    row = lookup_embedding(table, 6)
    np.testing.assert_array_equal(row.data, table.table.data[6])
    with pytest.raises(ValidationError):
        lookup_embedding(table, 7)
    with pytest.raises(ValidationError):
        lookup_embedding(table, -1)
    with pytest.raises(ValidationError):
        lookup_rows(table, np.array([0, 9]))


def test_lookup_gradient_reaches_only_accessed_rows():
    table = make_embedding_table("emotion", 7, 8, rng(2))
    row = lookup_embedding(table, 2)
    backward(ad.asum(ad.mul(row, row)))
    grad = table.table.grad
    assert grad[2].any()
    mask = np.ones(7, dtype=bool)
    mask[2] = False
    assert not grad[mask].any()


def test_ngram_counts_are_deterministic_and_sized():
    f = HashedNgramFeaturizer(32, rng(3))
    toks = [5, 9, 5, 40]
    c1, c2 = f.counts(toks), f.counts(toks)
    np.testing.assert_array_equal(c1, c2)
    assert c1.shape == (NGRAM_BINS,)
    assert c1.sum() == len(toks) + len(toks) - 1   # unigrams + bigrams
    with pytest.raises(ValidationError):
        f.counts([])


def test_disjoint_token_lists_get_distinct_features():
    f = HashedNgramFeaturizer(TEXT_FEAT_DIM, rng(4))
    a = f.counts([1, 2, 3])
    b = f.counts([40, 41, 42])
    assert np.abs(a - b).sum() > 0


def test_ngram_projection_matches_manual_affine():
    f = HashedNgramFeaturizer(16, rng(5))
    conv = generate_corpus(GeneratorConfig(n_conversations=1, seed=6))[0]
    w = slice_context(conv, 2, 2)
    out = f.window_features(w)
    assert out.data.shape == (3, 16)
    counts = np.stack([f.counts(u.text_tokens)
                       for u in [*w.history, w.current]])
    np.testing.assert_allclose(out.data, counts @ f.w.data + f.b.data, rtol=1e-12)


def test_audio_adapter_matches_manual_affine(window):
    a = AudioFeaturizer(24, rng(7))
    out = a.window_features(window)
    mat = np.stack([u.audio_feat for u in window.history])
    np.testing.assert_allclose(out.data, mat @ a.w.data + a.b.data, rtol=1e-12)
    assert out.data.shape == (3, 24)


def test_external_featurizer_round_trip(tmp_path, window):
    path = tmp_path / "embeddings.jsonl"
    conv_id = window.conversation_id
    with open(path, "w") as fh:
        for t in range(8):
            rec = {"utterance_key": f"{conv_id}:{t}",
                   "vec": np.full(TEXT_FEAT_DIM, float(t)).tolist()}
            fh.write(json.dumps(rec) + "\n")
    ext = ExternalFeaturizer(path)
    out = ext.window_features(window)
    assert out.data.shape == (4, TEXT_FEAT_DIM)
    # window covers absolute turns 1..4 (3 history + current at index 4)
    np.testing.assert_allclose(out.data[:, 0], [1.0, 2.0, 3.0, 4.0])
    assert not out.requires_grad


def test_external_featurizer_missing_key_and_bad_records(tmp_path, window):
    path = tmp_path / "partial.jsonl"
    with open(path, "w") as fh:
        fh.write(json.dumps({"utterance_key": f"{window.conversation_id}:1",
                             "vec": [0.0] * TEXT_FEAT_DIM}) + "\n")
    ext = ExternalFeaturizer(path)
    with pytest.raises(IngestionError, match="no external embedding"):
        ext.window_features(window)

    bad_dim = tmp_path / "bad_dim.jsonl"
    with open(bad_dim, "w") as fh:
        fh.write(json.dumps({"utterance_key": "x:0", "vec": [1.0, 2.0]}) + "\n")
    with pytest.raises(IngestionError, match="512"):
        ExternalFeaturizer(bad_dim)

    bad_json = tmp_path / "bad_json.jsonl"
    bad_json.write_text("nope\n")
    with pytest.raises(IngestionError, match="line 1"):
        ExternalFeaturizer(bad_json)


def test_external_featurizer_needs_window_identity(tmp_path):
    path = tmp_path / "e.jsonl"
    path.write_text(json.dumps({"utterance_key": "c:0",
                                "vec": [0.0] * TEXT_FEAT_DIM}) + "\n")
    ext = ExternalFeaturizer(path)
    conv = generate_corpus(GeneratorConfig(n_conversations=1, seed=8))[0]
    w = slice_context(conv, 1, 1)
    w.conversation_id = ""
    with pytest.raises(IngestionError, match="conversation id"):
        ext.window_features(w)


def test_init_node_features_full_graph(window):
    g = build_ecg(window)
    tables = make_tables(12, rng(9))
    text = HashedNgramFeaturizer(20, rng(10))
    audio = AudioFeaturizer(12, rng(11))
    feats = init_node_features(g, window, tables, text, audio)
    j = window.j
    assert feats.text.data.shape == (j + 1, 20)
    assert feats.speaker.data.shape == (j + 1, 12)
    assert feats.audio.data.shape == (j, 12)
    assert feats.emotion.data.shape == (j, 12)
    assert feats.intensity.data.shape == (j, 12)
    assert len(g.features) == 5 * j + 2
    np.testing.assert_array_equal(g.features[NodeRef(NodeKind.TEXT, j)],
                                  feats.text.data[j])
    np.testing.assert_array_equal(g.features[NodeRef(NodeKind.EMOTION, 0)],
                                  feats.emotion.data[0])


def test_same_speaker_turns_share_features(window):
    g = build_ecg(window)
    tables = make_tables(8, rng(12))
    feats = init_node_features(g, window, tables,
                               HashedNgramFeaturizer(8, rng(13)),
                               AudioFeaturizer(8, rng(14)))
    speakers = [u.speaker for u in window.history] + [window.current.speaker]
    # alternating dialogue: turns 0 and 2 share a speaker
    assert speakers[0] == speakers[2]
    np.testing.assert_array_equal(feats.speaker.data[0], feats.speaker.data[2])
    assert speakers[0] != speakers[1]
    assert np.abs(feats.speaker.data[0] - feats.speaker.data[1]).max() > 0


def test_zeroed_emotion_table_gives_zero_features(window):
    g = build_ecg(window)
    tables = make_tables(8, rng(15))
    tables["emotion"].table.data[:] = 0.0
    feats = init_node_features(g, window, tables,
                               HashedNgramFeaturizer(8, rng(16)),
                               AudioFeaturizer(8, rng(17)))
    assert not feats.emotion.data.any()
    assert feats.intensity.data.any()


def test_init_respects_dropped_kinds(window):
    drop = frozenset({NodeKind.AUDIO, NodeKind.EMOTION})
    g = build_ecg(window, drop_kinds=drop)
    tables = make_tables(8, rng(18))
    feats = init_node_features(g, window, tables,
                               HashedNgramFeaturizer(8, rng(19)),
                               AudioFeaturizer(8, rng(20)))
    assert feats.audio is None
    assert feats.emotion is None
    assert feats.intensity is not None
    assert len(g.features) == len(g.nodes)


def test_init_rejects_mismatched_window(window):
    other = build_ecg(slice_context(
        generate_corpus(GeneratorConfig(n_conversations=1, seed=21))[0], 1, 1))
    tables = make_tables(8, rng(22))
    with pytest.raises(ValidationError):
        init_node_features(other, window, tables,
                           HashedNgramFeaturizer(8, rng(23)),
                           AudioFeaturizer(8, rng(24)))


def test_feature_gradients_flow_to_all_encoders(window):
    g = build_ecg(window)
    tables = make_tables(8, rng(25))
    text = HashedNgramFeaturizer(8, rng(26))
    audio = AudioFeaturizer(8, rng(27))
    feats = init_node_features(g, window, tables, text, audio)
    loss = ad.add_n([ad.asum(ad.mul(t, t)) for t in
                     [feats.text, feats.speaker, feats.audio,
                      feats.emotion, feats.intensity]])
    backward(loss)
    assert text.w.grad is not None and text.w.grad.any()
    assert audio.w.grad is not None and audio.w.grad.any()
    for name in ("speaker", "emotion", "intensity"):
        assert tables[name].table.grad is not None
    used = {int(u.emotion) for u in window.history}
    grad = tables["emotion"].table.grad
    for e in range(7):
        assert grad[e].any() == (e in used)
