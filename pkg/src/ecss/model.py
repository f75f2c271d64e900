"""Full pipeline assembly: one context window in, rendered features and
acoustic predictions out.

The history side builds the conversation graph, initializes node features,
and encodes them; the current-utterance side encodes text and speaker,
mixes in the rendered emotion/intensity/prosody features, and decodes mel
frames. Scale knobs live in ModelConfig; full-width defaults and a small
CPU-friendly profile are both provided.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import ContextWindow
from .encoders import (
    AudioFeaturizer,
    HashedNgramFeaturizer,
    init_node_features,
    make_tables,
)
from .errors import ConfigurationError, ValidationError
from .graph import EcgGraph, NodeKind, build_ecg, default_edge_schema, filter_schema
from .hgt import EncodedGraph, HgtConfig, encode_window, make_hgt_params
from .renderer import RenderedFeatures, RendererConfig, make_renderer_params, render_window
from .synthesizer import (
    SynthesizerConfig,
    SynthPrediction,
    VarianceOutput,
    aggregate_features,
    condition_tokens,
    decode_mel,
    encode_text,
    make_synthesizer_params,
    speaker_vector,
    variance_adapt,
)

_DROPPABLE = {"audio": NodeKind.AUDIO, "emotion": NodeKind.EMOTION,
              "intensity": NodeKind.INTENSITY, "speaker": NodeKind.SPEAKER}


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    text_feat_dim: int = 512
    node_dim: int = 256
    hgt_hidden: int = 384
    hgt_heads: int = 2
    hgt_layers: int = 1
    lstm_hidden: int = 256
    fc_dim: int = 256
    feature_dim: int = 256
    attn_dim: int = 256
    prosody_out: int = 256
    token_dim: int = 256
    ffn_dim: int = 256
    enc_blocks: int = 4
    dec_blocks: int = 6
    synth_heads: int = 2
    dropout: float = 0.2
    n_mels: int = 80
    tau: float = 0.1
    drop_kinds: frozenset[NodeKind] = frozenset()

    @staticmethod
    def lite(**over) -> "ModelConfig":
        """Small profile sized for CPU-minutes training runs."""
        base = ModelConfig(text_feat_dim=96, node_dim=48, hgt_hidden=64,
                           lstm_hidden=48, fc_dim=64, feature_dim=64,
                           attn_dim=64, token_dim=48, ffn_dim=96,
                           enc_blocks=2, dec_blocks=2, dropout=0.0)
        return replace(base, **over)

    def validate(self) -> None:
        if self.tau <= 0:
            raise ConfigurationError("tau must be > 0")
        if NodeKind.TEXT in self.drop_kinds:
            raise ConfigurationError("text nodes cannot be dropped")
        self.hgt_config().validate()
        self.renderer_config().validate()
        self.synth_config().validate()

    def hgt_config(self) -> HgtConfig:
        return HgtConfig(hidden_dim=self.hgt_hidden, heads=self.hgt_heads,
                         layers=self.hgt_layers)

    def renderer_config(self) -> RendererConfig:
        return RendererConfig(hidden_in=self.hgt_hidden,
                              lstm_hidden=self.lstm_hidden,
                              fc_dim=self.fc_dim,
                              feature_dim=self.feature_dim,
                              attn_dim=self.attn_dim,
                              query_dim=self.text_feat_dim,
                              prosody_out=self.prosody_out)

    def synth_config(self) -> SynthesizerConfig:
        return SynthesizerConfig(vocab_size=self.vocab_size,
                                 token_dim=self.token_dim,
                                 ffn_dim=self.ffn_dim,
                                 enc_blocks=self.enc_blocks,
                                 dec_blocks=self.dec_blocks,
                                 heads=self.synth_heads,
                                 dropout=self.dropout,
                                 n_mels=self.n_mels,
                                 emotion_dim=self.feature_dim,
                                 intensity_dim=self.feature_dim,
                                 prosody_dim=self.prosody_out)

    def to_dict(self) -> dict:
        out = {name: getattr(self, name) for name in (
            "vocab_size", "text_feat_dim", "node_dim", "hgt_hidden",
            "hgt_heads", "hgt_layers", "lstm_hidden", "fc_dim", "feature_dim",
            "attn_dim", "prosody_out", "token_dim", "ffn_dim", "enc_blocks",
            "dec_blocks", "synth_heads", "dropout", "n_mels", "tau")}
        out["drop_kinds"] = sorted(k.value for k in self.drop_kinds)
        return out

    @staticmethod
    def from_dict(raw: dict) -> "ModelConfig":
        data = dict(raw)
        kinds = frozenset(NodeKind(v) for v in data.pop("drop_kinds", []))
        return ModelConfig(drop_kinds=kinds, **data)


def parse_drop_kinds(names) -> frozenset[NodeKind]:
    kinds = set()
    for name in names:
        if name not in _DROPPABLE:
            raise ConfigurationError(
                f"cannot ablate '{name}'; choose from "
                f"{sorted(_DROPPABLE)} or 'supcon'")
        kinds.add(_DROPPABLE[name])
    return frozenset(kinds)


@dataclass
class WindowOutput:
    graph: EcgGraph
    encoded: EncodedGraph
    rendered: RenderedFeatures
    variance: VarianceOutput
    prediction: SynthPrediction
    mix: Tensor


class Model:
    """Owns every trainable tensor and runs the window-level forward pass."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator,
                 text_featurizer=None):
        config.validate()
        self.config = config
        self.text_featurizer = (text_featurizer if text_featurizer is not None
                                else HashedNgramFeaturizer(config.text_feat_dim,
                                                           rng))
        if self.text_featurizer.out_dim != config.text_feat_dim:
            raise ConfigurationError(
                f"text featurizer emits {self.text_featurizer.out_dim} dims, "
                f"config expects {config.text_feat_dim}")
        self.audio_featurizer = AudioFeaturizer(config.node_dim, rng)
        self.tables = make_tables(config.node_dim, rng)
        self.schema = filter_schema(default_edge_schema(), config.drop_kinds)
        in_dims = {NodeKind.TEXT: config.text_feat_dim}
        for kind in (NodeKind.AUDIO, NodeKind.SPEAKER, NodeKind.EMOTION,
                     NodeKind.INTENSITY):
            if kind not in config.drop_kinds:
                in_dims[kind] = config.node_dim
        self.hgt = make_hgt_params(config.hgt_config(), in_dims, self.schema,
                                   rng)
        self.renderer = make_renderer_params(config.renderer_config(), rng)
        self.synth = make_synthesizer_params(config.synth_config(), rng)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, t in self.text_featurizer.parameters().items():
            out[f"feat.{name}"] = t
        for name, t in self.audio_featurizer.parameters().items():
            out[f"feat.{name}"] = t
        for name, table in self.tables.items():
            out[f"emb.{name}"] = table.table
        out.update(self.hgt.parameters())
        out.update(self.renderer.parameters())
        out.update(self.synth.parameters())
        return out

    def forward_window(self, window: ContextWindow, teacher: bool = True,
                       train: bool = False,
                       rng: np.random.Generator | None = None,
                       detach_logits: bool = True) -> WindowOutput:
        cfg = self.config
        graph = build_ecg(window, drop_kinds=cfg.drop_kinds)
        feats = init_node_features(graph, window, self.tables,
                                   self.text_featurizer,
                                   self.audio_featurizer)
        encoded = encode_window(self.hgt, graph, feats)
        j = window.j
        current_text = ad.reshape(ad.rows(feats.text, j, j + 1),
                                  (cfg.text_feat_dim,))
        rendered = render_window(self.renderer, encoded, window, current_text,
                                 detach_logits=detach_logits)

        tokens, content = encode_text(self.synth, window.current.text_tokens,
                                      train=train, rng=rng)
        spk = speaker_vector(self.synth, window.current.speaker)
        mix = aggregate_features(self.synth, content, spk,
                                 rendered.emotion_feat,
                                 rendered.intensity_feat,
                                 rendered.prosody_feat)
        conditioned = condition_tokens(tokens, mix)
        teacher_durations = None
        if teacher:
            if window.current.targets is None:
                raise ValidationError("teacher forcing needs acoustic targets "
                                      "on the current utterance")
            teacher_durations = window.current.targets.duration
        variance = variance_adapt(self.synth, conditioned, teacher_durations)
        mel = decode_mel(self.synth, variance.frames, train=train, rng=rng)
        prediction = SynthPrediction(mel=mel, pitch=variance.pitch,
                                     energy=variance.energy,
                                     log_duration=variance.log_duration)
        return WindowOutput(graph=graph, encoded=encoded, rendered=rendered,
                            variance=variance, prediction=prediction, mix=mix)
