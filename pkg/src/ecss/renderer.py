"""Emotion, intensity, and prosody prediction from the encoded graph.

The emotion predictor reads the ordered history emotion-node encodings
through two same-padded convolutions, a bidirectional recurrent layer, and
two fully connected layers, yielding a feature vector plus a linear logits
head. The intensity predictor mirrors it but keeps the per-step recurrent
outputs and mean-pools pairs repeatedly until one vector remains, so later
turns, which survive more pooling rounds unaveraged, weigh more. The
prosody predictor attends from the current utterance's raw text feature
over history text-node encodings.

Contrastive training treats same-label batch members as positives over
cosine similarities; the loss itself lives in the gradient engine and is
re-exported here alongside the prosody regression loss.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import ContextWindow
from .encoders import uniform_init
from .errors import ConfigurationError, ValidationError
from .graph import NodeKind
from .hgt import EncodedGraph

supcon_loss = ad.supcon_loss


@dataclass
class RenderedFeatures:
    emotion_feat: Tensor       # [feature_dim]
    emotion_logits: Tensor     # [7]
    intensity_feat: Tensor     # [feature_dim]
    intensity_logits: Tensor   # [3]
    prosody_feat: Tensor       # [prosody_out]
    flags: dict

    def validate(self) -> None:
        for name in ("emotion_feat", "emotion_logits", "intensity_feat",
                     "intensity_logits", "prosody_feat"):
            if not np.all(np.isfinite(getattr(self, name).data)):
                raise ValidationError(f"{name} has non-finite entries")


@dataclass
class SupConConfig:
    tau: float = 0.1

    def validate(self) -> None:
        if not self.tau > 0:
            raise ConfigurationError("supcon temperature must be > 0")


@dataclass
class RendererConfig:
    hidden_in: int = 384        # encoder output width
    lstm_hidden: int = 256      # per direction
    fc_dim: int = 256
    feature_dim: int = 256
    attn_dim: int = 256
    attn_heads: int = 2
    query_dim: int = 512        # raw current-text feature width
    prosody_out: int = 256
    conv_kernel: int = 3

    def validate(self) -> None:
        if self.attn_dim % self.attn_heads:
            raise ConfigurationError("attn_dim must divide into attn_heads")
        for name in ("hidden_in", "lstm_hidden", "fc_dim", "feature_dim",
                     "attn_dim", "query_dim", "prosody_out"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")


@dataclass
class SequenceHeadParams:
    """Conv x2 -> BiLSTM -> FC x2 -> feature, plus a linear logits head."""
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    fwd_wx: Tensor
    fwd_wh: Tensor
    fwd_b: Tensor
    bwd_wx: Tensor
    bwd_wh: Tensor
    bwd_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    logits_w: Tensor
    logits_b: Tensor

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{name}": getattr(self, name)
                for name in ("conv1_w", "conv1_b", "conv2_w", "conv2_b",
                             "fwd_wx", "fwd_wh", "fwd_b",
                             "bwd_wx", "bwd_wh", "bwd_b",
                             "fc1_w", "fc1_b", "fc2_w", "fc2_b",
                             "logits_w", "logits_b")}


@dataclass
class ProsodyParams:
    q_w: Tensor
    k_w: Tensor
    v_w: Tensor
    out_w: Tensor
    out_b: Tensor

    def parameters(self, prefix: str = "pro") -> dict[str, Tensor]:
        return {f"{prefix}.{n}": getattr(self, n)
                for n in ("q_w", "k_w", "v_w", "out_w", "out_b")}


@dataclass
class RendererParams:
    config: RendererConfig
    emotion: SequenceHeadParams
    intensity: SequenceHeadParams
    prosody: ProsodyParams

    def parameters(self) -> dict[str, Tensor]:
        out = self.emotion.parameters("emo")
        out.update(self.intensity.parameters("int"))
        out.update(self.prosody.parameters())
        return out


def _make_sequence_head(cfg: RendererConfig, n_classes: int,
                        rng: np.random.Generator) -> SequenceHeadParams:
    k, h, lstm = cfg.conv_kernel, cfg.hidden_in, cfg.lstm_hidden
    conv_fan = k * h

    def lstm_io(in_dim):
        return (ad.param(uniform_init(rng, (in_dim, 4 * lstm), in_dim), "wx"),
                ad.param(uniform_init(rng, (lstm, 4 * lstm), lstm), "wh"),
                ad.param(np.zeros(4 * lstm), "b"))

    fwd = lstm_io(h)
    bwd = lstm_io(h)
    return SequenceHeadParams(
        conv1_w=ad.param(uniform_init(rng, (k, h, h), conv_fan), "c1w"),
        conv1_b=ad.param(np.zeros(h), "c1b"),
        conv2_w=ad.param(uniform_init(rng, (k, h, h), conv_fan), "c2w"),
        conv2_b=ad.param(np.zeros(h), "c2b"),
        fwd_wx=fwd[0], fwd_wh=fwd[1], fwd_b=fwd[2],
        bwd_wx=bwd[0], bwd_wh=bwd[1], bwd_b=bwd[2],
        fc1_w=ad.param(uniform_init(rng, (2 * lstm, cfg.fc_dim), 2 * lstm), "f1w"),
        fc1_b=ad.param(np.zeros(cfg.fc_dim), "f1b"),
        fc2_w=ad.param(uniform_init(rng, (cfg.fc_dim, cfg.feature_dim), cfg.fc_dim), "f2w"),
        fc2_b=ad.param(np.zeros(cfg.feature_dim), "f2b"),
        logits_w=ad.param(uniform_init(rng, (cfg.feature_dim, n_classes),
                                       cfg.feature_dim), "lw"),
        logits_b=ad.param(np.zeros(n_classes), "lb"))


def make_renderer_params(cfg: RendererConfig, rng: np.random.Generator) -> RendererParams:
    cfg.validate()
    emotion = _make_sequence_head(cfg, 7, rng)
    intensity = _make_sequence_head(cfg, 3, rng)
    a, heads = cfg.attn_dim, cfg.attn_heads
    prosody = ProsodyParams(
        q_w=ad.param(uniform_init(rng, (cfg.query_dim, a), cfg.query_dim), "qw"),
        k_w=ad.param(uniform_init(rng, (cfg.hidden_in, a), cfg.hidden_in), "kw"),
        v_w=ad.param(uniform_init(rng, (cfg.hidden_in, a), cfg.hidden_in), "vw"),
        out_w=ad.param(uniform_init(rng, (a, cfg.prosody_out), a), "ow"),
        out_b=ad.param(np.zeros(cfg.prosody_out), "ob"))
    return RendererParams(config=cfg, emotion=emotion, intensity=intensity,
                          prosody=prosody)


def _conv_bilstm(p: SequenceHeadParams, seq: Tensor) -> tuple[Tensor, Tensor]:
    """Shared front: conv x2 with relu, then BiLSTM.

    Returns (per-step outputs [T, 2*lstm], last states concat [2*lstm]).
    """
    x = ad.relu(ad.conv1d_same(seq, p.conv1_w, p.conv1_b))
    x = ad.relu(ad.conv1d_same(x, p.conv2_w, p.conv2_b))
    fwd_out, fwd_last = ad.lstm_seq(x, p.fwd_wx, p.fwd_wh, p.fwd_b, reverse=False)
    bwd_out, bwd_last = ad.lstm_seq(x, p.bwd_wx, p.bwd_wh, p.bwd_b, reverse=True)
    outputs = ad.concat([fwd_out, bwd_out], axis=1)
    last = ad.concat([ad.reshape(fwd_last, (1, -1)),
                      ad.reshape(bwd_last, (1, -1))], axis=1)
    return outputs, ad.reshape(last, (last.data.shape[1],))


def _fallback(feature_dim: int, n_classes: int) -> tuple[Tensor, Tensor, dict]:
    return (ad.tensor(np.zeros(feature_dim)), ad.tensor(np.zeros(n_classes)),
            {"ablated": True})


def _logits(p: SequenceHeadParams, feature: Tensor, detach: bool) -> Tensor:
    base = feature.detach() if detach else feature
    return ad.add(ad.matmul(base, p.logits_w), p.logits_b)


def _check_window(encoded: EncodedGraph, window: ContextWindow | None) -> None:
    if window is not None and window.j != encoded.structure.j:
        raise ValidationError(f"window has {window.j} history turns but the "
                              f"graph was built for {encoded.structure.j}")


def predict_emotion(params: RendererParams, encoded: EncodedGraph,
                    window: ContextWindow | None = None,
                    detach_logits: bool = True) -> tuple[Tensor, Tensor, dict]:
    """Current-turn emotion feature and logits from history emotion nodes.

    When emotion nodes are ablated away, returns a zero feature and flat
    logits, flagged, so downstream stages and losses still compose.
    """
    cfg = params.config
    _check_window(encoded, window)
    if NodeKind.EMOTION not in encoded.structure.kind_slices:
        return _fallback(cfg.feature_dim, 7)
    seq = encoded.rows_of(NodeKind.EMOTION)
    _, last = _conv_bilstm(params.emotion, seq)
    hid = ad.relu(ad.add(ad.matmul(last, params.emotion.fc1_w),
                         params.emotion.fc1_b))
    feature = ad.add(ad.matmul(hid, params.emotion.fc2_w), params.emotion.fc2_b)
    return feature, _logits(params.emotion, feature, detach_logits), {}


def pool_to_vector(rows: Tensor) -> Tensor:
    """Mean-pool adjacent row pairs repeatedly until one row remains.

    A constant sequence is preserved exactly. A length-1 sequence passes
    through. Later rows survive more rounds unaveraged, so the result
    weights recent turns more.
    """
    while rows.data.shape[0] > 1:
        rows = ad.avgpool_pairs(rows)
    return ad.reshape(rows, (rows.data.shape[1],))


def predict_intensity(params: RendererParams, encoded: EncodedGraph,
                      window: ContextWindow | None = None,
                      detach_logits: bool = True) -> tuple[Tensor, Tensor, dict]:
    """Intensity feature and logits pooled over all history intensity nodes."""
    cfg = params.config
    _check_window(encoded, window)
    if NodeKind.INTENSITY not in encoded.structure.kind_slices:
        return _fallback(cfg.feature_dim, 3)
    seq = encoded.rows_of(NodeKind.INTENSITY)
    outputs, _ = _conv_bilstm(params.intensity, seq)
    hid = ad.relu(ad.linear(outputs, params.intensity.fc1_w,
                            params.intensity.fc1_b))
    per_step = ad.linear(hid, params.intensity.fc2_w, params.intensity.fc2_b)
    feature = pool_to_vector(per_step)
    return feature, _logits(params.intensity, feature, detach_logits), {}


def predict_prosody(params: RendererParams, encoded: EncodedGraph,
                    current_text_feature: Tensor) -> Tensor:
    """Attention of the current utterance's text over history text encodings."""
    cfg = params.config
    if current_text_feature.data.shape != (cfg.query_dim,):
        raise ValidationError(f"prosody query must have {cfg.query_dim} dims, "
                              f"got {current_text_feature.data.shape}")
    text = encoded.rows_of(NodeKind.TEXT)
    j = text.data.shape[0] - 1      # last row is the current turn
    if j < 1:
        raise ValidationError("prosody prediction needs >= 1 history text node")
    history = ad.rows(text, 0, j)
    heads, d = cfg.attn_heads, cfg.attn_dim // cfg.attn_heads

    q = ad.matmul(current_text_feature, params.prosody.q_w)     # [attn]
    k = ad.matmul(history, params.prosody.k_w)                  # [j, attn]
    v = ad.matmul(history, params.prosody.v_w)
    # per-head dot products: reshape to [j, heads, d] against [heads, d]
    qh = ad.reshape(q, (1, heads, d))
    kh = ad.reshape(k, (j, heads, d))
    scores = ad.scale(ad.asum(ad.mul(kh, qh), axis=2), 1.0 / np.sqrt(d))
    weights = ad.softmax_last(ad.transpose(scores, (1, 0)))     # [heads, j]
    vh = ad.transpose(ad.reshape(v, (j, heads, d)), (1, 0, 2))  # [heads, j, d]
    ctx = ad.bmm(ad.reshape(weights, (heads, 1, j)), vh)        # [heads, 1, d]
    ctx = ad.reshape(ctx, (cfg.attn_dim,))
    return ad.add(ad.matmul(ctx, params.prosody.out_w), params.prosody.out_b)


def render_window(params: RendererParams, encoded: EncodedGraph,
                  window: ContextWindow | None,
                  current_text_feature: Tensor,
                  detach_logits: bool = True) -> RenderedFeatures:
    """Run all three predictors and bundle their outputs."""
    e_feat, e_logits, e_flags = predict_emotion(params, encoded, window,
                                                detach_logits)
    i_feat, i_logits, i_flags = predict_intensity(params, encoded, window,
                                                  detach_logits)
    prosody = predict_prosody(params, encoded, current_text_feature)
    flags = {}
    if e_flags.get("ablated"):
        flags["emotion_ablated"] = True
    if i_flags.get("ablated"):
        flags["intensity_ablated"] = True
    return RenderedFeatures(emotion_feat=e_feat, emotion_logits=e_logits,
                            intensity_feat=i_feat, intensity_logits=i_logits,
                            prosody_feat=prosody, flags=flags)


def prosody_mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.data.shape != target.data.shape:
        raise ValidationError(f"prosody shapes differ: {pred.data.shape} "
                              f"vs {target.data.shape}")
    return ad.mse_loss(pred, target)
