"""Current-utterance acoustics: text encoding, feature mixing, and decoding.

A token transformer encodes the utterance text. Five feature streams
(content, speaker, emotion, intensity, prosody) are projected to a common
width and mixed by softmax-normalized trainable scalars; the mix is
broadcast-added to every token vector. A variance adaptor predicts
per-token log-duration, pitch, and energy, adds pitch and energy back into
the token stream, and expands tokens into frames by duration. A second
transformer stack decodes frames to mel rows.

Losses follow the usual acoustic recipe: mel MAE plus MSE on pitch,
energy, and log-duration, reported separately and summed.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import AcousticTargets
from .encoders import uniform_init
from .errors import ConfigurationError, ValidationError

STREAMS = ("content", "speaker", "emotion", "intensity", "prosody")


@dataclass
class SynthesizerConfig:
    vocab_size: int = 64
    token_dim: int = 256
    ffn_dim: int = 256
    enc_blocks: int = 4
    dec_blocks: int = 6
    heads: int = 2
    dropout: float = 0.2
    n_mels: int = 80
    emotion_dim: int = 256
    intensity_dim: int = 256
    prosody_dim: int = 256

    def validate(self) -> None:
        if self.token_dim % self.heads:
            raise ConfigurationError("token_dim must divide into heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must be in [0, 1)")
        for name in ("vocab_size", "token_dim", "ffn_dim", "enc_blocks",
                     "dec_blocks", "n_mels", "emotion_dim", "intensity_dim",
                     "prosody_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")

    def stream_dims(self) -> dict[str, int]:
        return {"content": self.token_dim, "speaker": self.token_dim,
                "emotion": self.emotion_dim, "intensity": self.intensity_dim,
                "prosody": self.prosody_dim}


_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def sinusoid_table(n: int, dim: int) -> np.ndarray:
    """Fixed position encoding: interleaved sin/cos over geometric rates."""
    key = (n, dim)
    if key not in _PE_CACHE:
        pos = np.arange(n)[:, None]
        idx = np.arange(0, dim, 2)[None, :]
        angle = pos / np.power(10000.0, idx / dim)
        table = np.zeros((n, dim))
        table[:, 0::2] = np.sin(angle)
        table[:, 1::2] = np.cos(angle[:, : dim // 2])
        _PE_CACHE[key] = table
    return _PE_CACHE[key]


@dataclass
class FftBlockParams:
    q_w: Tensor
    k_w: Tensor
    v_w: Tensor
    o_w: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{n}": getattr(self, n)
                for n in ("q_w", "k_w", "v_w", "o_w", "ffn_w1", "ffn_b1",
                          "ffn_w2", "ffn_b2", "ln1_g", "ln1_b", "ln2_g",
                          "ln2_b")}


def _make_fft_block(d: int, f: int, rng: np.random.Generator) -> FftBlockParams:
    return FftBlockParams(
        q_w=ad.param(uniform_init(rng, (d, d), d), "q"),
        k_w=ad.param(uniform_init(rng, (d, d), d), "k"),
        v_w=ad.param(uniform_init(rng, (d, d), d), "v"),
        o_w=ad.param(uniform_init(rng, (d, d), d), "o"),
        ffn_w1=ad.param(uniform_init(rng, (d, f), d), "w1"),
        ffn_b1=ad.param(np.zeros(f), "b1"),
        ffn_w2=ad.param(uniform_init(rng, (f, d), f), "w2"),
        ffn_b2=ad.param(np.zeros(d), "b2"),
        ln1_g=ad.param(np.ones(d), "g1"),
        ln1_b=ad.param(np.zeros(d), "lb1"),
        ln2_g=ad.param(np.ones(d), "g2"),
        ln2_b=ad.param(np.zeros(d), "lb2"))


def fft_block(p: FftBlockParams, x: Tensor, heads: int, dropout_p: float = 0.0,
              rng: np.random.Generator | None = None) -> Tensor:
    """Self-attention then feed-forward, residuals normalized after adding."""
    n, d = x.data.shape
    dh = d // heads

    def split(t):
        return ad.transpose(ad.reshape(t, (n, heads, dh)), (1, 0, 2))

    q = split(ad.matmul(x, p.q_w))
    k = split(ad.matmul(x, p.k_w))
    v = split(ad.matmul(x, p.v_w))
    scores = ad.scale(ad.bmm(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
    ctx = ad.bmm(ad.softmax_last(scores), v)                 # [heads, n, dh]
    ctx = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (n, d))
    attn = ad.matmul(ctx, p.o_w)
    if dropout_p > 0.0:
        attn = ad.dropout(attn, dropout_p, rng)
    x = ad.layer_norm(ad.add(x, attn), p.ln1_g, p.ln1_b)

    hid = ad.relu(ad.linear(x, p.ffn_w1, p.ffn_b1))
    out = ad.linear(hid, p.ffn_w2, p.ffn_b2)
    if dropout_p > 0.0:
        out = ad.dropout(out, dropout_p, rng)
    return ad.layer_norm(ad.add(x, out), p.ln2_g, p.ln2_b)


@dataclass
class TextEncoderParams:
    embed: Tensor                       # [vocab, token_dim]
    blocks: list[FftBlockParams]

    def parameters(self) -> dict[str, Tensor]:
        out = {"txt.embed": self.embed}
        for i, b in enumerate(self.blocks):
            out.update(b.parameters(f"txt.b{i}"))
        return out


@dataclass
class AggregatorParams:
    w: Tensor                           # [5] mixing logits
    proj_w: dict[str, Tensor]
    proj_b: dict[str, Tensor]

    def parameters(self) -> dict[str, Tensor]:
        out = {"agg.w": self.w}
        for s in STREAMS:
            out[f"agg.proj_w.{s}"] = self.proj_w[s]
            out[f"agg.proj_b.{s}"] = self.proj_b[s]
        return out


@dataclass
class VariancePredictorParams:
    c1_w: Tensor
    c1_b: Tensor
    c2_w: Tensor
    c2_b: Tensor
    head_w: Tensor                      # [token_dim]
    head_b: Tensor                      # scalar

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{n}": getattr(self, n)
                for n in ("c1_w", "c1_b", "c2_w", "c2_b", "head_w", "head_b")}


@dataclass
class VarianceAdaptorParams:
    duration: VariancePredictorParams
    pitch: VariancePredictorParams
    energy: VariancePredictorParams
    pitch_vec: Tensor                   # [token_dim] add-back direction
    energy_vec: Tensor

    def parameters(self) -> dict[str, Tensor]:
        out = self.duration.parameters("var.dur")
        out.update(self.pitch.parameters("var.pitch"))
        out.update(self.energy.parameters("var.energy"))
        out["var.pitch_vec"] = self.pitch_vec
        out["var.energy_vec"] = self.energy_vec
        return out


@dataclass
class MelDecoderParams:
    blocks: list[FftBlockParams]
    out_w: Tensor                       # [token_dim, n_mels]
    out_b: Tensor

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, b in enumerate(self.blocks):
            out.update(b.parameters(f"dec.b{i}"))
        out["dec.out_w"] = self.out_w
        out["dec.out_b"] = self.out_b
        return out


@dataclass
class SynthesizerParams:
    config: SynthesizerConfig
    text: TextEncoderParams
    speaker: Tensor                     # [2, token_dim]
    agg: AggregatorParams
    var: VarianceAdaptorParams
    dec: MelDecoderParams

    def parameters(self) -> dict[str, Tensor]:
        out = self.text.parameters()
        out["spk.embed"] = self.speaker
        out.update(self.agg.parameters())
        out.update(self.var.parameters())
        out.update(self.dec.parameters())
        return out


def _make_variance_predictor(d: int, rng: np.random.Generator) -> VariancePredictorParams:
    fan = 3 * d
    return VariancePredictorParams(
        c1_w=ad.param(uniform_init(rng, (3, d, d), fan), "c1"),
        c1_b=ad.param(np.zeros(d), "cb1"),
        c2_w=ad.param(uniform_init(rng, (3, d, d), fan), "c2"),
        c2_b=ad.param(np.zeros(d), "cb2"),
        head_w=ad.param(uniform_init(rng, (d,), d), "hw"),
        head_b=ad.param(np.zeros(()), "hb"))


def make_synthesizer_params(cfg: SynthesizerConfig,
                            rng: np.random.Generator) -> SynthesizerParams:
    cfg.validate()
    d, f = cfg.token_dim, cfg.ffn_dim
    text = TextEncoderParams(
        embed=ad.param(uniform_init(rng, (cfg.vocab_size, d), d), "emb"),
        blocks=[_make_fft_block(d, f, rng) for _ in range(cfg.enc_blocks)])
    dims = cfg.stream_dims()
    agg = AggregatorParams(
        w=ad.param(np.zeros(5), "agg_w"),
        proj_w={s: ad.param(uniform_init(rng, (dims[s], d), dims[s]), f"p_{s}")
                for s in STREAMS},
        proj_b={s: ad.param(np.zeros(d), f"pb_{s}") for s in STREAMS})
    var = VarianceAdaptorParams(
        duration=_make_variance_predictor(d, rng),
        pitch=_make_variance_predictor(d, rng),
        energy=_make_variance_predictor(d, rng),
        pitch_vec=ad.param(uniform_init(rng, (d,), d), "pv"),
        energy_vec=ad.param(uniform_init(rng, (d,), d), "ev"))
    dec = MelDecoderParams(
        blocks=[_make_fft_block(d, f, rng) for _ in range(cfg.dec_blocks)],
        out_w=ad.param(uniform_init(rng, (d, cfg.n_mels), d), "ow"),
        out_b=ad.param(np.zeros(cfg.n_mels), "ob"))
    return SynthesizerParams(config=cfg, text=text,
                             speaker=ad.param(uniform_init(rng, (2, d), d), "spk"),
                             agg=agg, var=var, dec=dec)


def encode_text(params: SynthesizerParams, tokens: list[int],
                train: bool = False,
                rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Token matrix [n, token_dim] and its mean-pooled content vector."""
    cfg = params.config
    if not tokens:
        raise ValidationError("cannot encode an empty token sequence")
    for t in tokens:
        if not 0 <= t < cfg.vocab_size:
            raise ValidationError(f"token id {t} outside vocab "
                                  f"[0, {cfg.vocab_size})")
    p = cfg.dropout if train else 0.0
    if p > 0.0 and rng is None:
        raise ConfigurationError("training-mode dropout needs an rng")
    x = ad.gather_rows(params.text.embed, np.asarray(tokens, dtype=np.int64))
    x = ad.add(x, ad.tensor(sinusoid_table(len(tokens), cfg.token_dim)))
    for block in params.text.blocks:
        x = fft_block(block, x, cfg.heads, p, rng)
    return x, ad.amean(x, axis=0)


def speaker_vector(params: SynthesizerParams, speaker: int) -> Tensor:
    if speaker not in (0, 1):
        raise ValidationError(f"speaker must be 0 or 1, got {speaker}")
    return ad.reshape(ad.rows(params.speaker, speaker, speaker + 1),
                      (params.config.token_dim,))


def aggregate_features(params: SynthesizerParams, content: Tensor,
                       speaker: Tensor, emotion: Tensor, intensity: Tensor,
                       prosody: Tensor) -> Tensor:
    """Softmax-weighted sum of the five projected streams."""
    streams = {"content": content, "speaker": speaker, "emotion": emotion,
               "intensity": intensity, "prosody": prosody}
    dims = params.config.stream_dims()
    for s in STREAMS:
        if streams[s].data.shape != (dims[s],):
            raise ValidationError(f"{s} stream must have shape ({dims[s]},), "
                                  f"got {streams[s].data.shape}")
    agg = params.agg
    projected = [ad.add(ad.matmul(streams[s], agg.proj_w[s]), agg.proj_b[s])
                 for s in STREAMS]
    weights = ad.softmax_last(agg.w)
    return ad.matmul(weights, ad.stack_rows(projected))


def condition_tokens(token_matrix: Tensor, mix: Tensor) -> Tensor:
    """Broadcast-add the aggregated feature to every token vector."""
    return ad.add(token_matrix, ad.reshape(mix, (1, mix.data.shape[0])))


def _run_variance_predictor(p: VariancePredictorParams, x: Tensor) -> Tensor:
    h = ad.relu(ad.conv1d_same(x, p.c1_w, p.c1_b))
    h = ad.relu(ad.conv1d_same(h, p.c2_w, p.c2_b))
    return ad.add(ad.matmul(h, p.head_w), p.head_b)      # [n]


@dataclass
class VarianceOutput:
    log_duration: Tensor        # [n] predicted log frame counts
    pitch: Tensor               # [n]
    energy: Tensor              # [n]
    frames: Tensor              # [sum(durations), token_dim]
    durations: np.ndarray       # integer counts actually used to expand

    def validate(self) -> None:
        if self.frames.data.shape[0] != int(self.durations.sum()):
            raise ValidationError("frame count disagrees with durations")


def variance_adapt(params: SynthesizerParams, token_matrix: Tensor,
                   teacher_durations: np.ndarray | None = None) -> VarianceOutput:
    """Predict per-token variances and expand tokens into frames.

    Teacher durations drive the expansion when given (training); otherwise
    the rounded exponential of the predicted log-duration does, clamped to
    at least one frame per token.
    """
    if token_matrix.data.shape[0] < 1:
        raise ValidationError("variance adaptor needs >= 1 token")
    var = params.var
    log_dur = _run_variance_predictor(var.duration, token_matrix)
    pitch = _run_variance_predictor(var.pitch, token_matrix)
    energy = _run_variance_predictor(var.energy, token_matrix)

    n = token_matrix.data.shape[0]
    enriched = ad.add(token_matrix,
                      ad.mul(ad.reshape(pitch, (n, 1)), var.pitch_vec))
    enriched = ad.add(enriched,
                      ad.mul(ad.reshape(energy, (n, 1)), var.energy_vec))

    if teacher_durations is not None:
        durations = np.asarray(teacher_durations, dtype=np.int64)
        if durations.shape != (n,):
            raise ValidationError(f"teacher durations must have shape ({n},)")
        if (durations < 0).any():
            raise ValidationError("teacher durations must be >= 0")
    else:
        durations = np.maximum(1, np.rint(np.exp(log_dur.data))).astype(np.int64)
    idx = np.repeat(np.arange(n), durations)
    frames = ad.gather_rows(enriched, idx)
    out = VarianceOutput(log_duration=log_dur, pitch=pitch, energy=energy,
                         frames=frames, durations=durations)
    out.validate()
    return out


def decode_mel(params: SynthesizerParams, frames: Tensor, train: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
    """Frame matrix [F, token_dim] to mel rows [F, n_mels]."""
    cfg = params.config
    if frames.data.shape[0] < 1:
        raise ValidationError("mel decoder needs >= 1 frame")
    p = cfg.dropout if train else 0.0
    if p > 0.0 and rng is None:
        raise ConfigurationError("training-mode dropout needs an rng")
    x = ad.add(frames, ad.tensor(sinusoid_table(frames.data.shape[0],
                                                cfg.token_dim)))
    for block in params.dec.blocks:
        x = fft_block(block, x, cfg.heads, p, rng)
    return ad.linear(x, params.dec.out_w, params.dec.out_b)


@dataclass
class SynthPrediction:
    mel: Tensor                 # [frames, n_mels]
    pitch: Tensor               # [tokens]
    energy: Tensor              # [tokens]
    log_duration: Tensor        # [tokens]


def fs2_loss(pred: SynthPrediction,
             targets: AcousticTargets) -> tuple[Tensor, dict[str, Tensor]]:
    """Mel MAE plus MSE on pitch, energy, and log-duration."""
    if pred.mel.data.shape != targets.mel.shape:
        raise ValidationError(f"mel shapes differ: {pred.mel.data.shape} "
                              f"vs {targets.mel.shape}")
    n = pred.pitch.data.shape[0]
    for name, arr in (("pitch", targets.pitch), ("energy", targets.energy),
                      ("duration", targets.duration)):
        if arr.shape != (n,):
            raise ValidationError(f"{name} target must have shape ({n},)")
    if (targets.duration < 1).any():
        raise ValidationError("duration targets must be >= 1")
    components = {
        "mel": ad.mae_loss(pred.mel, ad.tensor(targets.mel)),
        "pitch": ad.mse_loss(pred.pitch, ad.tensor(targets.pitch)),
        "energy": ad.mse_loss(pred.energy, ad.tensor(targets.energy)),
        "duration": ad.mse_loss(pred.log_duration,
                                ad.tensor(np.log(targets.duration))),
    }
    total = ad.add_n(list(components.values()))
    return total, components


def export_mel(path, mel: np.ndarray, pitch: np.ndarray, energy: np.ndarray,
               duration: np.ndarray) -> None:
    """Binary mel matrix with a frames/bins header, plus a JSON sidecar."""
    path = Path(path)
    mel = np.asarray(mel, dtype=np.float32)
    if mel.ndim != 2:
        raise ValidationError("mel must be a 2-d array")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", mel.shape[0], mel.shape[1]))
        fh.write(mel.astype("<f4").tobytes())
    sidecar = {"pitch": [float(x) for x in pitch],
               "energy": [float(x) for x in energy],
               "duration": [int(x) for x in duration]}
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=1) + "\n")


def load_mel(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8:
        raise ValidationError(f"{path} too short for a mel header")
    frames, bins = struct.unpack("<II", raw[:8])
    want = 8 + 4 * frames * bins
    if len(raw) != want:
        raise ValidationError(f"{path}: expected {want} bytes, have {len(raw)}")
    mel = np.frombuffer(raw[8:], dtype="<f4").reshape(frames, bins)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return mel.astype(np.float64), sidecar
