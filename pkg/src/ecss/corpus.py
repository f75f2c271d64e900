"""Conversational data model and the deterministic synthetic corpus.

Each utterance is a five-tuple (text tokens, speaker, audio feature vector,
emotion, intensity) plus closed-form acoustic targets. The generator draws
label chains with configurable persistence so dialogue history is predictive
of the current labels, and delegates every acoustic quantity to
`oracle_acoustics`, a pure function that tests can re-derive line by line.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable

import numpy as np

from .errors import CorpusFormatError, ConfigurationError, NoHistoryError, ValidationError


class EmotionLabel(IntEnum):
    happy = 0
    sad = 1
    angry = 2
    disgust = 3
    fear = 4
    surprise = 5
    neutral = 6


class IntensityLabel(IntEnum):
    weak = 0
    medium = 1
    strong = 2


EMOTION_NAMES = tuple(e.name for e in EmotionLabel)
INTENSITY_NAMES = tuple(i.name for i in IntensityLabel)

# Annotated-corpus label counts the skewed mode reproduces as probabilities.
SKEWED_EMOTION_COUNTS = (3871, 722, 226, 186, 74, 497, 18197)
SKEWED_INTENSITY_COUNTS = (19973, 3646, 154)

AUDIO_DIM = 256
PROSODY_DIM = 256
MEL_BINS = 80

# Audio anchors: emotion direction scaled by intensity, plus a speaker offset.
ANCHOR_EMOTION_SCALE = 2.0
ANCHOR_INTENSITY_STEP = 0.25
ANCHOR_SPEAKER_SCALE = 0.5
AUDIO_NOISE_SCALE = 0.05
# Minimum distance between distinct (emotion, intensity) anchors; the closest
# pair differs by one intensity step: 2.0 * 0.25 = 0.5 > 4 * noise scale.
ANCHOR_MIN_SEPARATION = ANCHOR_EMOTION_SCALE * ANCHOR_INTENSITY_STEP

_BASIS_SEED = 0x5EC5


def _orthonormal_rows(n: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, n)))
    rows = q.T[:n]
    # Pin the sign so the basis does not depend on the QR implementation.
    signs = np.sign(rows[np.arange(n), np.abs(rows).argmax(axis=1)])
    return rows * signs[:, None]


_joint = _orthonormal_rows(9, AUDIO_DIM, _BASIS_SEED)
EMOTION_DIRECTIONS = _joint[:7]          # [7, 256], orthonormal
SPEAKER_DIRECTIONS = _joint[7:]          # [2, 256], orthogonal to the above
PROSODY_DIRECTIONS = _orthonormal_rows(7, PROSODY_DIM, _BASIS_SEED + 1)


def audio_anchor(emotion: int, intensity: int, speaker: int) -> np.ndarray:
    """Noise-free audio feature for one (emotion, intensity, speaker) cell."""
    vec = ANCHOR_EMOTION_SCALE * (1.0 + ANCHOR_INTENSITY_STEP * intensity) * EMOTION_DIRECTIONS[emotion]
    return vec + ANCHOR_SPEAKER_SCALE * SPEAKER_DIRECTIONS[speaker]


@dataclass(eq=False)
class AcousticTargets:
    mel: np.ndarray        # [frames, 80]
    pitch: np.ndarray      # [tokens]
    energy: np.ndarray     # [tokens]
    duration: np.ndarray   # [tokens], integer frame counts >= 1
    prosody: np.ndarray    # [256]


@dataclass(eq=False)
class Utterance:
    text_tokens: list[int]
    speaker: int
    audio_feat: np.ndarray          # [256]
    emotion: EmotionLabel
    intensity: IntensityLabel
    targets: AcousticTargets | None


@dataclass(eq=False)
class Conversation:
    id: str
    turns: list[Utterance]


@dataclass(frozen=True)
class GeneratorConfig:
    n_conversations: int
    seed: int = 0
    mean_turns: float = 9.3
    vocab_size: int = 64
    label_mode: str = "paper_skewed"   # or "balanced"
    # Probability that a label repeats the previous turn's label before the
    # marginal draw; the stationary distribution stays equal to the marginals.
    label_persistence: float = 0.9

    def validate(self) -> None:
        if self.n_conversations < 1:
            raise ConfigurationError("n_conversations must be >= 1")
        if self.mean_turns < 2:
            raise ConfigurationError("mean_turns must be >= 2")
        if self.vocab_size < 2:
            raise ConfigurationError("vocab_size must be >= 2")
        if self.label_mode not in ("paper_skewed", "balanced"):
            raise ConfigurationError(f"unknown label_mode '{self.label_mode}'")
        if not 0.0 <= self.label_persistence < 1.0:
            raise ConfigurationError("label_persistence must be in [0, 1)")


@dataclass(eq=False)
class ContextWindow:
    history: list[Utterance]
    current: Utterance
    conversation_id: str = ""
    current_index: int = -1

    @property
    def j(self) -> int:
        return len(self.history)


def label_marginals(mode: str) -> tuple[np.ndarray, np.ndarray]:
    """(emotion, intensity) probability vectors for a label mode."""
    if mode == "balanced":
        return np.full(7, 1 / 7), np.full(3, 1 / 3)
    if mode != "paper_skewed":
        raise ConfigurationError(f"unknown label_mode: {mode!r}")
    emo = np.array(SKEWED_EMOTION_COUNTS, dtype=np.float64)
    inten = np.array(SKEWED_INTENSITY_COUNTS, dtype=np.float64)
    return emo / emo.sum(), inten / inten.sum()


def oracle_acoustics(text_tokens: list[int], speaker: int, emotion: int, intensity: int,
                     seed) -> tuple[np.ndarray, AcousticTargets]:
    """Closed-form acoustic ground truth for one utterance.

    audio_feat: anchor(emotion, intensity, speaker) + N(0, 0.05) noise.
    duration[t] = 1 + (token_t mod 4).
    mel[f, b]  = A(e) * sin(2*pi*b/80 + phi(token_of_frame)) + B(i) * f/frames
                 + speaker offset, with A(e) = 0.6 + 0.2 e, B(i) = 0.4 + 0.3 i,
                 offset -0.25 / +0.25 by speaker, phi(tok) = 2*pi*(tok mod 16)/16.
    pitch[t]   = 0.15 e + 0.20 i - 0.75 + 0.10 sin(2*pi*(tok mod 8)/8 + 0.5 t)
    energy[t]  = 0.10 e + 0.25 i - 0.55 + 0.10 cos(2*pi*(tok mod 8)/8 - 0.3 t)
    prosody    = emotion basis row scaled by (1 + intensity).
    """
    if len(text_tokens) == 0:
        raise ValidationError("text_tokens must be non-empty")
    toks = np.asarray(text_tokens, dtype=np.int64)
    rng = np.random.default_rng(seed)
    audio = audio_anchor(emotion, intensity, speaker) + rng.normal(0.0, AUDIO_NOISE_SCALE, AUDIO_DIM)

    duration = 1 + (toks % 4)
    frames = int(duration.sum())
    frame_tok = np.repeat(toks, duration)                       # token id per frame
    phi = 2 * np.pi * (frame_tok % 16) / 16.0
    amp = 0.6 + 0.2 * emotion
    ramp = 0.4 + 0.3 * intensity
    spk = -0.25 if speaker == 0 else 0.25
    bins = 2 * np.pi * np.arange(MEL_BINS) / MEL_BINS
    mel = amp * np.sin(bins[None, :] + phi[:, None]) \
        + ramp * (np.arange(frames) / frames)[:, None] + spk

    pos = np.arange(len(toks))
    base = 2 * np.pi * (toks % 8) / 8.0
    pitch = 0.15 * emotion + 0.20 * intensity - 0.75 + 0.10 * np.sin(base + 0.5 * pos)
    energy = 0.10 * emotion + 0.25 * intensity - 0.55 + 0.10 * np.cos(base - 0.3 * pos)
    prosody = PROSODY_DIRECTIONS[emotion] * (1.0 + intensity)
    return audio, AcousticTargets(mel=mel, pitch=pitch, energy=energy,
                                  duration=duration, prosody=prosody)


def _draw_chain(rng: np.random.Generator, marginals: np.ndarray, n: int, persistence: float) -> np.ndarray:
    labels = np.empty(n, dtype=np.int64)
    labels[0] = rng.choice(len(marginals), p=marginals)
    for t in range(1, n):
        if rng.random() < persistence:
            labels[t] = labels[t - 1]
        else:
            labels[t] = rng.choice(len(marginals), p=marginals)
    return labels


def generate_corpus(config: GeneratorConfig) -> list[Conversation]:
    """Deterministically generate conversations per the config.

    Each conversation derives its own seed sequence from (config.seed, index),
    so the output is identical regardless of generation order or threading.
    """
    config.validate()
    emo_p, int_p = label_marginals(config.label_mode)
    conversations = []
    for c in range(config.n_conversations):
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(c,)))
        n_turns = int(np.clip(2 + rng.poisson(config.mean_turns - 2.0), 2, 25))
        first_speaker = int(rng.integers(2))
        emotions = _draw_chain(rng, emo_p, n_turns, config.label_persistence)
        intensities = _draw_chain(rng, int_p, n_turns, config.label_persistence)
        turns = []
        for t in range(n_turns):
            n_tok = int(rng.integers(2, 9))
            toks = rng.integers(0, config.vocab_size, n_tok).tolist()
            speaker = (first_speaker + t) % 2
            noise_seed = np.random.SeedSequence(config.seed, spawn_key=(c, t, 7))
            audio, targets = oracle_acoustics(toks, speaker, int(emotions[t]),
                                              int(intensities[t]), noise_seed)
            turns.append(Utterance(text_tokens=toks, speaker=speaker, audio_feat=audio,
                                   emotion=EmotionLabel(int(emotions[t])),
                                   intensity=IntensityLabel(int(intensities[t])),
                                   targets=targets))
        conversations.append(Conversation(id=f"c{c:05d}", turns=turns))
    return conversations


def slice_context(conversation: Conversation, current_index: int, length: int) -> ContextWindow:
    """History of up to `length` turns immediately before `current_index`."""
    if length < 1:
        raise ValidationError("context length must be >= 1")
    if current_index == 0:
        raise NoHistoryError("turn 0 has no dialogue history")
    if not 0 < current_index < len(conversation.turns):
        raise ValidationError(f"current_index {current_index} out of range")
    start = max(0, current_index - length)
    return ContextWindow(history=conversation.turns[start:current_index],
                         current=conversation.turns[current_index],
                         conversation_id=conversation.id,
                         current_index=current_index)


@dataclass
class CorpusStats:
    emotion_counts: np.ndarray      # [7]
    intensity_counts: np.ndarray    # [3]
    speaker_counts: np.ndarray      # [2]
    n_utterances: int
    n_conversations: int
    mean_turns: float


def corpus_stats(corpus: list[Conversation]) -> CorpusStats:
    if not corpus:
        raise ValidationError("empty corpus")
    emo = np.zeros(7, dtype=np.int64)
    inten = np.zeros(3, dtype=np.int64)
    spk = np.zeros(2, dtype=np.int64)
    total = 0
    for conv in corpus:
        for u in conv.turns:
            emo[int(u.emotion)] += 1
            inten[int(u.intensity)] += 1
            spk[u.speaker] += 1
            total += 1
    return CorpusStats(emotion_counts=emo, intensity_counts=inten, speaker_counts=spk,
                       n_utterances=total, n_conversations=len(corpus),
                       mean_turns=total / len(corpus))


def split_of(conversation_id: str) -> str:
    """Stable 8:1:1 split by hash of the conversation id."""
    digest = hashlib.md5(conversation_id.encode()).digest()
    bucket = int.from_bytes(digest[:8], "little") % 10
    return "train" if bucket < 8 else ("val" if bucket == 8 else "test")


def split_corpus(corpus: list[Conversation]) -> dict[str, list[Conversation]]:
    out: dict[str, list[Conversation]] = {"train": [], "val": [], "test": []}
    for conv in corpus:
        out[split_of(conv.id)].append(conv)
    return out


# ---------------------------------------------------------------------------
# JSON Lines persistence


def _conversation_record(conv: Conversation) -> dict:
    return {
        "id": conv.id,
        "turns": [
            {
                "tokens": list(map(int, u.text_tokens)),
                "speaker": int(u.speaker),
                "audio_feat": u.audio_feat.tolist(),
                "emotion": int(u.emotion),
                "intensity": int(u.intensity),
                "mel": u.targets.mel.tolist(),
                "pitch": u.targets.pitch.tolist(),
                "energy": u.targets.energy.tolist(),
                "duration": u.targets.duration.tolist(),
                "prosody": u.targets.prosody.tolist(),
            }
            for u in conv.turns
        ],
    }


def corpus_to_jsonl(corpus: Iterable[Conversation]) -> str:
    return "".join(json.dumps(_conversation_record(c), separators=(",", ":")) + "\n"
                   for c in corpus)


def save_corpus(corpus: list[Conversation], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(corpus_to_jsonl(corpus))


_TURN_FIELDS = ("tokens", "speaker", "audio_feat", "emotion", "intensity",
                "mel", "pitch", "energy", "duration", "prosody")


def _parse_turn(raw: dict, line: int) -> Utterance:
    for name in _TURN_FIELDS:
        if name not in raw:
            raise CorpusFormatError(line, name, "missing field")
    toks = raw["tokens"]
    if not toks:
        raise CorpusFormatError(line, "tokens", "must be non-empty")
    if not all(isinstance(t, int) and t >= 0 for t in toks):
        raise CorpusFormatError(line, "tokens", "token ids must be non-negative ints")
    if raw["speaker"] not in (0, 1):
        raise CorpusFormatError(line, "speaker", f"must be 0 or 1: {raw['speaker']!r}")
    try:
        audio = np.asarray(raw["audio_feat"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise CorpusFormatError(line, "audio_feat", str(exc)) from exc
    if audio.shape != (AUDIO_DIM,):
        raise CorpusFormatError(line, "audio_feat", f"expected {AUDIO_DIM} values")
    if not np.isfinite(audio).all():
        raise CorpusFormatError(line, "audio_feat", "non-finite value")
    if not isinstance(raw["emotion"], int) or not 0 <= raw["emotion"] < 7:
        raise CorpusFormatError(line, "emotion", f"out of range: {raw['emotion']!r}")
    if not isinstance(raw["intensity"], int) or not 0 <= raw["intensity"] < 3:
        raise CorpusFormatError(line, "intensity", f"out of range: {raw['intensity']!r}")
    duration = np.asarray(raw["duration"], dtype=np.int64)
    if duration.shape != (len(toks),) or (duration < 1).any():
        raise CorpusFormatError(line, "duration", "needs one count >= 1 per token")
    mel = np.asarray(raw["mel"], dtype=np.float64)
    if mel.ndim != 2 or mel.shape[1] != MEL_BINS:
        raise CorpusFormatError(line, "mel", f"expected rows of {MEL_BINS} bins")
    if mel.shape[0] != int(duration.sum()):
        raise CorpusFormatError(line, "mel", f"{mel.shape[0]} frames but durations sum to {int(duration.sum())}")
    pitch = np.asarray(raw["pitch"], dtype=np.float64)
    energy = np.asarray(raw["energy"], dtype=np.float64)
    if pitch.shape != (len(toks),):
        raise CorpusFormatError(line, "pitch", "one value per token required")
    if energy.shape != (len(toks),):
        raise CorpusFormatError(line, "energy", "one value per token required")
    prosody = np.asarray(raw["prosody"], dtype=np.float64)
    if prosody.shape != (PROSODY_DIM,):
        raise CorpusFormatError(line, "prosody", f"expected {PROSODY_DIM} values")
    targets = AcousticTargets(mel=mel, pitch=pitch, energy=energy,
                              duration=duration, prosody=prosody)
    return Utterance(text_tokens=list(map(int, toks)), speaker=int(raw["speaker"]),
                     audio_feat=audio, emotion=EmotionLabel(int(raw["emotion"])),
                     intensity=IntensityLabel(int(raw["intensity"])), targets=targets)


def load_corpus(source) -> list[Conversation]:
    """Parse a JSON-Lines corpus (path or text stream), enforcing every
    record invariant."""
    if hasattr(source, "read"):
        return _load_corpus_lines(source)
    with open(source, "r", encoding="utf-8") as fh:
        return _load_corpus_lines(fh)


def _load_corpus_lines(fh) -> list[Conversation]:
    corpus = []
    for line_no, line in enumerate(fh, start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(line_no, "<record>", f"invalid JSON: {exc}") from exc
        if "id" not in raw:
            raise CorpusFormatError(line_no, "id", "missing field")
        if "turns" not in raw or len(raw["turns"]) < 2:
            raise CorpusFormatError(line_no, "turns", "conversation needs >= 2 turns")
        turns = [_parse_turn(t, line_no) for t in raw["turns"]]
        for a, b in zip(turns, turns[1:]):
            if a.speaker == b.speaker:
                raise CorpusFormatError(line_no, "speaker", "speakers must alternate")
        corpus.append(Conversation(id=str(raw["id"]), turns=turns))
    return corpus
